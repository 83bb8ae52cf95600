//! Reverse-mode autodiff over dense 2D tensors.
//!
//! Operations record onto a tape during the forward pass and replay in
//! reverse for gradients. Everything is row-major `rows x cols`; scalars
//! are `1 x 1`. The op set is exactly what a small decoder LM needs,
//! plus `stop_grad`, which passes values through and blocks all gradient
//! flow.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Buf<S> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
}

enum Op<S> {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    MatmulTransB { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    AddRow { a: TensorId, row: TensorId, out: TensorId },
    Scale { a: TensorId, c: S, out: TensorId },
    Gelu { a: TensorId, out: TensorId },
    SoftmaxCausal { a: TensorId, out: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, xhat: TensorId, rstd: TensorId },
    EmbedGather { table: TensorId, ids: Vec<u32>, out: TensorId },
    RowSlice { a: TensorId, start: usize, out: TensorId },
    ColSlice { a: TensorId, start: usize, out: TensorId },
    ConcatCols { parts: Vec<TensorId>, out: TensorId },
    CrossEntropy { logits: TensorId, targets: Vec<u32>, mask: Vec<bool>, out: TensorId },
    MeanScalars { parts: Vec<TensorId>, out: TensorId },
    SumAll { a: TensorId, out: TensorId },
    StopGrad,
}

pub struct Tape<S: Scalar> {
    bufs: Vec<Buf<S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn alloc(&mut self, data: Vec<S>, rows: usize, cols: usize) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        let id = TensorId(self.bufs.len());
        self.bufs.push(Buf { data, rows, cols });
        self.grads.push(None);
        id
    }

    /// Register a leaf tensor (parameter or input). Data is copied onto
    /// the tape; the original stays untouched until the optimizer step.
    pub fn leaf(&mut self, data: &[S], rows: usize, cols: usize) -> TensorId {
        assert_eq!(data.len(), rows * cols, "leaf shape mismatch");
        self.alloc(data.to_vec(), rows, cols)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let b = &self.bufs[id.0];
        (b.rows, b.cols)
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.bufs[id.0].data
    }

    /// Value of a 1x1 tensor.
    pub fn value(&self, id: TensorId) -> S {
        let b = &self.bufs[id.0];
        assert_eq!((b.rows, b.cols), (1, 1), "value() needs a scalar tensor");
        b.data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a leaf, zeros if no gradient flowed to it.
    pub fn grad_or_zero(&self, id: TensorId) -> Vec<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.bufs[id.0].data.len()],
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.bufs[a.0].data, &self.bufs[b.0].data, &mut out, m, k, n);
        let id = self.alloc(out, m, n);
        self.ops.push(Op::Matmul { a, b, out: id });
        id
    }

    /// `a [m,k] @ b[n,k]^T -> [m,n]`, used for attention scores.
    pub fn matmul_transb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_transb inner dims {k} vs {k2}");
        let av = &self.bufs[a.0].data;
        let bv = &self.bufs[b.0].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        let id = self.alloc(out, m, n);
        self.ops.push(Op::MatmulTransB { a, b, out: id });
        id
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let id = self.alloc(out, m, n);
        self.ops.push(Op::Add { a, b, out: id });
        id
    }

    /// Broadcast a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row width mismatch");
        let rv = self.bufs[row.0].data.clone();
        let mut out = self.bufs[a.0].data.clone();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *o = *o + r;
            }
        }
        let id = self.alloc(out, m, n);
        self.ops.push(Op::AddRow { a, row, out: id });
        id
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.bufs[a.0].data.iter().map(|&x| x * c).collect();
        let id = self.alloc(out, m, n);
        self.ops.push(Op::Scale { a, c, out: id });
        id
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.bufs[a.0].data.iter().map(|&x| gelu_val(x)).collect();
        let id = self.alloc(out, m, n);
        self.ops.push(Op::Gelu { a, out: id });
        id
    }

    /// Row-wise softmax over a square score matrix where row `i` may only
    /// attend to columns `0..=i`; masked columns are exactly zero.
    pub fn softmax_causal(&mut self, a: TensorId) -> TensorId {
        let (t, t2) = self.shape(a);
        assert_eq!(t, t2, "softmax_causal needs a square matrix");
        let av = &self.bufs[a.0].data;
        let mut out = vec![S::zero(); t * t];
        for i in 0..t {
            let row = &av[i * t..i * t + i + 1];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[i * t + j] = e;
                denom += e;
            }
            for j in 0..=i {
                out[i * t + j] = out[i * t + j] / denom;
            }
        }
        let id = self.alloc(out, t, t);
        self.ops.push(Op::SoftmaxCausal { a, out: id });
        id
    }

    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(gamma), (1, n), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, n), "layer_norm beta shape");
        let eps = S::of(1e-5);
        let av = &self.bufs[a.0].data;
        let gv = &self.bufs[gamma.0].data;
        let bv = &self.bufs[beta.0].data;
        let mut out = vec![S::zero(); m * n];
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let inv_n = S::one() / S::of_usize(n);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().cloned().sum::<S>() * inv_n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_n;
            let r = S::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                out[i * n + j] = gv[j] * xh + bv[j];
            }
        }
        let xhat_id = self.alloc(xhat, m, n);
        let rstd_id = self.alloc(rstd, m, 1);
        let id = self.alloc(out, m, n);
        self.ops.push(Op::LayerNorm { a, gamma, beta, out: id, xhat: xhat_id, rstd: rstd_id });
        id
    }

    pub fn embed_gather(&mut self, table: TensorId, ids: &[u32]) -> TensorId {
        let (v, d) = self.shape(table);
        let tv = &self.bufs[table.0].data;
        let mut out = vec![S::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v, "embed id {id} out of vocab {v}");
            out[t * d..(t + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let out_id = self.alloc(out, ids.len(), d);
        self.ops.push(Op::EmbedGather { table, ids: ids.to_vec(), out: out_id });
        out_id
    }

    pub fn row_slice(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "row_slice out of range");
        let out = self.bufs[a.0].data[start * n..(start + len) * n].to_vec();
        let id = self.alloc(out, len, n);
        self.ops.push(Op::RowSlice { a, start, out: id });
        id
    }

    pub fn col_slice(&mut self, a: TensorId, start: usize, width: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(start + width <= n, "col_slice out of range");
        let av = &self.bufs[a.0].data;
        let mut out = vec![S::zero(); m * width];
        for i in 0..m {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&av[i * n + start..i * n + start + width]);
        }
        let id = self.alloc(out, m, width);
        self.ops.push(Op::ColSlice { a, start, out: id });
        id
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![S::zero(); m * total];
        let mut offset = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            assert_eq!(pm, m, "concat_cols row mismatch");
            let pv = &self.bufs[p.0].data;
            for i in 0..m {
                out[i * total + offset..i * total + offset + pn]
                    .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
            offset += pn;
        }
        let id = self.alloc(out, m, total);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out: id });
        id
    }

    /// Mean negative log-likelihood over unmasked positions; masked rows
    /// contribute nothing to value or gradient.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[u32], mask: &[bool]) -> TensorId {
        let (t, v) = self.shape(logits);
        assert_eq!(targets.len(), t, "targets length");
        assert_eq!(mask.len(), t, "mask length");
        let n_active = mask.iter().filter(|&&m| m).count();
        assert!(n_active > 0, "cross_entropy needs at least one unmasked position");
        let lv = &self.bufs[logits.0].data;
        let mut total = S::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let target = targets[i] as usize;
            assert!(target < v, "target out of vocab");
            total += logsumexp(row) - row[target];
        }
        let loss = total / S::of_usize(n_active);
        let id = self.alloc(vec![loss], 1, 1);
        self.ops.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            out: id,
        });
        id
    }

    pub fn mean_scalars(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let mut total = S::zero();
        for &p in parts {
            total += self.value(p);
        }
        let id = self.alloc(vec![total / S::of_usize(parts.len())], 1, 1);
        self.ops.push(Op::MeanScalars { parts: parts.to_vec(), out: id });
        id
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total = self.bufs[a.0].data.iter().cloned().sum();
        let id = self.alloc(vec![total], 1, 1);
        self.ops.push(Op::SumAll { a, out: id });
        id
    }

    /// Values pass through bitwise; backward contributes nothing to the
    /// input.
    pub fn stop_grad(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let out = self.bufs[a.0].data.clone();
        let id = self.alloc(out, m, n);
        self.ops.push(Op::StopGrad);
        id
    }

    // ── backward ─────────────────────────────────────────────────────

    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.shape(loss), (1, 1), "backward seeds a scalar loss");
        self.grads[loss.0] = Some(vec![S::one()]);
        let Tape { bufs, ops, grads } = self;
        for op in ops.iter().rev() {
            backward_op(op, bufs, grads);
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: TensorId, update: &[S]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, &u) in g.iter_mut().zip(update) {
                *gi += u;
            }
        }
        None => grads[id.0] = Some(update.to_vec()),
    }
}

fn backward_op<S: Scalar>(op: &Op<S>, bufs: &[Buf<S>], grads: &mut [Option<Vec<S>>]) {
    match op {
        Op::Matmul { a, b, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let (m, k) = (bufs[a.0].rows, bufs[a.0].cols);
            let n = bufs[b.0].cols;
            let av = &bufs[a.0].data;
            let bv = &bufs[b.0].data;
            // dA[i,l] = dot(go row i, B row l)
            let mut da = vec![S::zero(); m * k];
            for i in 0..m {
                let gorow = &go[i * n..(i + 1) * n];
                for l in 0..k {
                    da[i * k + l] = dot(gorow, &bv[l * n..(l + 1) * n]);
                }
            }
            accumulate(grads, *a, &da);
            // dB[l,:] += A[i,l] * go row i
            let mut db = vec![S::zero(); k * n];
            for i in 0..m {
                let gorow = &go[i * n..(i + 1) * n];
                for l in 0..k {
                    axpy(av[i * k + l], gorow, &mut db[l * n..(l + 1) * n]);
                }
            }
            accumulate(grads, *b, &db);
        }
        Op::MatmulTransB { a, b, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let (m, k) = (bufs[a.0].rows, bufs[a.0].cols);
            let n = bufs[b.0].rows;
            let av = &bufs[a.0].data;
            let bv = &bufs[b.0].data;
            // dA row i += go[i,j] * B row j
            let mut da = vec![S::zero(); m * k];
            for i in 0..m {
                for j in 0..n {
                    axpy(go[i * n + j], &bv[j * k..(j + 1) * k], &mut da[i * k..(i + 1) * k]);
                }
            }
            accumulate(grads, *a, &da);
            // dB row j += go[i,j] * A row i
            let mut db = vec![S::zero(); n * k];
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    axpy(go[i * n + j], arow, &mut db[j * k..(j + 1) * k]);
                }
            }
            accumulate(grads, *b, &db);
        }
        Op::Add { a, b, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            accumulate(grads, *a, &go);
            accumulate(grads, *b, &go);
        }
        Op::AddRow { a, row, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            accumulate(grads, *a, &go);
            let (m, n) = (bufs[a.0].rows, bufs[a.0].cols);
            let mut dr = vec![S::zero(); n];
            for i in 0..m {
                for (d, &g) in dr.iter_mut().zip(&go[i * n..(i + 1) * n]) {
                    *d += g;
                }
            }
            accumulate(grads, *row, &dr);
        }
        Op::Scale { a, c, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let da: Vec<S> = go.iter().map(|&g| g * *c).collect();
            accumulate(grads, *a, &da);
        }
        Op::Gelu { a, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let da: Vec<S> = bufs[a.0]
                .data
                .iter()
                .zip(&go)
                .map(|(&x, &g)| g * gelu_deriv(x))
                .collect();
            accumulate(grads, *a, &da);
        }
        Op::SoftmaxCausal { a, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let t = bufs[a.0].rows;
            let pv = &bufs[out.0].data;
            let mut da = vec![S::zero(); t * t];
            for i in 0..t {
                let mut inner = S::zero();
                for j in 0..=i {
                    inner += go[i * t + j] * pv[i * t + j];
                }
                for j in 0..=i {
                    da[i * t + j] = pv[i * t + j] * (go[i * t + j] - inner);
                }
            }
            accumulate(grads, *a, &da);
        }
        Op::LayerNorm { a, gamma, beta, out, xhat, rstd } => {
            let Some(go) = grads[out.0].clone() else { return };
            let (m, n) = (bufs[a.0].rows, bufs[a.0].cols);
            let gv = &bufs[gamma.0].data;
            let xh = &bufs[xhat.0].data;
            let rs = &bufs[rstd.0].data;
            let inv_n = S::one() / S::of_usize(n);
            let mut dgamma = vec![S::zero(); n];
            let mut dbeta = vec![S::zero(); n];
            let mut da = vec![S::zero(); m * n];
            for i in 0..m {
                let gorow = &go[i * n..(i + 1) * n];
                let xrow = &xh[i * n..(i + 1) * n];
                let mut mean_dxhat = S::zero();
                let mut mean_dxhat_x = S::zero();
                for j in 0..n {
                    dgamma[j] += gorow[j] * xrow[j];
                    dbeta[j] += gorow[j];
                    let dxh = gorow[j] * gv[j];
                    mean_dxhat += dxh;
                    mean_dxhat_x += dxh * xrow[j];
                }
                mean_dxhat = mean_dxhat * inv_n;
                mean_dxhat_x = mean_dxhat_x * inv_n;
                for j in 0..n {
                    let dxh = gorow[j] * gv[j];
                    da[i * n + j] = rs[i] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_x);
                }
            }
            accumulate(grads, *a, &da);
            accumulate(grads, *gamma, &dgamma);
            accumulate(grads, *beta, &dbeta);
        }
        Op::EmbedGather { table, ids, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let (v, d) = (bufs[table.0].rows, bufs[table.0].cols);
            let mut dt = vec![S::zero(); v * d];
            for (t, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for (dst, &g) in dt[id * d..(id + 1) * d].iter_mut().zip(&go[t * d..(t + 1) * d]) {
                    *dst += g;
                }
            }
            accumulate(grads, *table, &dt);
        }
        Op::RowSlice { a, start, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let (m, n) = (bufs[a.0].rows, bufs[a.0].cols);
            let len = bufs[out.0].rows;
            let mut da = vec![S::zero(); m * n];
            da[start * n..(start + len) * n].copy_from_slice(&go);
            accumulate(grads, *a, &da);
        }
        Op::ColSlice { a, start, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let (m, n) = (bufs[a.0].rows, bufs[a.0].cols);
            let width = bufs[out.0].cols;
            let mut da = vec![S::zero(); m * n];
            for i in 0..m {
                da[i * n + start..i * n + start + width]
                    .copy_from_slice(&go[i * width..(i + 1) * width]);
            }
            accumulate(grads, *a, &da);
        }
        Op::ConcatCols { parts, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let m = bufs[out.0].rows;
            let total = bufs[out.0].cols;
            let mut offset = 0;
            for &p in parts {
                let pn = bufs[p.0].cols;
                let mut dp = vec![S::zero(); m * pn];
                for i in 0..m {
                    dp[i * pn..(i + 1) * pn]
                        .copy_from_slice(&go[i * total + offset..i * total + offset + pn]);
                }
                accumulate(grads, p, &dp);
                offset += pn;
            }
        }
        Op::CrossEntropy { logits, targets, mask, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let g = go[0];
            let (t, v) = (bufs[logits.0].rows, bufs[logits.0].cols);
            let lv = &bufs[logits.0].data;
            let n_active = S::of_usize(mask.iter().filter(|&&m| m).count());
            let scale = g / n_active;
            let mut dl = vec![S::zero(); t * v];
            for i in 0..t {
                if !mask[i] {
                    continue;
                }
                let row = &lv[i * v..(i + 1) * v];
                let lse = logsumexp(row);
                let target = targets[i] as usize;
                for j in 0..v {
                    let p = (row[j] - lse).exp();
                    dl[i * v + j] = scale * (p - if j == target { S::one() } else { S::zero() });
                }
            }
            accumulate(grads, *logits, &dl);
        }
        Op::MeanScalars { parts, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let share = go[0] / S::of_usize(parts.len());
            for &p in parts {
                accumulate(grads, p, &[share]);
            }
        }
        Op::SumAll { a, out } => {
            let Some(go) = grads[out.0].clone() else { return };
            let da = vec![go[0]; bufs[a.0].data.len()];
            accumulate(grads, *a, &da);
        }
        Op::StopGrad => {}
    }
}

// ── kernels ─────────────────────────────────────────────────────────

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy<S: Scalar>(c: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            axpy(ail, &b[l * n..(l + 1) * n], orow);
        }
    }
}

fn logsumexp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn gelu_val<S: Scalar>(x: S) -> S {
    let c0 = S::of(0.7978845608028654); // sqrt(2/pi)
    let c1 = S::of(0.044715);
    let half = S::of(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_deriv<S: Scalar>(x: S) -> S {
    let c0 = S::of(0.7978845608028654);
    let c1 = S::of(0.044715);
    let half = S::of(0.5);
    let three = S::of(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (S::one() + three * c1 * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on a scalar-valued graph builder.
    fn finite_diff_check(
        build: impl Fn(&mut Tape<f64>, &[Vec<f64>]) -> (Vec<TensorId>, TensorId),
        inputs: &[Vec<f64>],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let (leaf_ids, loss) = build(&mut tape, inputs);
        tape.backward(loss);
        let grads: Vec<Vec<f64>> = leaf_ids.iter().map(|&id| tape.grad_or_zero(id)).collect();

        let h = 1e-6;
        for (leaf, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let eval = |delta: f64| {
                    let mut xs = inputs.to_vec();
                    xs[leaf][j] += delta;
                    let mut t = Tape::new();
                    let (_, l) = build(&mut t, &xs);
                    t.value(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads[leaf][j];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < tol,
                    "leaf {leaf} idx {j}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 6);
        let b = randn(&mut rng, 12);
        finite_diff_check(
            |t, xs| {
                let a = t.leaf(&xs[0], 2, 3);
                let b = t.leaf(&xs[1], 3, 4);
                let c = t.matmul(a, b);
                let loss = t.sum_all(c);
                (vec![a, b], loss)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn matmul_transb_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 6);
        let b = randn(&mut rng, 12);
        finite_diff_check(
            |t, xs| {
                let a = t.leaf(&xs[0], 2, 3);
                let b = t.leaf(&xs[1], 4, 3);
                let hmm = t.matmul_transb(a, b);
                let g = t.gelu(hmm);
                let loss = t.sum_all(g);
                (vec![a, b], loss)
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn add_distributes_gradient_unchanged() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[1.0, 2.0], 1, 2);
        let b = tape.leaf(&[3.0, 4.0], 1, 2);
        let c = tape.add(a, b);
        let loss = tape.sum_all(c);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 12);
        let g = randn(&mut rng, 4);
        let b = randn(&mut rng, 4);
        finite_diff_check(
            |t, xs| {
                let x = t.leaf(&xs[0], 3, 4);
                let g = t.leaf(&xs[1], 1, 4);
                let b = t.leaf(&xs[2], 1, 4);
                let y = t.layer_norm(x, g, b);
                let act = t.gelu(y);
                let loss = t.sum_all(act);
                (vec![x, g, b], loss)
            },
            &[x, g, b],
            1e-4,
        );
    }

    #[test]
    fn softmax_causal_rows_sum_to_one_and_mask_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 25);
        let mut tape = Tape::new();
        let a = tape.leaf(&x, 5, 5);
        let p = tape.softmax_causal(a);
        let pv = tape.values(p);
        for i in 0..5 {
            let row_sum: f64 = pv[i * 5..i * 5 + i + 1].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12, "row {i} sums to {row_sum}");
            for j in i + 1..5 {
                assert_eq!(pv[i * 5 + j], 0.0, "future position exactly zero");
            }
        }
    }

    #[test]
    fn softmax_causal_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 16);
        let w = randn(&mut rng, 16);
        finite_diff_check(
            |t, xs| {
                let a = t.leaf(&xs[0], 4, 4);
                let w = t.leaf(&xs[1], 4, 4);
                let p = t.softmax_causal(a);
                let c = t.matmul(p, w);
                let loss = t.sum_all(c);
                (vec![a, w], loss)
            },
            &[x, w],
            1e-5,
        );
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let v = 32;
        let mut tape = Tape::new();
        let logits = tape.leaf(&vec![0.25; 3 * v], 3, v);
        let loss = tape.cross_entropy(logits, &[1, 5, 9], &[true, true, true]);
        assert!((tape.value(loss) - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_confident_correct_goes_to_zero() {
        let v = 8;
        let mut data = vec![0.0; v];
        data[3] = 50.0;
        let mut tape = Tape::new();
        let logits = tape.leaf(&data, 1, v);
        let loss = tape.cross_entropy(logits, &[3], &[true]);
        assert!(tape.value(loss) < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 3 * 6);
        finite_diff_check(
            |t, xs| {
                let logits = t.leaf(&xs[0], 3, 6);
                let loss = t.cross_entropy(logits, &[2, 0, 5], &[true, false, true]);
                (vec![logits], loss)
            },
            &[x],
            1e-5,
        );
        // masked row gets exactly zero gradient
        let mut tape = Tape::new();
        let logits = tape.leaf(&vec![0.1; 18], 3, 6);
        let loss = tape.cross_entropy(logits, &[2, 0, 5], &[true, false, true]);
        tape.backward(loss);
        let g = tape.grad(logits).unwrap();
        assert!(g[6..12].iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "at least one unmasked")]
    fn cross_entropy_rejects_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&[0.0, 0.0], 1, 2);
        tape.cross_entropy(logits, &[0], &[false]);
    }

    #[test]
    fn embed_gather_scatters_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = randn(&mut rng, 5 * 3);
        finite_diff_check(
            |t, xs| {
                let tab = t.leaf(&xs[0], 5, 3);
                let e = t.embed_gather(tab, &[1, 4, 1]);
                let g = t.gelu(e);
                let loss = t.sum_all(g);
                (vec![tab], loss)
            },
            &[table],
            1e-5,
        );
    }

    #[test]
    fn slices_and_concat_round_trip_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, 4 * 6);
        finite_diff_check(
            |t, xs| {
                let a = t.leaf(&xs[0], 4, 6);
                let left = t.col_slice(a, 0, 3);
                let right = t.col_slice(a, 3, 3);
                let swapped = t.concat_cols(&[right, left]);
                let rows = t.row_slice(swapped, 1, 2);
                let g = t.gelu(rows);
                let loss = t.sum_all(g);
                (vec![a], loss)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn stop_grad_passes_values_bitwise_and_blocks_gradient() {
        let x = vec![1.5f64, -2.25, 3.125];
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&x, 1, 3);
        let sg = tape.stop_grad(a);
        assert_eq!(
            tape.values(sg).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let loss = tape.sum_all(sg);
        tape.backward(loss);
        assert!(tape.grad(a).is_none(), "no gradient flows through sg");
    }

    #[test]
    fn decoupling_algebra_gradient_identity() {
        // d/dx sum(x - sg(x)) == d/dx sum(x), while the value is zero
        let x = vec![0.7, -1.1, 2.2];
        let mut tape = Tape::new();
        let a = tape.leaf(&x, 1, 3);
        let sg = tape.stop_grad(a);
        let neg = tape.scale(sg, -1.0);
        let diff = tape.add(a, neg);
        let loss = tape.sum_all(diff);
        assert_eq!(tape.value(loss), 0.0);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_scalars_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2.0], 1, 1);
        let b = tape.leaf(&[4.0], 1, 1);
        let m = tape.mean_scalars(&[a, b]);
        assert_eq!(tape.value(m), 3.0);
        tape.backward(m);
        assert_eq!(tape.grad(a).unwrap(), &[0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[0.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*W1) + sum(x*W1) reusing the same intermediate
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0], 1, 2);
        let w = tape.leaf(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let y = tape.matmul(x, w);
        let s1 = tape.sum_all(y);
        let s2 = tape.sum_all(y);
        let total = tape.add(s1, s2);
        tape.backward(total);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }
}
