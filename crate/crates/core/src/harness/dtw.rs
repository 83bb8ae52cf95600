//! Normalized dynamic-time-warping distance between loss curves.
//!
//! Curves are EMA-smoothed first (training curves are compared after
//! smoothing; raw per-step noise would dominate at tiny batch sizes),
//! then aligned with the classic quadratic DP under L1 point cost, and
//! the total cost is divided by the warping-path length.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DtwError {
    #[error("empty loss curve")]
    EmptyCurve,
}

pub const EMA_DECAY: f64 = 0.9;

pub fn ema<S: Scalar>(xs: &[S], decay: S) -> Vec<S> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = match xs.first() {
        Some(&x) => x,
        None => return out,
    };
    for &x in xs {
        acc = decay * acc + (S::one() - decay) * x;
        out.push(acc);
    }
    out
}

/// Normalized DTW between two raw curves: smooth, align, divide the
/// optimal alignment cost by its path length.
pub fn loss_dtw<S: Scalar>(a: &[S], b: &[S]) -> Result<S, DtwError> {
    if a.is_empty() || b.is_empty() {
        return Err(DtwError::EmptyCurve);
    }
    let decay = S::of(EMA_DECAY);
    let sa = ema(a, decay);
    let sb = ema(b, decay);
    Ok(dtw_normalized(&sa, &sb))
}

fn dtw_normalized<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len();
    let m = b.len();
    let inf = S::infinity();
    let mut d = vec![inf; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    d[idx(0, 0)] = S::zero();
    for i in 1..=n {
        for j in 1..=m {
            let cost = (a[i - 1] - b[j - 1]).abs();
            let best = d[idx(i - 1, j - 1)].min(d[idx(i - 1, j)]).min(d[idx(i, j - 1)]);
            d[idx(i, j)] = cost + best;
        }
    }
    // count the alignment path, preferring diagonal moves on ties
    let mut i = n;
    let mut j = m;
    let mut steps = 0usize;
    while i > 1 || j > 1 {
        steps += 1;
        let diag = if i > 1 && j > 1 { d[idx(i - 1, j - 1)] } else { inf };
        let up = if i > 1 { d[idx(i - 1, j)] } else { inf };
        let left = if j > 1 { d[idx(i, j - 1)] } else { inf };
        let best = diag.min(up).min(left);
        if diag == best {
            i -= 1;
            j -= 1;
        } else if up == best {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    steps += 1; // the (1,1) cell itself
    d[idx(n, m)] / S::of_usize(steps)
}
