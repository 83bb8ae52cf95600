//! Checkpoint format: one newline-terminated JSON header (config plus
//! group layout), then raw little-endian f64 parameter blocks in
//! canonical layout order.

use super::model::{LmConfig, LmParams, NnError};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: LmConfig,
    layout: Vec<LayoutEntry>,
    scalar: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayoutEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &LmParams<S>) -> std::io::Result<()> {
    let layout = params.cfg.param_layout();
    let header = Header {
        config: params.cfg.clone(),
        layout: layout
            .iter()
            .map(|m| LayoutEntry {
                group: m.group.to_string(),
                name: m.name.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
        scalar: "f64".into(),
    };
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for tensor in params.tensors() {
        for &x in tensor {
            f.write_all(&x.to_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LmParams<S>, NnError> {
    let io_err = |e: std::io::Error| NnError::ShapeMismatch(format!("checkpoint io: {e}"));
    let mut f = BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        f.read_exact(&mut byte).map_err(io_err)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| NnError::ShapeMismatch(format!("checkpoint header: {e}")))?;
    let cfg = header.config;
    let layout = cfg.param_layout();
    if layout.len() != header.layout.len() {
        return Err(NnError::ShapeMismatch("layout length mismatch".into()));
    }
    let mut params: LmParams<S> = LmParams::init(&cfg)?;
    for (meta, tensor) in layout.iter().zip(params.tensors_mut()) {
        let mut buf = vec![0u8; meta.len() * 8];
        f.read_exact(&mut buf).map_err(io_err)?;
        for (j, chunk) in buf.chunks_exact(8).enumerate() {
            tensor[j] = S::of(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
    }
    Ok(params)
}
