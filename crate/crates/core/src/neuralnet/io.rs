//! Binary model format, all little-endian:
//!
//! ```text
//! magic "UCOM" | version u32 | n_layers u64 | (rows u64, cols u64) * n_layers
//! | bn_eps f64 | bn_momentum f64
//! | per layer: weights (rows*cols f64, row-major), bias (cols f64)
//! | per hidden layer: gamma, beta, running_mean, running_var (cols f64 each)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{BatchNorm, Dense, MlpModel, HIDDEN_LAYERS, N_CLASSES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UCOM";
const VERSION: u32 = 1;

pub fn write_model<W: Write>(mut out: W, model: &MlpModel) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.dense.len() as u64).to_le_bytes());
    for d in &model.dense {
        buf.extend_from_slice(&(d.weights.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(d.weights.ncols() as u64).to_le_bytes());
    }
    buf.extend_from_slice(&model.bn_eps.to_le_bytes());
    buf.extend_from_slice(&model.bn_momentum.to_le_bytes());
    let mut put = |xs: &mut dyn Iterator<Item = &f64>| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for d in &model.dense {
        put(&mut d.weights.iter());
        put(&mut d.bias.iter());
    }
    for n in &model.norms {
        put(&mut n.gamma.iter());
        put(&mut n.beta.iter());
        put(&mut n.running_mean.iter());
        put(&mut n.running_var.iter());
    }
    out.write_all(&buf).map_err(|e| Error::io("model", e))?;
    out.flush().map_err(|e| Error::io("model", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("model file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_model<R: Read>(mut input: R) -> Result<MlpModel> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("model", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let n_layers = c.u64()? as usize;
    if n_layers != HIDDEN_LAYERS + 1 {
        return Err(Error::Format(format!("model has {n_layers} layers")));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        dims.push((c.u64()? as usize, c.u64()? as usize));
    }
    let chained = dims.windows(2).all(|w| w[0].1 == w[1].0);
    if !chained || dims[n_layers - 1].1 != N_CLASSES || dims.iter().any(|&(r, k)| r == 0 || k == 0) {
        return Err(Error::Format(format!("inconsistent layer dimensions {dims:?}")));
    }
    let bn_eps = c.f64()?;
    let bn_momentum = c.f64()?;

    let mut dense = Vec::with_capacity(n_layers);
    for &(rows, cols) in &dims {
        let w = c.vec(rows.checked_mul(cols).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        dense.push(Dense {
            weights: Array2::from_shape_vec((rows, cols), w).expect("sized buffer"),
            bias: Array1::from(c.vec(cols)?),
        });
    }
    let mut norms = Vec::with_capacity(HIDDEN_LAYERS);
    for &(_, width) in &dims[..HIDDEN_LAYERS] {
        norms.push(BatchNorm {
            gamma: Array1::from(c.vec(width)?),
            beta: Array1::from(c.vec(width)?),
            running_mean: Array1::from(c.vec(width)?),
            running_var: Array1::from(c.vec(width)?),
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model",
            bytes.len() - c.pos
        )));
    }
    if norms.iter().any(|n| n.running_var.iter().any(|&v| !(v > 0.0))) {
        return Err(Error::Format("non-positive running variance".into()));
    }
    Ok(MlpModel::from_parts(dense, norms, bn_eps, bn_momentum))
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(std::io::BufWriter::new(file), model)
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(std::io::BufReader::new(file))
}
