//! Differentiable primitives the model is built from: a named parameter
//! store with gradient slots, a reverse-mode tape over vector-valued nodes,
//! and the recurrent/attention/copy layers.

pub mod layers;
pub mod tape;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Named, shaped parameter tensors with matching gradient accumulators.
/// Registration order is part of the store's identity (checkpoints and the
/// optimizer both iterate in that order).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

pub enum Init {
    /// Uniform in +-1/sqrt(fan_in); fan_in is the column count.
    Uniform,
    Zeros,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform => {
                let bound = 1.0 / (cols as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data,
            grad: vec![0.0; n],
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grad(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Restores values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(other.params.iter()) {
            debug_assert_eq!(a.name, b.name);
            a.data.copy_from_slice(&b.data);
        }
    }
}

const CONTAINER_MAGIC: &[u8; 8] = b"MAMDPS01";

/// Writes the store as a self-describing container: magic, JSON metadata
/// block, then per-array records of (name, shape, dtype, little-endian data).
pub fn write_param_container(
    w: &mut impl std::io::Write,
    ps: &ParamStore,
    meta: &serde_json::Value,
) -> std::io::Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;
    for p in ps.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.rows as u32).to_le_bytes())?;
        w.write_all(&(p.cols as u32).to_le_bytes())?;
        w.write_all(b"f8")?;
        for x in &p.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl std::io::Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Reads a container written by [`write_param_container`]. The returned
/// store has zeroed gradient slots.
pub fn read_param_container(
    r: &mut impl std::io::Read,
) -> std::io::Result<(ParamStore, serde_json::Value)> {
    use std::io::{Error, ErrorKind};
    let bad = |m: &str| Error::new(ErrorKind::InvalidData, m.to_string());
    let magic = read_exact(r, 8)?;
    if magic != CONTAINER_MAGIC {
        return Err(bad("bad container magic"));
    }
    let meta_len = u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value =
        serde_json::from_slice(&read_exact(r, meta_len)?).map_err(|e| bad(&e.to_string()))?;
    let n_params = u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()) as usize;
    let mut ps = ParamStore::new();
    for _ in 0..n_params {
        let name_len = u16::from_le_bytes(read_exact(r, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(r, name_len)?).map_err(|_| bad("bad name"))?;
        let rows = u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()) as usize;
        let dtype = read_exact(r, 2)?;
        if dtype != b"f8" {
            return Err(bad("unsupported dtype"));
        }
        let raw = read_exact(r, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = ParamId(ps.params.len());
        ps.params.push(Param {
            name: name.clone(),
            rows,
            cols,
            data,
            grad: vec![0.0; rows * cols],
        });
        ps.index.insert(name, id);
    }
    Ok((ps, meta))
}

/// Hex SHA-256 over the store's names, shapes and raw values.
pub fn param_fingerprint(ps: &ParamStore) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in ps.iter() {
        h.update(p.name.as_bytes());
        h.update((p.rows as u64).to_le_bytes());
        h.update((p.cols as u64).to_le_bytes());
        for x in &p.data {
            h.update(x.to_le_bytes());
        }
    }
    let mut s = String::new();
    use std::fmt::Write as _;
    for b in h.finalize() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Central finite difference of `f` with respect to one parameter
/// coordinate. Restores the parameter before returning.
pub fn finite_difference(
    ps: &mut ParamStore,
    id: ParamId,
    coord: usize,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = ps.get(id).data[coord];
    ps.get_mut(id).data[coord] = orig + eps;
    let plus = f(ps);
    ps.get_mut(id).data[coord] = orig - eps;
    let minus = f(ps);
    ps.get_mut(id).data[coord] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Relative error with an absolute floor: gradients below ~1e-6 are compared
/// absolutely, since central differences bottom out near 1e-11 in double
/// precision and a pure ratio would amplify that noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}
