//! Little-endian binary model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes  "OSDACKPT"
//! version      u32      currently 1
//! layer_count  u32
//! input_dim    u32
//! per layer:   out_dim u32, activation u8 (0 = identity, 1 = tanh)
//! n_shared     u32
//! n_private    u32
//! param_count  u64
//! params       param_count x f64
//! ```
//!
//! Parameters follow [`Model::parameters`] order: every layer's row-major
//! weights then biases, then the classifier columns one class at a time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, Classifier, Dense, FeatureExtractor, Model};

pub const MAGIC: &[u8; 8] = b"OSDACKPT";
pub const VERSION: u32 = 1;

/// Upper bound on any single dimension; rejects absurd headers before allocating.
const MAX_DIM: u32 = 1 << 16;

pub fn encode(model: &Model) -> Vec<u8> {
    let layers = model.extractor.layers();
    let params = model.parameters();
    let mut out = Vec::with_capacity(40 + layers.len() * 5 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.input_dim() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.push(match layer.activation() {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        });
    }
    out.extend_from_slice(&(model.classifier.n_shared() as u32).to_le_bytes());
    out.extend_from_slice(&(model.classifier.n_private() as u32).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32(what)?;
        if v > MAX_DIM {
            return Err(Error::Checkpoint(format!("{what} {v} exceeds limit {MAX_DIM}")));
        }
        Ok(v as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let layer_count = r.dim("layer count")?;
    if layer_count == 0 || layer_count > 64 {
        return Err(Error::Checkpoint(format!("layer count {layer_count} out of range")));
    }
    let input_dim = r.dim("input dim")?;
    let mut shapes = Vec::with_capacity(layer_count);
    let mut prev = input_dim;
    for _ in 0..layer_count {
        let out_dim = r.dim("layer dim")?;
        let activation = match r.take(1, "activation")?[0] {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        };
        shapes.push((prev, out_dim, activation));
        prev = out_dim;
    }
    let dim = prev;
    let n_shared = r.dim("n_shared")?;
    let n_private = r.dim("n_private")?;
    let expected: u64 = shapes
        .iter()
        .map(|&(i, o, _)| (i as u64) * (o as u64) + o as u64)
        .sum::<u64>()
        + (dim as u64) * ((n_shared + n_private) as u64);
    let count = r.u64("parameter count")?;
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, shapes imply {expected}"
        )));
    }
    if (r.bytes.len() - r.pos) as u64 != count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            count * 8,
            r.bytes.len() - r.pos
        )));
    }
    let mut next_f64s = |n: usize| -> Result<Vec<f64>> {
        let raw = r.take(n * 8, "parameters")?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(vals)
    };
    let mut layers = Vec::with_capacity(layer_count);
    for (i, o, act) in shapes {
        let w = next_f64s(i * o)?;
        let b = next_f64s(o)?;
        layers.push(Dense::new(i, o, w, b, act)?);
    }
    let columns = next_f64s(dim * (n_shared + n_private))?;
    let classifier =
        Classifier::from_columns(dim, n_shared, n_private, columns).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Model::new(FeatureExtractor::new(layers)?, classifier)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Stream};

    fn model() -> Model {
        let mut rng = Rng::new(11, Stream::WeightInit);
        let ex = FeatureExtractor::mlp(5, &[7, 6], 4, &mut rng);
        let cls = Classifier::random(4, 3, &mut rng).extend(2, &mut rng).unwrap();
        Model::new(ex, cls).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode(&nan).is_err());
        assert!(decode(&[]).is_err());
    }
}
