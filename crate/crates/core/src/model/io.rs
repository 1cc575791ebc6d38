//! Binary parameter-set layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "RGPS"
//! version    u32      1
//! input_dim  u32
//! classes    u32
//! n_layers   u32
//! widths     u32 * n_layers
//! payload    f64 * total_count
//!            per layer: weights (width x fan_in, row-major), scale, shift,
//!                       running_mean, running_var
//!            then readout (classes x last_width, row-major)
//! ```
//!
//! The JSON manifest carries the same shape table plus a SHA-256 of the
//! binary blob.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, NormLayer, ParameterSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const PARAMS_MAGIC: &[u8; 4] = b"RGPS";
const VERSION: u32 = 1;
const MAX_DIM: usize = 1 << 16;
const MAX_LAYERS: usize = 64;
const MAX_PARAMS: usize = 1 << 26;

pub fn encode_params(p: &ParameterSet) -> Vec<u8> {
    let arch = p.arch();
    let mut out = Vec::with_capacity(24 + 4 * arch.hidden.len() + 8 * p.total_count());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.classes as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for w in &arch.hidden {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    let mut put = |vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for layer in &p.layers {
        put(layer.weights.as_slice());
        put(&layer.scale);
        put(&layer.shift);
        put(&layer.running_mean);
        put(&layer.running_var);
    }
    put(p.output.as_slice());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()?;
        if v == 0 || v > MAX_DIM {
            return Err(Error::Format(format!("{what} = {v} out of range")));
        }
        Ok(v)
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != PARAMS_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let input_dim = r.dim("input_dim")?;
    let classes = r.dim("classes")?;
    let n_layers = r.u32()?;
    if n_layers == 0 || n_layers > MAX_LAYERS {
        return Err(Error::Format(format!("layer count {n_layers} out of range")));
    }
    let hidden = (0..n_layers)
        .map(|_| r.dim("width"))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        input_dim,
        hidden,
        classes,
    };
    let mut expected = 0usize;
    for (l, w) in arch.hidden.iter().enumerate() {
        expected += w * (arch.fan_in(l) + 4);
    }
    expected += classes * arch.hidden.last().unwrap();
    if expected > MAX_PARAMS || bytes.len() - r.pos != expected * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape table requires {}",
            bytes.len() - r.pos,
            expected.saturating_mul(8)
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (l, &w) in arch.hidden.iter().enumerate() {
        let fan_in = arch.fan_in(l);
        let weights = Matrix::from_vec(w, fan_in, r.f64s(w * fan_in)?)?;
        layers.push(NormLayer {
            weights,
            scale: r.f64s(w)?,
            shift: r.f64s(w)?,
            running_mean: r.f64s(w)?,
            running_var: r.f64s(w)?,
        });
    }
    let last = *arch.hidden.last().unwrap();
    let output = Matrix::from_vec(classes, last, r.f64s(classes * last)?)?;
    ParameterSet::from_parts(arch, layers, output).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsManifest {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub adaptable_count: usize,
    pub total_count: usize,
    pub byte_len: usize,
    pub sha256: String,
}

pub fn params_manifest(p: &ParameterSet) -> ParamsManifest {
    let bytes = encode_params(p);
    let arch = p.arch();
    ParamsManifest {
        format: "relgate-params".into(),
        version: VERSION,
        input_dim: arch.input_dim,
        hidden: arch.hidden.clone(),
        classes: arch.classes,
        adaptable_count: arch.adaptable_count(),
        total_count: p.total_count(),
        byte_len: bytes.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    }
}

impl ParamsManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    /// Checks a binary blob against this manifest.
    pub fn verify(&self, bytes: &[u8]) -> Result<ParameterSet> {
        if hex::encode(Sha256::digest(bytes)) != self.sha256 {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let p = decode_params(bytes)?;
        if p.arch().hidden != self.hidden || p.arch().input_dim != self.input_dim || p.arch().classes != self.classes {
            return Err(Error::Format("manifest shape does not match payload".into()));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn sample(seed: u64) -> ParameterSet {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![4, 2],
            classes: 3,
        };
        let mut rng = SeededRng::new(seed);
        let mut p = ParameterSet::random(&arch, &mut rng).unwrap();
        p.layers[1].shift[0] = -0.0;
        p.layers[0].scale[1] = f64::MIN_POSITIVE;
        p
    }

    #[test]
    fn manifest_verifies_blob() {
        let p = sample(1);
        let bytes = encode_params(&p);
        let m = params_manifest(&p);
        let m2 = ParamsManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.verify(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(m2.verify(&bad).is_err());
    }

    #[test]
    fn rejects_malformed() {
        let bytes = encode_params(&sample(2));
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_params(&[]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad).is_err());
        let mut huge = bytes.clone();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_params(&huge).is_err());
        // Non-positive running variance.
        let mut p = sample(3);
        p.layers[0].running_var[0] = 0.0;
        assert!(decode_params(&encode_params(&p)).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>()) {
            let p = sample(seed);
            let bytes = encode_params(&p);
            let q = decode_params(&bytes).unwrap();
            prop_assert_eq!(encode_params(&q), bytes);
        }

        #[test]
        fn decode_never_panics(data in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_params(&data);
        }
    }
}
