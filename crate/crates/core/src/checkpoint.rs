//! TAPC checkpoint container.
//!
//! ```text
//! magic    4 bytes "TAPC"
//! version  u16     1
//! config   u8 head kind (0 = tap, 1 = linear)
//!          u32 dim, u32 heads, u32 mlp_hidden, u32 proj_dim, u64 seed
//!          (heads / mlp_hidden / proj_dim are 0 for the linear head)
//! count    u32     number of parameter tensors
//! tensor*  u16 name length, name (UTF-8), u8 rank, u32 dims[rank],
//!          f64 data (product of dims values)
//! optim    u8      0 = absent, 1 = present; when present:
//!          u64 step, then one tensor "m/<name>" and one "v/<name>" per
//!          parameter tensor, in parameter order, same encoding as above
//! ```
//!
//! Integers and floats are little-endian. Tensor order and names are fixed by
//! the head, so encoding is canonical: decode followed by encode reproduces
//! the input bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LinearProbe, Model, Parameters, TapConfig, TapParams};
use crate::optimizer::OptimizerState;

pub const MAGIC: [u8; 4] = *b"TAPC";
pub const VERSION: u16 = 1;

const KIND_TAP: u8 = 0;
const KIND_LINEAR: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Option<OptimizerState>) -> Self {
        Checkpoint { model, optimizer }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        match &self.model {
            Model::Tap(p) => {
                let c = &p.config;
                out.push(KIND_TAP);
                for v in [c.dim, c.heads, c.mlp_hidden, c.proj_dim] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
                out.extend_from_slice(&c.seed.to_le_bytes());
            }
            Model::Linear(p) => {
                out.push(KIND_LINEAR);
                for v in [p.classifier.input_dim(), 0, 0, 0] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
                out.extend_from_slice(&p.seed.to_le_bytes());
            }
        }
        let tensors = match &self.model {
            Model::Tap(p) => p.tensors(),
            Model::Linear(p) => p.tensors(),
        };
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            put_tensor(&mut out, t.name, &t.shape, t.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for (i, t) in tensors.iter().enumerate() {
                    put_tensor(&mut out, &format!("m/{}", t.name), &t.shape, &state.m[i]);
                    put_tensor(&mut out, &format!("v/{}", t.name), &t.shape, &state.v[i]);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "header")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = cur.u16("header")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let kind = cur.u8("config")?;
        let dim = cur.u32("config")? as usize;
        let heads = cur.u32("config")? as usize;
        let mlp_hidden = cur.u32("config")? as usize;
        let proj_dim = cur.u32("config")? as usize;
        let seed = cur.u64("config")?;

        let mut model = match kind {
            KIND_TAP => Model::Tap(TapParams::zeros(TapConfig {
                dim,
                heads,
                mlp_hidden,
                proj_dim,
                seed,
            })?),
            KIND_LINEAR => {
                if dim == 0 {
                    return Err(Error::InvalidConfig("linear probe of dimension 0".into()));
                }
                let mut p = LinearProbe::zeros(dim);
                p.seed = seed;
                Model::Linear(p)
            }
            other => return Err(Error::InvalidConfig(format!("unknown head kind {other}"))),
        };

        let shapes: Vec<(&'static str, Vec<usize>)> = match &model {
            Model::Tap(p) => p.tensors(),
            Model::Linear(p) => p.tensors(),
        }
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();

        let count = cur.u32("tensor count")? as usize;
        if count != shapes.len() {
            return Err(Error::dim("checkpoint tensor count", shapes.len(), count));
        }
        {
            let targets = match &mut model {
                Model::Tap(p) => p.tensors_mut(),
                Model::Linear(p) => p.tensors_mut(),
            };
            for ((name, shape), (_, dst)) in shapes.iter().zip(targets) {
                cur.tensor_into(name, shape, dst)?;
            }
        }

        let optimizer = match cur.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = cur.u64("optimizer step")?;
                let mut m = Vec::with_capacity(shapes.len());
                let mut v = Vec::with_capacity(shapes.len());
                for (name, shape) in &shapes {
                    let len = shape.iter().product();
                    let mut mi = vec![0.0; len];
                    let mut vi = vec![0.0; len];
                    cur.tensor_into(&format!("m/{name}"), shape, &mut mi)?;
                    cur.tensor_into(&format!("v/{name}"), shape, &mut vi)?;
                    m.push(mi);
                    v.push(vi);
                }
                Some(OptimizerState { step, m, v })
            }
            other => return Err(Error::InvalidConfig(format!("bad optimizer flag {other}"))),
        };
        if cur.pos != bytes.len() {
            return Err(Error::TrailingBytes {
                count: bytes.len() - cur.pos,
            });
        }
        Ok(Checkpoint { model, optimizer })
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self
            .pos
            .checked_add(len)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| {
                if what == "header" {
                    Error::TruncatedHeader
                } else {
                    Error::TruncatedTensor { name: what.to_string() }
                }
            })?;
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor_into(&mut self, name: &str, shape: &[usize], dst: &mut [f64]) -> Result<()> {
        let name_len = self.u16(name)? as usize;
        let found = String::from_utf8_lossy(self.take(name_len, name)?).into_owned();
        if found != name {
            return Err(Error::TensorName {
                expected: name.to_string(),
                found,
            });
        }
        let rank = self.u8(name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(name)? as usize);
        }
        if dims != shape {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: dims,
            });
        }
        let raw = self.take(dst.len() * 8, name)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if let Some(i) = dst.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("tensor {name} element {i}")));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TapConfig {
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
            proj_dim: 4,
            seed: 5,
        };
        let params = TapParams::init(cfg).unwrap();
        let mut state = OptimizerState::new(&params);
        state.step = 3;
        state.m[0][1] = 0.25;
        state.v[4][0] = 1e-300;
        Checkpoint::new(Model::Tap(params), Some(state))
    }

    #[test]
    fn round_trip_and_canonical() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);

        let lin = Checkpoint::new(Model::Linear(LinearProbe::init(6, 9).unwrap()), None);
        let bytes = lin.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), lin);
    }

    #[test]
    fn edited_dim_header_is_shape_mismatch() {
        let mut bytes = sample().encode();
        // dim lives right after magic, version and kind.
        bytes[7..11].copy_from_slice(&10u32.to_le_bytes());
        let err = Checkpoint::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn version_and_truncation() {
        let mut bytes = sample().encode();
        let full = bytes.clone();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let cut = &full[..full.len() - 3];
        assert!(matches!(Checkpoint::decode(cut), Err(Error::TruncatedTensor { .. })));
        assert!(matches!(Checkpoint::decode(&full[..3]), Err(Error::TruncatedHeader)));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::BadMagic { .. })));
    }
}
