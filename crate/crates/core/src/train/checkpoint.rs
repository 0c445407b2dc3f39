//! `SNDF` checkpoint files.
//!
//! ```text
//! "SNDF" | version u32 = 1 | payload length u64 | payload | CRC32(payload) u32
//!
//! payload:
//!   config echo     u32 length + UTF-8 `key=value` lines
//!   parameters      u32 count, then per tensor:
//!                     u32 name length, name, u32 rank, rank × u64 dims, f32 data
//!   adam            u64 t, u32 count, then per tensor: u32 name length, name,
//!                     u64 element count, f32 first moments, f32 second moments
//!   step            u64
//!   rng             u64 seed, u64 position
//! ```
//!
//! All integers and floats are little-endian. Tensors follow parameter-store order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::adam::AdamState;

pub const MAGIC: &[u8; 4] = b"SNDF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Where the keyed data stream resumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    /// Index of the next training step to draw crops for.
    pub position: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: AdamState,
    pub step: u64,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, d: &[f32]) {
        for v in d {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Cursor over the payload; offsets in errors are absolute file offsets.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: (HEADER_LEN + self.pos) as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("payload ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt {
            offset: (HEADER_LEN + at) as u64,
            reason: format!("{what} is not UTF-8"),
        })
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.corrupt(format!("{what} length overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Writer(Vec::new());
        p.bytes(self.model.config.to_text().as_bytes());
        p.u32(self.model.params.len() as u32);
        for (name, t) in self.model.params.iter() {
            p.bytes(name.as_bytes());
            p.u32(t.rank() as u32);
            for &d in t.shape() {
                p.u64(d as u64);
            }
            p.floats(t.data());
        }
        p.u64(self.adam.t);
        p.u32(self.adam.m.len() as u32);
        for ((name, m), (_, v)) in self.adam.m.iter().zip(self.adam.v.iter()) {
            p.bytes(name.as_bytes());
            p.u64(m.numel() as u64);
            p.floats(m.data());
            p.floats(v.data());
        }
        p.u64(self.step);
        p.u64(self.rng.seed);
        p.u64(self.rng.position);

        let payload = p.0;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    /// Decodes and validates a checkpoint. With `expected`, the stored model
    /// configuration must match it field for field.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an SNDF checkpoint (bad magic)".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt {
                offset: bytes.len() as u64,
                reason: "file ends inside the header".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let need = (HEADER_LEN as u64).checked_add(declared).and_then(|n| n.checked_add(4));
        match need {
            Some(n) if bytes.len() as u64 >= n => {
                if bytes.len() as u64 > n {
                    return Err(Error::Corrupt {
                        offset: n,
                        reason: format!("{} trailing bytes after the checksum", bytes.len() as u64 - n),
                    });
                }
            }
            _ => {
                return Err(Error::Corrupt {
                    offset: bytes.len() as u64,
                    reason: format!("truncated: header declares a {declared}-byte payload"),
                })
            }
        }
        let end = HEADER_LEN + declared as usize;
        let payload = &bytes[HEADER_LEN..end];
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let echo = r.string("config echo")?;
        let config = ModelConfig::from_text(&echo)?;
        if let Some(exp) = expected {
            if let Some((field, ours, theirs)) = exp.first_difference(&config) {
                return Err(Error::ConfigMismatch {
                    field,
                    expected: ours,
                    found: theirs,
                });
            }
        }
        config.validate()?;

        let mut params = ParamStore::new();
        let n = r.u32("parameter count")?;
        for _ in 0..n {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.corrupt(format!("`{name}` has implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.corrupt(format!("`{name}` dims overflow")))?;
            let data = r.floats(numel, "tensor data")?;
            let t = Tensor::new(&dims, data).map_err(|e| r.corrupt(e.to_string()))?;
            params.insert(name, t).map_err(|e| r.corrupt(e.to_string()))?;
        }

        // The stored tensors must be exactly what this config builds.
        let reference = Model::<f32>::build(&config, 0)?;
        let layout = |s: &ParamStore<f32>| -> Vec<(String, Vec<usize>)> {
            s.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect()
        };
        if layout(&reference.params) != layout(&params) {
            return Err(Error::Format(
                "stored parameter names/shapes do not match the echoed config".into(),
            ));
        }

        let t = r.u64("adam step")?;
        let count = r.u32("adam tensor count")?;
        if count as usize != params.len() {
            return Err(r.corrupt(format!("optimizer holds {count} tensors, model has {}", params.len())));
        }
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (pname, p) in params.iter() {
            let name = r.string("moment name")?;
            if name != pname {
                return Err(r.corrupt(format!("moment `{name}` where `{pname}` was expected")));
            }
            let numel = r.u64("moment length")? as usize;
            if numel != p.numel() {
                return Err(r.corrupt(format!("moment `{name}` has {numel} values")));
            }
            let md = r.floats(numel, "first moments")?;
            let vd = r.floats(numel, "second moments")?;
            m.insert(pname, Tensor::new(p.shape(), md)?)?;
            v.insert(pname, Tensor::new(p.shape(), vd)?)?;
        }
        let step = r.u64("step")?;
        let seed = r.u64("rng seed")?;
        let position = r.u64("rng position")?;
        if r.pos != payload.len() {
            return Err(r.corrupt("unread bytes at the end of the payload"));
        }
        Ok(Checkpoint {
            model: Model { config, params },
            adam: AdamState { m, v, t },
            step,
            rng: RngState { seed, position },
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionKind;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            base_channels: 4,
            stages: 1,
            ..ModelConfig::toy()
        };
        let model = Model::<f32>::build_with(&cfg, 5, false).unwrap();
        let mut adam = AdamState::new(&model.params);
        adam.t = 3;
        for (_, t) in adam.m.iter_mut() {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = i as f32 * 1e-3);
        }
        Checkpoint {
            model,
            adam,
            step: 3,
            rng: RngState { seed: 9, position: 3 },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Some(&c.model.config)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn error_classes() {
        let c = sample();
        let bytes = c.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, None), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, None),
            Err(Error::UnsupportedVersion(2))
        ));

        let cut = &bytes[..bytes.len() - 10];
        match Checkpoint::from_bytes(cut, None) {
            Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }

        let mut bad = bytes.clone();
        bad[HEADER_LEN + 40] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, None),
            Err(Error::Checksum { .. })
        ));

        let other = ModelConfig {
            fusion: FusionKind::Sk,
            ..c.model.config.clone()
        };
        match Checkpoint::from_bytes(&bytes, Some(&other)) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "fusion"),
            other => panic!("{other:?}"),
        }
    }
}
