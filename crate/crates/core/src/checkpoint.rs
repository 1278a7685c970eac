//! Versioned binary checkpoints.
//!
//! ```text
//! magic    8 bytes  "REIDCKPT"
//! version  u32 LE
//! length   u64 LE   payload byte count
//! payload  length bytes
//! digest   32 bytes SHA-256 of the payload
//! ```
//!
//! The payload is a sequence of little-endian records: strings and arrays
//! are prefixed with a u64 count. In order: model config (key = value
//! text), attribute schema text, identity count, parameters (name, rank,
//! dims, values), buffers (name, values), an optional optimizer (flag,
//! hyperparameters, velocities), trainer state (key = value text) and the
//! training log text.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{KeyValues, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::SgdState;
use crate::params::ParamStore;
use crate::schema::AttributeSchema;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"REIDCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<SgdState>,
    /// Trainer progress and settings; empty for a bare model.
    pub state: KeyValues,
    pub log: String,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            state: KeyValues::default(),
            log: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let m = &self.model;
        w.str(&m.cfg.to_kv().render());
        w.str(&m.schema.render());
        w.u64(m.num_ids as u64);
        let params: Vec<(&str, &Tensor)> = m.store.params().collect();
        w.u64(params.len() as u64);
        for (name, t) in params {
            w.str(name);
            w.u64(t.shape().len() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        let buffers: Vec<(&str, &[f64])> = m.store.buffers().collect();
        w.u64(buffers.len() as u64);
        for (name, b) in buffers {
            w.str(name);
            w.u64(b.len() as u64);
            w.f64s(b);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.f64s(&[o.learning_rate, o.momentum, o.weight_decay]);
                w.u8(o.nesterov as u8);
                let vel: Vec<(&str, &[f64])> = o.velocities().collect();
                w.u64(vel.len() as u64);
                for (name, v) in vel {
                    w.str(name);
                    w.u64(v.len() as u64);
                    w.f64s(v);
                }
            }
        }
        w.str(&self.state.render());
        w.str(&self.log);

        let payload = w.0;
        let digest: [u8; DIGEST_LEN] = Sha256::digest(&payload).into();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Integrity(format!("checkpoint truncated: {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let expected = HEADER_LEN.checked_add(len).and_then(|n| n.checked_add(DIGEST_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::Integrity(format!(
                "checkpoint truncated or padded: header announces {len} payload bytes, file has {}",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + len];
        let digest: [u8; DIGEST_LEN] = Sha256::digest(payload).into();
        if digest[..] != bytes[HEADER_LEN + len..] {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }

        let mut r = Reader { buf: payload, pos: 0 };
        let cfg = ModelConfig::from_kv(&KeyValues::parse(&r.str()?, "checkpoint config")?)?;
        let schema = AttributeSchema::parse(&r.str()?, "checkpoint schema")?;
        let num_ids = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            store.insert(name, Tensor::new(&shape, data)?);
        }
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let n = r.u64()? as usize;
            store.insert_buffer(name, r.f64s(n)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let h = r.f64s(3)?;
                let mut o = SgdState::new(h[0], h[1], h[2], r.u8()? != 0);
                for _ in 0..r.u64()? {
                    let name = r.str()?;
                    let n = r.u64()? as usize;
                    o.set_velocity(name, r.f64s(n)?);
                }
                Some(o)
            }
            f => return Err(Error::Integrity(format!("bad optimizer flag {f}"))),
        };
        let state = KeyValues::parse(&r.str()?, "checkpoint state")?;
        let log = r.str()?;
        if r.pos != payload.len() {
            return Err(Error::Integrity("trailing bytes in checkpoint payload".into()));
        }
        let model = Model::from_parts(cfg, schema, num_ids, store)?;
        Ok(Checkpoint {
            model,
            optimizer,
            state,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parameter names whose shapes differ between `model` and what `cfg`,
/// `schema` and `num_ids` would build, as an [`Error::Incompatible`].
pub fn check_compatible(model: &Model, cfg: &ModelConfig, schema: &AttributeSchema, num_ids: usize) -> Result<()> {
    let reference = Model::new(cfg.clone(), schema.clone(), num_ids, 0)?;
    let diff = reference.store.shape_diff(&model.store);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(diff))
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint payload ends early".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("non-UTF-8 string in checkpoint".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("array length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::schema::OrderPolicy;

    fn model() -> Model {
        let mut m = Model::new(ModelConfig::tiny(), AttributeSchema::pedestrian(OrderPolicy::TopDown), 4, 9).unwrap();
        if let Some(b) = m.store.buffer_mut("stem.s0.bn.running_mean") {
            b[0] = 0.125;
        }
        m.set_mode(Mode::Eval);
        m
    }

    fn images(n: usize) -> Tensor {
        let data = (0..n * 3 * 16 * 12).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
        Tensor::new(&[n, 3, 16, 12], data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        let mut opt = SgdState::new(0.01, 0.9, 5e-4, true);
        opt.set_velocity("att.lstm.weight", vec![1.0 / 3.0; 3]);
        let mut state = KeyValues::default();
        state.set("stage", "2");
        let ck = Checkpoint {
            model: m.clone(),
            optimizer: Some(opt),
            state,
            log: "stage\tepoch\n".into(),
        };
        let mut back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let x = images(3);
        assert_eq!(m.extract_descriptors(&x).unwrap(), back.model.extract_descriptors(&x).unwrap());
    }

    #[test]
    fn version_and_integrity_errors() {
        let bytes = Checkpoint::from_model(model()).to_bytes();
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Integrity(_))));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn mismatched_config_lists_parameters() {
        let m = model();
        let mut cfg = ModelConfig::tiny();
        cfg.hidden_dim = 7;
        let err = check_compatible(&m, &cfg, &m.schema, 4).unwrap_err();
        match err {
            Error::Incompatible(names) => {
                assert!(names.iter().any(|n| n.contains("att.lstm.weight")), "{names:?}");
                assert!(names.iter().all(|n| !n.starts_with("stem.")), "{names:?}");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(check_compatible(&m, &ModelConfig::tiny(), &m.schema, 4).is_ok());
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_model(model());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
