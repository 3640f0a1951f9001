//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "GDHZ" | version u32
//! config: u32 length + JSON bytes
//! params: u32 count, then per parameter
//!     u32 name length + UTF-8 name | 4 x u32 dims | f32 data
//! optimizer: f32 beta1, beta2, eps | u64 t | u32 count, then per entry
//!     u32 name length + name | u32 length | m f32 data | v f32 data
//! counters: u64 step | u64 epoch | u64 seed
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{validate_params, GridConfig, ModelParams};
use crate::tensor::{AdamConfig, AdamState, Moments, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDHZ";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GridConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    /// Optimizer steps completed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// Fresh checkpoint for inference-only parameters.
    pub fn from_params(config: GridConfig, params: ModelParams) -> Self {
        Checkpoint {
            config,
            params,
            optimizer: AdamState::default(),
            step: 0,
            epoch: 0,
            seed: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        validate_params(&self.config, &self.params)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_bytes(&mut out, &json);

        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            for d in t.shape().dims() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }

        let opt = &self.optimizer;
        for v in [opt.config.beta1, opt.config.beta2, opt.config.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u64(&mut out, opt.t);
        put_u32(&mut out, opt.moments.len() as u32);
        for (name, mom) in &opt.moments {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, mom.m.len() as u32);
            put_f32s(&mut out, &mom.m);
            put_f32s(&mut out, &mom.v);
        }

        put_u64(&mut out, self.step);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.seed);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let json = r.bytes()?;
        let config: GridConfig = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        config.validate()?;

        let mut params = ModelParams::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dims = [
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            ];
            let shape = Shape::from(dims);
            let data = r.f32s(shape.numel())?;
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        validate_params(&config, &params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match config: {e}")))?;

        let adam = AdamConfig {
            beta1: r.f32()?,
            beta2: r.f32()?,
            eps: r.f32()?,
        };
        let mut optimizer = AdamState::new(adam);
        optimizer.t = r.u64()?;
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let len = r.u32()? as usize;
            match params.get(&name) {
                Some(p) if p.len() == len => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for unknown or mis-sized `{name}`"
                    )))
                }
            }
            let m = r.f32s(len)?;
            let v = r.f32s(len)?;
            optimizer.moments.insert(name, Moments { m, v });
        }

        let step = r.u64()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            step,
            epoch,
            seed,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build;

    fn sample() -> Checkpoint {
        let config = GridConfig::default()
            .with_grid(2, 2)
            .with_base_channels(4)
            .with_growth(4)
            .with_rdb_layers(2);
        let params = build(&config, 11).unwrap();
        let mut ckpt = Checkpoint::from_params(config, params);
        let grads = ckpt
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.map(|x| x * 0.5 + 0.1)))
            .collect();
        ckpt.optimizer.step(&mut ckpt.params, &grads, 1e-3).unwrap();
        ckpt.step = 1;
        ckpt.epoch = 1;
        ckpt.seed = 42;
        ckpt
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut newer = bytes.clone();
        newer[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&newer),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut longer = bytes;
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shapes_are_checked_against_the_config() {
        let mut ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        // Swap in a config that needs different shapes.
        ckpt.config.growth_rate = 8;
        let json_old = serde_json::to_vec(&sample().config).unwrap();
        let json_new = serde_json::to_vec(&ckpt.config).unwrap();
        assert_eq!(json_old.len(), json_new.len());
        let at = bytes
            .windows(json_old.len())
            .position(|w| w == json_old.as_slice())
            .unwrap();
        let mut bad = bytes.clone();
        bad[at..at + json_new.len()].copy_from_slice(&json_new);
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
