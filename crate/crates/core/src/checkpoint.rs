//! Binary checkpoint format with a JSON sidecar holding the training config.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSCK" | version u8 (1 = f32 payloads, 2 = f64 payloads) | step u32 | tensor count u32
//! per tensor: name length u16 | name bytes | 4 x u32 extents (B, C, H, W) | payload
//! then the first-moment section and the second-moment section, same layout
//! ```
//!
//! The config is written next to the binary file as `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelParams, NamedTensor};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION_F32: u8 = 1;
pub const VERSION_F64: u8 = 2;

fn version_for<T: Scalar>() -> u8 {
    if T::BITS == 32 {
        VERSION_F32
    } else {
        VERSION_F64
    }
}

/// Everything needed to resume a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ModelParams<T>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

fn put_section<T: Scalar>(out: &mut Vec<u8>, names: &[&str], tensors: &[&Tensor<T>]) {
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let short = || Error::Truncated(format!("needed {n} bytes at offset {}", self.pos));
        let end = self.pos.checked_add(n).ok_or_else(short)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(short)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn section<T: Scalar>(&mut self, count: usize) -> Result<Vec<NamedTensor<T>>> {
        let width = (T::BITS / 8) as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::SizeMismatch("tensor name is not UTF-8".into()))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = self.u32()? as usize;
            }
            let shape = Shape::from_dims(dims);
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::SizeMismatch(format!("extents of `{name}` overflow")))?;
            let raw = self.take(n.saturating_mul(width))?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            out.push(NamedTensor {
                name,
                tensor: Tensor::from_vec(shape, data)?,
            });
        }
        Ok(out)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        Checkpoint {
            config: trainer.config.clone(),
            step: trainer.step,
            params: trainer.params.clone(),
            m: trainer.optimizer.m.clone(),
            v: trainer.optimizer.v.clone(),
        }
    }

    /// Binary payload without the config sidecar.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let step = u32::try_from(self.step)
            .map_err(|_| Error::Config(format!("step {} exceeds u32", self.step)))?;
        let names: Vec<&str> = self
            .params
            .entries
            .iter()
            .map(|e| e.name.as_str())
            .collect();
        let mut out =
            Vec::with_capacity(13 + 3 * self.params.scalar_count() * (T::BITS as usize / 8));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(version_for::<T>());
        out.extend_from_slice(&step.to_le_bytes());
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        let params: Vec<&Tensor<T>> = self.params.entries.iter().map(|e| &e.tensor).collect();
        put_section(&mut out, &names, &params);
        put_section(&mut out, &names, &self.m.iter().collect::<Vec<_>>());
        put_section(&mut out, &names, &self.v.iter().collect::<Vec<_>>());
        Ok(out)
    }

    /// Parses `bytes` and checks every tensor against `config.model`.
    pub fn decode(bytes: &[u8], config: TrainConfig) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                found: magic.try_into().expect("4 bytes"),
            });
        }
        let version = r.take(1)?[0];
        if version != VERSION_F32 && version != VERSION_F64 {
            return Err(Error::UnsupportedVersion(version));
        }
        if version != version_for::<T>() {
            return Err(Error::SizeMismatch(format!(
                "checkpoint version {version} holds {}-bit floats, requested {}-bit",
                if version == VERSION_F32 { 32 } else { 64 },
                T::BITS
            )));
        }
        let step = r.u32()? as u64;
        let count = r.u32()? as usize;
        let entries = r.section::<T>(count)?;
        let found: usize = entries.iter().map(|e| e.tensor.numel()).sum();
        let expected = crate::model::param_count(&config.model);
        if found != expected {
            return Err(Error::ParamCountMismatch { expected, found });
        }
        let params = ModelParams::from_entries(&config.model, entries)?;
        let m: Vec<Tensor<T>> = r
            .section::<T>(count)?
            .into_iter()
            .map(|e| e.tensor)
            .collect();
        let v: Vec<Tensor<T>> = r
            .section::<T>(count)?
            .into_iter()
            .map(|e| e.tensor)
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        // validates the moment shapes against the parameters
        Adam::from_state(config.adam(), step, m.clone(), v.clone(), &params)?;
        Ok(Checkpoint {
            config,
            step,
            params,
            m,
            v,
        })
    }

    /// Writes `path` and the config sidecar `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        Self::decode(&fs::read(path)?, config)
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        self.config.validate()?;
        let optimizer =
            Adam::from_state(self.config.adam(), self.step, self.m, self.v, &self.params)?;
        Ok(Trainer {
            config: self.config,
            params: self.params,
            optimizer,
            step: self.step,
        })
    }
}

/// `<path>.json`, the location of the config sidecar.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Precision recorded in a checkpoint header, in bits.
pub fn peek_precision(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 5 {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: *CHECKPOINT_MAGIC,
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    match bytes[4] {
        VERSION_F32 => Ok(32),
        VERSION_F64 => Ok(64),
        v => Err(Error::UnsupportedVersion(v)),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::from_trainer(self)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.into_trainer()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::StrongAugConfig;
    use crate::model::UNetConfig;
    use crate::phantom::{generate, PhantomConfig, PhantomSample};
    use crate::tensor::Image;
    use crate::trainer::{Mode, TrainData};

    fn cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: 10,
            batch_labeled: 2,
            batch_unlabeled: 2,
            seed: 3,
            model: UNetConfig {
                base_channels: 4,
                ..Default::default()
            },
            strong: StrongAugConfig::for_size(16, 16),
            ..Default::default()
        }
    }

    fn data() -> (Vec<PhantomSample>, Vec<Image>) {
        let s = generate(
            &PhantomConfig {
                size: 16,
                ..Default::default()
            },
            6,
        )
        .unwrap();
        (
            s[..3].to_vec(),
            s[3..].iter().map(|s| s.image.clone()).collect(),
        )
    }

    fn trained<T: Scalar>(mode: Mode, steps: u64) -> Trainer<T> {
        let (l, u) = data();
        let mut t = Trainer::<T>::new(cfg(mode)).unwrap();
        for _ in 0..steps {
            t.train_step(&TrainData {
                labeled: &l,
                unlabeled: &u,
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_precisions() {
        let t32 = trained::<f32>(Mode::SemiBce, 2);
        let c32 = t32.checkpoint();
        let bytes = c32.encode().unwrap();
        assert_eq!(&bytes[..5], b"SSCK\x01");
        assert_eq!(
            Checkpoint::<f32>::decode(&bytes, c32.config.clone()).unwrap(),
            c32
        );
        assert_eq!(
            Checkpoint::<f32>::decode(&bytes, c32.config.clone())
                .unwrap()
                .encode()
                .unwrap(),
            bytes
        );

        let c64 = trained::<f64>(Mode::WeakAug, 2).checkpoint();
        let bytes = c64.encode().unwrap();
        assert_eq!(bytes[4], VERSION_F64);
        assert_eq!(
            Checkpoint::<f64>::decode(&bytes, c64.config.clone()).unwrap(),
            c64
        );
        assert!(Checkpoint::<f32>::decode(&bytes, c64.config.clone()).is_err());
    }

    #[test]
    fn header_and_size_arithmetic() {
        let c = trained::<f32>(Mode::Baseline, 1).checkpoint();
        let bytes = c.encode().unwrap();
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        assert_eq!(
            u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize,
            c.params.len()
        );
        let names: usize = c.params.entries.iter().map(|e| 2 + e.name.len() + 16).sum();
        assert_eq!(bytes.len(), 13 + 3 * (names + 4 * c.params.scalar_count()));
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ssck");
        let c = trained::<f32>(Mode::StrongAug, 1).checkpoint();
        c.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), c);
        assert_eq!(peek_precision(&fs::read(&path).unwrap()).unwrap(), 32);
    }

    #[test]
    fn resume_continues_the_uninterrupted_trajectory() {
        let (l, u) = data();
        let d = TrainData {
            labeled: &l,
            unlabeled: &u,
        };
        for mode in [Mode::SemiThreshold, Mode::StrongAug] {
            let mut full = Trainer::<f64>::new(cfg(mode)).unwrap();
            let mut full_losses = Vec::new();
            for _ in 0..10 {
                full_losses.push(full.train_step(&d).unwrap());
            }
            let mut first = Trainer::<f64>::new(cfg(mode)).unwrap();
            let mut resumed_losses = Vec::new();
            for _ in 0..4 {
                resumed_losses.push(first.train_step(&d).unwrap());
            }
            let bytes = first.checkpoint().encode().unwrap();
            drop(first);
            let mut resumed =
                Trainer::from_checkpoint(Checkpoint::<f64>::decode(&bytes, cfg(mode)).unwrap())
                    .unwrap();
            for _ in 4..10 {
                resumed_losses.push(resumed.train_step(&d).unwrap());
            }
            assert_eq!(full_losses, resumed_losses);
            assert_eq!(full, resumed);
        }
    }

    #[test]
    fn mismatched_param_count_is_rejected() {
        let c = trained::<f32>(Mode::Baseline, 1).checkpoint();
        let bytes = c.encode().unwrap();
        let mut wider = c.config.clone();
        wider.model.base_channels = 8;
        assert!(matches!(
            Checkpoint::<f32>::decode(&bytes, wider),
            Err(Error::ParamCountMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_headers_are_diagnosed() {
        let c = trained::<f32>(Mode::Baseline, 1).checkpoint();
        let bytes = c.encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::<f32>::decode(&bad, c.config.clone()),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::<f32>::decode(&bad, c.config.clone()),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1], c.config.clone()),
            Err(Error::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::<f32>::decode(&long, c.config.clone()),
            Err(Error::SizeMismatch(_))
        ));
    }
}
