//! Checkpoint files.
//!
//! Layout (little-endian): magic `CSIM`, version u32 = 1, N_c u32, N_t u32,
//! CR numerator u32, CR denominator u32, seed u64, epoch u32, tensor count
//! u32, then per tensor: name (u16 length + UTF-8), partition tag u8
//! (0 encoder, 1 decoder), rank u8, dims u32 x rank, f32 data.

use std::fs;
use std::path::Path;

use super::{CompressionConfig, CompressionRatio, FeedbackModel};
use crate::bytes::{dim_u32, put_f32s, put_string, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::nn::{ParamEntry, ParamSet, Partition, SpecKind, Tensor};

const MAGIC: &[u8; 4] = b"CSIM";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config: CompressionConfig,
    pub seed: u64,
    /// Epochs completed when the checkpoint was written.
    pub epoch: u32,
}

/// A full model or one partition of it, with training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamSet) -> Self {
        Checkpoint { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.meta.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, dim_u32(cfg.rows, "N_c")?);
        put_u32(&mut out, dim_u32(cfg.antennas, "N_t")?);
        put_u32(&mut out, cfg.ratio.num());
        put_u32(&mut out, cfg.ratio.den());
        put_u64(&mut out, self.meta.seed);
        put_u32(&mut out, self.meta.epoch);
        put_u32(&mut out, dim_u32(self.params.len(), "tensor count")?);
        for (name, entry) in self.params.iter() {
            put_string(&mut out, name)?;
            out.push(entry.partition.tag());
            let dims = entry.tensor.dims();
            let rank = u8::try_from(dims.len())
                .map_err(|_| Error::Config(format!("`{name}` has rank {} > 255", dims.len())))?;
            out.push(rank);
            for &d in dims {
                put_u32(&mut out, dim_u32(d, "dimension")?);
            }
            put_f32s(&mut out, entry.tensor.data());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(buf);
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected CSIM".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let at = r.pos();
        let rows = r.u32()? as usize;
        let antennas = r.u32()? as usize;
        let (num, den) = (r.u32()?, r.u32()?);
        let ratio = CompressionRatio::new(num, den).map_err(|e| Error::Format {
            offset: at + 8,
            message: e.to_string(),
        })?;
        let config = CompressionConfig::new(rows, antennas, ratio).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })?;
        let seed = r.u64()?;
        let epoch = r.u32()?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for index in 0..count {
            if r.remaining() == 0 {
                return Err(Error::Integrity(format!(
                    "header declares {count} tensors, file holds {index}"
                )));
            }
            let at = r.pos();
            let name = r.string()?;
            let kind = SpecKind::from_name(&name).ok_or_else(|| Error::Format {
                offset: at,
                message: format!("unrecognised parameter name `{name}`"),
            })?;
            let at = r.pos();
            let partition = Partition::from_tag(r.u8()?).ok_or_else(|| Error::Format {
                offset: at,
                message: "partition tag must be 0 or 1".into(),
            })?;
            let at = r.pos();
            let rank = r.u8()? as usize;
            if rank == 0 {
                return Err(Error::Format {
                    offset: at,
                    message: format!("`{name}` has rank 0"),
                });
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let at = r.pos();
                let d = r.u32()? as usize;
                numel = numel.checked_mul(d).filter(|_| d > 0).ok_or_else(|| Error::Format {
                    offset: at,
                    message: format!("`{name}` has a zero or overflowing dimension"),
                })?;
                dims.push(d);
            }
            let data = r.f32s(numel)?;
            let layer = name.rsplit_once('.').map(|(l, _)| l.to_string()).unwrap_or_default();
            let entry = ParamEntry {
                tensor: Tensor::new(dims, data)?,
                layer,
                partition,
                kind,
                frozen: false,
            };
            params.insert(name, entry)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Integrity(format!(
                "{} bytes follow the {count} declared tensors",
                r.remaining()
            )));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta { config, seed, epoch },
            params,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

impl FeedbackModel {
    /// Checkpoint of the selected partition (`None` for every tensor).
    pub fn checkpoint(&self, partition: Option<Partition>, seed: u64, epoch: u32) -> Checkpoint {
        let params = match partition {
            Some(p) => self.params().partition(p),
            None => self.params().clone(),
        };
        Checkpoint::new(
            CheckpointMeta {
                config: *self.config(),
                seed,
                epoch,
            },
            params,
        )
    }

    /// Loads the checkpoint's tensors into this model. The compression
    /// config, names, dims and partition tags must all match; on any
    /// mismatch the model is left untouched.
    pub fn attach(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let (have, want) = (checkpoint.meta.config, *self.config());
        if have != want {
            return Err(Error::Integrity(format!(
                "checkpoint is for {}x{} at CR {}, model is {}x{} at CR {}",
                have.rows, have.antennas, have.ratio, want.rows, want.antennas, want.ratio
            )));
        }
        self.load_params(&checkpoint.params)
    }
}
