//! Scenario datasets and the `CSID` file format.
//!
//! File layout (little-endian): magic `CSID`, version u32 = 1, scenario id
//! (u16 length + UTF-8), master seed u64, counts u32 x 3 (train, val, test),
//! dims u32 x 3 (2, N_c, N_t), then the train, val and test samples as raw
//! f32 in row-major order.

use std::fs;
use std::path::Path;

use super::{generate_channel, sample_seed, ScenarioProfile};
use crate::bytes::{dim_u32, put_f32s, put_string, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pipeline::{energy_ratio, truncate, ComplexMatrix, DftPair, Normalizer};

const MAGIC: &[u8; 4] = b"CSID";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        SplitCounts { train, val, test }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// What generation observed, for the command-line summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationSummary {
    /// Normalization scale S fitted on the train split.
    pub scale: f64,
    /// Val/test components clamped into `[0, 1]`.
    pub clamped: usize,
    /// Truncation energy ratio over every generated sample.
    pub mean_energy_ratio: f64,
    pub min_energy_ratio: f64,
}

/// Normalized angular-delay samples `[count, 2, N_c, N_t]` per split.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDataset {
    pub id: String,
    pub master_seed: u64,
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    /// Fitted on generation. A dataset read from disk carries unit scale:
    /// the file stores only normalized samples, and NMSE does not depend on S.
    pub normalizer: Normalizer,
    /// Present when generated in this process.
    pub profile: Option<ScenarioProfile>,
    pub summary: Option<GenerationSummary>,
}

impl ScenarioDataset {
    pub fn split(&self, split: Split) -> &Tensor {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts::new(self.train.batch(), self.val.batch(), self.test.batch())
    }

    /// Copy whose training split keeps only its first `k` samples.
    pub fn take_train(&self, k: usize) -> Result<ScenarioDataset> {
        if k == 0 || k > self.train.batch() {
            return Err(Error::Config(format!(
                "`{}`: cannot take {k} of {} training samples",
                self.id,
                self.train.batch()
            )));
        }
        Ok(ScenarioDataset {
            train: self.train.head(k),
            ..self.clone()
        })
    }

    /// Per-sample dims `[2, N_c, N_t]`.
    pub fn sample_dims(&self) -> &[usize] {
        &self.train.dims()[1..]
    }

    /// Serialized `CSID` bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = self.sample_dims();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_string(&mut out, &self.id)?;
        put_u64(&mut out, self.master_seed);
        for split in Split::ALL {
            put_u32(&mut out, dim_u32(self.split(split).batch(), "sample count")?);
        }
        for &d in dims {
            put_u32(&mut out, dim_u32(d, "dimension")?);
        }
        for split in Split::ALL {
            put_f32s(&mut out, self.split(split).data());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<ScenarioDataset> {
        let mut r = Reader::new(buf);
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected CSID".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let id = r.string()?;
        let master_seed = r.u64()?;
        let counts_at = r.pos();
        let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Format {
                offset: counts_at + 4 * i,
                message: format!("{} split is empty", Split::ALL[i].name()),
            });
        }
        let dims_at = r.pos();
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims[0] != 2 {
            return Err(Error::Format {
                offset: dims_at,
                message: format!("channel count {} must be 2", dims[0]),
            });
        }
        let sample = dims[1..]
            .iter()
            .try_fold(2usize, |acc, &d| acc.checked_mul(d).filter(|_| d > 0))
            .ok_or_else(|| Error::Format {
                offset: dims_at,
                message: format!("dims {dims:?} are zero or overflow"),
            })?;
        let total = counts
            .iter()
            .try_fold(0usize, |acc, &c| c.checked_mul(sample).and_then(|n| acc.checked_add(n)))
            .ok_or_else(|| Error::Format {
                offset: counts_at,
                message: "payload size overflows".into(),
            })?;
        let expected = total
            .checked_mul(4)
            .and_then(|n| n.checked_add(r.pos()))
            .ok_or_else(|| Error::Format {
                offset: counts_at,
                message: "payload size overflows".into(),
            })?;
        if buf.len() < expected {
            return Err(Error::Length {
                expected,
                found: buf.len(),
            });
        }
        if buf.len() > expected {
            return Err(Error::Format {
                offset: expected,
                message: format!("{} trailing bytes", buf.len() - expected),
            });
        }
        let mut splits = Vec::with_capacity(3);
        for &count in &counts {
            let data = r.f32s(count * sample)?;
            splits.push(Tensor::new(vec![count, dims[0], dims[1], dims[2]], data)?);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(ScenarioDataset {
            id,
            master_seed,
            train,
            val,
            test,
            normalizer: Normalizer::new(1.0)?,
            profile: None,
            summary: None,
        })
    }
}

/// Generates, transforms, truncates and normalizes every split. The
/// normalization scale is fitted on the train split only.
pub fn generate_dataset(profile: &ScenarioProfile, counts: SplitCounts, master_seed: u64) -> Result<ScenarioDataset> {
    profile.validate()?;
    if let Some(split) = Split::ALL.into_iter().find(|&s| counts.get(s) == 0) {
        return Err(Error::Config(format!("{} count must be >= 1", split.name())));
    }
    let dims = profile.dims;
    let dft = DftPair::new(dims.subcarriers, dims.antennas);
    let mut truncated: Vec<Vec<ComplexMatrix>> = Vec::with_capacity(3);
    let (mut ratio_sum, mut ratio_min) = (0.0f64, f64::INFINITY);
    for split in Split::ALL {
        let mut items = Vec::with_capacity(counts.get(split));
        for index in 0..counts.get(split) {
            let seed = sample_seed(master_seed, &profile.id, split, index as u64);
            let h = dft.to_angular_delay(&generate_channel(profile, seed)?)?;
            let ratio = energy_ratio(&h, dims.rows)?;
            ratio_sum += ratio;
            ratio_min = ratio_min.min(ratio);
            items.push(truncate(&h, dims.rows)?);
        }
        truncated.push(items);
    }
    let normalizer = Normalizer::fit(&truncated[0])?;
    let mut clamped = 0;
    let mut tensors = Vec::with_capacity(3);
    for items in &truncated {
        let mut data = Vec::with_capacity(items.len() * 2 * dims.rows * dims.antennas);
        for h in items {
            let csi = normalizer.normalize(h);
            clamped += csi.clamped;
            data.extend_from_slice(csi.tensor.data());
        }
        tensors.push(Tensor::new(vec![items.len(), 2, dims.rows, dims.antennas], data)?);
    }
    let test = tensors.pop().expect("three splits");
    let val = tensors.pop().expect("three splits");
    let train = tensors.pop().expect("three splits");
    Ok(ScenarioDataset {
        id: profile.id.clone(),
        master_seed,
        train,
        val,
        test,
        normalizer,
        profile: Some(profile.clone()),
        summary: Some(GenerationSummary {
            scale: normalizer.scale(),
            clamped,
            mean_energy_ratio: ratio_sum / counts.total() as f64,
            min_energy_ratio: ratio_min,
        }),
    })
}

pub fn save_dataset(dataset: &ScenarioDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ScenarioDataset> {
    ScenarioDataset::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelDims;

    fn dims() -> ChannelDims {
        ChannelDims {
            antennas: 8,
            rows: 8,
            ..ChannelDims::default()
        }
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn counts_and_shapes() {
        let p = ScenarioProfile::preset("cdlA-like", dims()).unwrap();
        let ds = generate_dataset(&p, SplitCounts::new(2, 1, 1), 5).unwrap();
        assert_eq!(ds.counts(), SplitCounts::new(2, 1, 1));
        assert_eq!(ds.train.dims(), &[2, 2, 8, 8]);
        assert!(ds.train.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            generate_dataset(&p, SplitCounts::new(0, 1, 1), 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scenarios_with_shared_seed_differ() {
        let a = generate_dataset(&ScenarioProfile::preset("cdlA-like", dims()).unwrap(), SplitCounts::new(3, 1, 1), 7).unwrap();
        let b = generate_dataset(&ScenarioProfile::preset("cdlB-like", dims()).unwrap(), SplitCounts::new(3, 1, 1), 7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_ne!(a.train.sample(i), b.train.sample(j));
            }
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let p = ScenarioProfile::preset("cdlD-like", dims()).unwrap();
        let ds = generate_dataset(&p, SplitCounts::new(3, 1, 2), 9).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = ScenarioDataset::from_bytes(&bytes).unwrap();
        for s in Split::ALL {
            assert_eq!(bits(back.split(s)), bits(ds.split(s)));
        }
        assert_eq!(back.id, ds.id);
        assert_eq!(back.master_seed, 9);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let header = 4 + 4 + 2 + ds.id.len() + 8 + 12 + 12;
        assert!(matches!(
            ScenarioDataset::from_bytes(&bytes[..header]),
            Err(Error::Length { .. })
        ));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(ScenarioDataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
