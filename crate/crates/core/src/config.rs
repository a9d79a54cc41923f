//! Experiment configuration: flat `key=value` lines with section prefixes.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors. [`ExperimentConfig::to_text`] writes every key in a fixed order,
//! and parsing that text yields the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::channel::{ChannelDims, ScenarioProfile, SplitCounts};
use crate::error::{Error, Result};
use crate::models::{CompressionConfig, CompressionRatio, Strategy};
use crate::trainer::TrainConfig;

/// Per-phase training settings plus the per-scenario sample count it uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    /// Samples taken from the head of each scenario's training split.
    pub train: usize,
    pub train_cfg: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioSource {
    Presets(Vec<String>),
    Files(Vec<PathBuf>),
}

impl ScenarioSource {
    pub fn len(&self) -> usize {
        match self {
            ScenarioSource::Presets(v) => v.len(),
            ScenarioSource::Files(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub jobs: usize,
    pub dims: ChannelDims,
    pub counts: SplitCounts,
    pub scenarios: ScenarioSource,
    pub crs: Vec<CompressionRatio>,
    pub strategies: Vec<Strategy>,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub single: PhaseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phase = |train, lr, epochs| PhaseConfig {
            train,
            train_cfg: TrainConfig {
                learning_rate: lr,
                batch_size: 200,
                epochs,
                seed: 0,
                shuffle: true,
                val_every: 0,
            },
        };
        ExperimentConfig {
            seed: 1,
            jobs: 1,
            dims: ChannelDims::default(),
            counts: SplitCounts::new(8000, 1000, 5000),
            scenarios: ScenarioSource::Presets(vec!["cdlA-like".into(), "cdlB-like".into()]),
            crs: vec![CompressionRatio::new(1, 4).expect("1/4")],
            strategies: vec![Strategy::SingleTask, Strategy::MultiTask],
            pretrain: phase(4000, 1e-3, 1000),
            finetune: phase(2000, 1e-4, 500),
            single: phase(8000, 1e-3, 1000),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        let mut cfg = ExperimentConfig::default();
        let mut datasets = None;
        let mut presets = None;
        for (key, value) in &seen {
            let (k, v) = (key.as_str(), value.as_str());
            let phase = match k.split_once('.') {
                Some(("pretrain", _)) => Some(&mut cfg.pretrain),
                Some(("multitask", _)) => Some(&mut cfg.pretrain),
                Some(("finetune", _)) => Some(&mut cfg.finetune),
                Some(("single", _)) => Some(&mut cfg.single),
                _ => None,
            };
            if let Some(phase) = phase {
                let (section, field) = k.split_once('.').unwrap_or_default();
                match (section, field) {
                    ("multitask", "train") | ("finetune", "train") | ("single", "train") => phase.train = parse(k, v)?,
                    ("multitask", _) | ("pretrain", "train") => {
                        return Err(Error::Config(format!("unknown key `{k}`")));
                    }
                    (_, "lr") => phase.train_cfg.learning_rate = parse(k, v)?,
                    (_, "batch") => phase.train_cfg.batch_size = parse(k, v)?,
                    (_, "epochs") => phase.train_cfg.epochs = parse(k, v)?,
                    (_, "shuffle") => phase.train_cfg.shuffle = parse_bool(k, v)?,
                    (_, "val_every") => phase.train_cfg.val_every = parse(k, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{k}`"))),
                }
                continue;
            }
            match k {
                "seed" => cfg.seed = parse(k, v)?,
                "jobs" => cfg.jobs = parse(k, v)?,
                "data.rows" => cfg.dims.rows = parse(k, v)?,
                "data.antennas" => cfg.dims.antennas = parse(k, v)?,
                "data.subcarriers" => cfg.dims.subcarriers = parse(k, v)?,
                "data.spacing" => cfg.dims.spacing = parse(k, v)?,
                "data.train" => cfg.counts.train = parse(k, v)?,
                "data.val" => cfg.counts.val = parse(k, v)?,
                "data.test" => cfg.counts.test = parse(k, v)?,
                "experiment.scenarios" => presets = Some(list(v)),
                "experiment.datasets" => datasets = Some(list(v).into_iter().map(PathBuf::from).collect()),
                "experiment.crs" => cfg.crs = list(v).iter().map(|s| parse(k, s)).collect::<Result<_>>()?,
                "experiment.strategies" => {
                    cfg.strategies = list(v).iter().map(|s| s.parse()).collect::<Result<_>>()?;
                }
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        cfg.scenarios = match (presets, datasets) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either experiment.scenarios or experiment.datasets, not both".into(),
                ))
            }
            (None, Some(files)) => ScenarioSource::Files(files),
            (Some(names), None) => ScenarioSource::Presets(names),
            (None, None) => cfg.scenarios,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks every constraint before any work starts.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.rows == 0 || d.antennas == 0 || d.subcarriers == 0 {
            return Err(Error::Config("data.rows, data.antennas and data.subcarriers must be >= 1".into()));
        }
        if d.rows > d.subcarriers {
            return Err(Error::Config(format!(
                "data.rows ({}) exceeds data.subcarriers ({})",
                d.rows, d.subcarriers
            )));
        }
        if !(d.spacing.is_finite() && d.spacing > 0.0) {
            return Err(Error::Config("data.spacing must be > 0".into()));
        }
        let c = &self.counts;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(Error::Config("data.train, data.val and data.test must be >= 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let ScenarioSource::Presets(names) = &self.scenarios {
            for name in names {
                ScenarioProfile::preset(name, *d)?;
                if !seen.insert(name) {
                    return Err(Error::Config(format!("scenario `{name}` listed twice")));
                }
            }
        }
        for cr in &self.crs {
            CompressionConfig::new(d.rows, d.antennas, *cr)?;
        }
        for (name, phase) in [("pretrain", &self.pretrain), ("finetune", &self.finetune), ("single", &self.single)] {
            phase.train_cfg.validate(name)?;
        }
        let uses = |s| self.strategies.contains(&s);
        if uses(Strategy::MultiTask) {
            let (e1, e2) = (self.pretrain.train_cfg.epochs, self.finetune.train_cfg.epochs);
            if e2 >= e1 {
                return Err(Error::Config(format!(
                    "finetune.epochs ({e2}) must be smaller than pretrain.epochs ({e1})"
                )));
            }
            if self.finetune.train == 0 || self.finetune.train > self.pretrain.train {
                return Err(Error::Config(format!(
                    "finetune.train ({}) must be in 1..=multitask.train ({})",
                    self.finetune.train, self.pretrain.train
                )));
            }
            if self.pretrain.train > c.train {
                return Err(Error::Config(format!(
                    "multitask.train ({}) exceeds data.train ({})",
                    self.pretrain.train, c.train
                )));
            }
        }
        if uses(Strategy::SingleTask) && (self.single.train == 0 || self.single.train > c.train) {
            return Err(Error::Config(format!(
                "single.train ({}) must be in 1..=data.train ({})",
                self.single.train, c.train
            )));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let join = |items: Vec<String>| items.join(",");
        let mut s = String::new();
        let d = &self.dims;
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "jobs={}", self.jobs);
        let _ = writeln!(s, "data.rows={}", d.rows);
        let _ = writeln!(s, "data.antennas={}", d.antennas);
        let _ = writeln!(s, "data.subcarriers={}", d.subcarriers);
        let _ = writeln!(s, "data.spacing={:?}", d.spacing);
        let _ = writeln!(s, "data.train={}", self.counts.train);
        let _ = writeln!(s, "data.val={}", self.counts.val);
        let _ = writeln!(s, "data.test={}", self.counts.test);
        match &self.scenarios {
            ScenarioSource::Presets(names) => {
                let _ = writeln!(s, "experiment.scenarios={}", names.join(","));
            }
            ScenarioSource::Files(paths) => {
                let _ = writeln!(
                    s,
                    "experiment.datasets={}",
                    join(paths.iter().map(|p| p.display().to_string()).collect())
                );
            }
        }
        let _ = writeln!(s, "experiment.crs={}", join(self.crs.iter().map(|c| c.to_string()).collect()));
        let _ = writeln!(
            s,
            "experiment.strategies={}",
            join(self.strategies.iter().map(|x| x.to_string()).collect())
        );
        for (section, phase) in [("pretrain", &self.pretrain), ("finetune", &self.finetune), ("single", &self.single)] {
            let t = &phase.train_cfg;
            let train_key = if section == "pretrain" { "multitask" } else { section };
            let _ = writeln!(s, "{train_key}.train={}", phase.train);
            let _ = writeln!(s, "{section}.lr={:?}", t.learning_rate);
            let _ = writeln!(s, "{section}.batch={}", t.batch_size);
            let _ = writeln!(s, "{section}.epochs={}", t.epochs);
            let _ = writeln!(s, "{section}.shuffle={}", t.shuffle);
            let _ = writeln!(s, "{section}.val_every={}", t.val_every);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
# two scenarios
seed = 7
data.rows=16
data.antennas=16
data.subcarriers=16
data.train=600
data.val=50
data.test=50
experiment.scenarios=cdlD-like, cdlE-like
experiment.crs=1/4,1/8
multitask.train=300
finetune.train=150
pretrain.epochs=4
finetune.epochs=2
finetune.lr=1e-4
single.train=600
single.epochs=3
";

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::parse(TOY).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.crs.len(), 2);
        assert_eq!(cfg.finetune.train_cfg.learning_rate, 1e-4);
        assert_eq!(cfg.pretrain.train, 300);
        let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(ExperimentConfig::parse("bogus=1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("pretrain.train=1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed=1\nseed=2"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed"), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_ordering_is_enforced() {
        let text = format!("{TOY}\n").replace("finetune.epochs=2", "finetune.epochs=4");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("smaller than pretrain.epochs"), "{err}");
        // Single-task only: the constraint does not apply.
        let single = text + "experiment.strategies=single-task\n";
        assert!(ExperimentConfig::parse(&single).is_ok());
    }

    #[test]
    fn subset_sizes_are_enforced() {
        let text = TOY.replace("finetune.train=150", "finetune.train=301");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = TOY.replace("multitask.train=300", "multitask.train=601");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn unknown_scenario_and_cr_fail_validation() {
        assert!(ExperimentConfig::parse(&TOY.replace("cdlE-like", "cdlZ")).is_err());
        assert!(ExperimentConfig::parse(&TOY.replace("1/4,1/8", "1/4,1/2048")).is_err());
        assert!(ExperimentConfig::parse(&TOY.replace("cdlE-like", "cdlD-like")).is_err());
    }
}
