//! Strategy × scenario × CR grid runner and report assembly.
//!
//! Work is split into independent units: one multi-task unit per CR
//! (pre-train, then fine-tune every scenario) and one single-task unit per
//! (CR, scenario). Each unit derives its seeds from the master seed and its
//! own label, so results do not depend on scheduling. With an output
//! directory every finished unit writes `cells/<unit>.csv`; the report is
//! assembled from those rows by key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{combine_datasets, evaluate, finetune, pretrain, train_single_task, EpochLog, TrainConfig};
use crate::channel::{generate_dataset, load_dataset, save_dataset, ScenarioDataset, ScenarioProfile};
use crate::config::{ExperimentConfig, ScenarioSource};
use crate::error::{Error, Result};
use crate::models::{
    build_model, count_params, exact_reduction_percent, save_checkpoint, ue_storage, CompressionConfig,
    CompressionRatio, PartitionSelector, Strategy,
};
use crate::nn::{Partition, Tensor};

/// Strategy label of rows holding the pre-trained (not fine-tuned) model.
pub const GENERAL_ROW: &str = "multi-task-general";

const CSV_HEADER: [&str; 9] = [
    "strategy",
    "scenario",
    "cr_num",
    "cr_den",
    "nmse_db",
    "params_ue",
    "train_samples",
    "seconds",
    "seed",
];

/// SplitMix64 of the master seed combined with an FNV-1a hash of `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    /// `single-task`, `multi-task` or [`GENERAL_ROW`].
    pub strategy: String,
    pub scenario: String,
    pub cr: CompressionRatio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportCell {
    pub key: CellKey,
    pub nmse_db: f64,
    /// Encoder parameters one UE stores for this cell's model.
    pub params_ue: u64,
    /// Distinct training samples this cell contributes.
    pub train_samples: u64,
    /// Training-loop seconds of the phase that produced the cell.
    pub seconds: f64,
    /// Seed of that phase.
    pub seed: u64,
}

impl ReportCell {
    fn csv_record(&self) -> [String; 9] {
        [
            self.key.strategy.clone(),
            self.key.scenario.clone(),
            self.key.cr.num().to_string(),
            self.key.cr.den().to_string(),
            format!("{:.2}", self.nmse_db),
            self.params_ue.to_string(),
            self.train_samples.to_string(),
            format!("{:.3}", self.seconds),
            self.seed.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |i: usize| Error::Format {
            offset: 0,
            message: format!("column `{}` has value `{}`", CSV_HEADER[i], field(i)),
        };
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected {} columns, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let num: u32 = field(2).parse().map_err(|_| bad(2))?;
        let den: u32 = field(3).parse().map_err(|_| bad(3))?;
        Ok(ReportCell {
            key: CellKey {
                strategy: field(0).to_string(),
                scenario: field(1).to_string(),
                cr: CompressionRatio::new(num, den).map_err(|_| bad(3))?,
            },
            nmse_db: field(4).parse().map_err(|_| bad(4))?,
            params_ue: field(5).parse().map_err(|_| bad(5))?,
            train_samples: field(6).parse().map_err(|_| bad(6))?,
            seconds: field(7).parse().map_err(|_| bad(7))?,
            seed: field(8).parse().map_err(|_| bad(8))?,
        })
    }
}

fn write_csv(cells: &[&ReportCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for c in cells {
        w.write_record(c.csv_record())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Parses rows written by [`ExperimentReport::to_csv`]; the header must match.
pub fn parse_csv(text: &str) -> Result<Vec<ReportCell>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format {
            offset: 0,
            message: format!("unexpected CSV header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    r.records().map(|rec| ReportCell::from_record(&rec?)).collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Scenario ids in configuration order.
    pub scenarios: Vec<String>,
    pub cells: BTreeMap<CellKey, ReportCell>,
    /// Units that failed, with their error message.
    pub failures: Vec<(String, String)>,
}

impl ExperimentReport {
    /// Every key the configured grid should produce.
    pub fn expected_keys(&self) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for &cr in &self.config.crs {
            for strategy in &self.config.strategies {
                let labels: &[&str] = match strategy {
                    Strategy::SingleTask => &["single-task"],
                    Strategy::MultiTask => &[GENERAL_ROW, "multi-task"],
                };
                for label in labels {
                    for s in &self.scenarios {
                        keys.push(CellKey {
                            strategy: label.to_string(),
                            scenario: s.clone(),
                            cr,
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn missing(&self) -> Vec<CellKey> {
        self.expected_keys()
            .into_iter()
            .filter(|k| !self.cells.contains_key(k))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }

    fn cell(&self, strategy: &str, scenario: &str, cr: CompressionRatio) -> Option<&ReportCell> {
        self.cells.get(&CellKey {
            strategy: strategy.to_string(),
            scenario: scenario.to_string(),
            cr,
        })
    }

    /// Total distinct training samples of a strategy at one CR, if complete.
    /// Multi-task counts each scenario's pre-training contribution once; the
    /// fine-tuning subsets add nothing.
    pub fn train_samples(&self, strategy: Strategy, cr: CompressionRatio) -> Option<u64> {
        let label = match strategy {
            Strategy::SingleTask => "single-task",
            Strategy::MultiTask => "multi-task",
        };
        self.scenarios
            .iter()
            .map(|s| self.cell(label, s, cr).map(|c| c.train_samples))
            .sum()
    }

    /// Total training seconds of a strategy at one CR, if complete.
    pub fn train_seconds(&self, strategy: Strategy, cr: CompressionRatio) -> Option<f64> {
        match strategy {
            Strategy::SingleTask => self
                .scenarios
                .iter()
                .map(|s| self.cell("single-task", s, cr).map(|c| c.seconds))
                .sum(),
            Strategy::MultiTask => {
                let pre = self.cell(GENERAL_ROW, self.scenarios.first()?, cr)?.seconds;
                let fine: Option<f64> = self
                    .scenarios
                    .iter()
                    .map(|s| self.cell("multi-task", s, cr).map(|c| c.seconds))
                    .sum();
                Some(pre + fine?)
            }
        }
    }

    /// Encoder parameters stored at the UE for all scenarios, if known.
    pub fn ue_params(&self, strategy: Strategy, cr: CompressionRatio) -> Option<u64> {
        let per_encoder = self
            .cells
            .values()
            .find(|c| c.key.cr == cr)
            .map(|c| c.params_ue)?;
        ue_storage(per_encoder, self.scenarios.len() as u64, strategy).ok()
    }

    /// Rows in grid order, one per present cell.
    pub fn to_csv(&self) -> Result<String> {
        let rows: Vec<&ReportCell> = self.expected_keys().iter().filter_map(|k| self.cells.get(k)).collect();
        write_csv(&rows)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.scenarios.iter().map(String::len).max().unwrap_or(8).max(8);
        let labels: Vec<&str> = self
            .config
            .strategies
            .iter()
            .flat_map(|st| match st {
                Strategy::SingleTask => vec!["single-task"],
                Strategy::MultiTask => vec![GENERAL_ROW, "multi-task"],
            })
            .collect();
        let _ = writeln!(s, "NMSE (dB)");
        for &cr in &self.config.crs {
            let _ = write!(s, "\nCR {cr:<w$}", w = width - 3);
            for l in &labels {
                let _ = write!(s, "  {l:>18}");
            }
            s.push('\n');
            for sc in &self.scenarios {
                let _ = write!(s, "{sc:<width$}");
                for l in &labels {
                    let v = self
                        .cell(l, sc, cr)
                        .map_or("MISSING".to_string(), |c| format!("{:.2}", c.nmse_db));
                    let _ = write!(s, "  {v:>18}");
                }
                s.push('\n');
            }
        }
        let both = self.config.strategies.contains(&Strategy::SingleTask)
            && self.config.strategies.contains(&Strategy::MultiTask);
        if !self.scenarios.is_empty() && !self.config.strategies.is_empty() {
            let _ = writeln!(s, "\nComplexity and training cost");
            for &cr in &self.config.crs {
                let _ = writeln!(
                    s,
                    "\nCR {cr:<12}  {:>12}  {:>16}  {:>17}",
                    "UE params", "training samples", "training time (s)"
                );
                let show = |v: Option<String>| v.unwrap_or_else(|| "MISSING".to_string());
                for st in &self.config.strategies {
                    let _ = writeln!(
                        s,
                        "{:<15}  {:>12}  {:>16}  {:>17}",
                        st.as_str(),
                        show(self.ue_params(*st, cr).map(|v| v.to_string())),
                        show(self.train_samples(*st, cr).map(|v| v.to_string())),
                        show(self.train_seconds(*st, cr).map(|v| format!("{v:.1}"))),
                    );
                }
                if both {
                    let pct = |single: Option<u64>, multi: Option<u64>| {
                        let (a, b) = (single?, multi?);
                        Some(match exact_reduction_percent(a, b) {
                            Some(p) => format!("{p}%"),
                            None => format!("{:.2}%", 100.0 * (1.0 - b as f64 / a as f64)),
                        })
                    };
                    let time = match (
                        self.train_seconds(Strategy::SingleTask, cr),
                        self.train_seconds(Strategy::MultiTask, cr),
                    ) {
                        (Some(a), Some(b)) if a > 0.0 => Some(format!("{:.1}%", 100.0 * (1.0 - b / a))),
                        _ => None,
                    };
                    let _ = writeln!(
                        s,
                        "{:<15}  {:>12}  {:>16}  {:>17}",
                        "reduction",
                        show(pct(
                            self.ue_params(Strategy::SingleTask, cr),
                            self.ue_params(Strategy::MultiTask, cr)
                        )),
                        show(pct(
                            self.train_samples(Strategy::SingleTask, cr),
                            self.train_samples(Strategy::MultiTask, cr)
                        )),
                        show(time),
                    );
                }
            }
        }
        let missing = self.missing();
        if !missing.is_empty() {
            let _ = writeln!(s, "\nMISSING {} of {} cells", missing.len(), self.expected_keys().len());
            for k in &missing {
                let _ = writeln!(s, "MISSING {} {} {}", k.strategy, k.scenario, k.cr);
            }
        }
        for (unit, err) in &self.failures {
            let _ = writeln!(s, "FAILED {unit}: {err}");
        }
        let _ = writeln!(s, "\nConfiguration\n\n{}", self.config.to_text());
        s
    }

    /// Writes `report.txt` and `results.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("report.txt"), self.to_text())?;
        fs::write(dir.join("results.csv"), self.to_csv()?)?;
        Ok(())
    }

    /// Reassembles a report from an experiment directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join("config.txt");
        if !config_path.is_file() {
            return Err(Error::Config(format!("{} is not an experiment directory", dir.display())));
        }
        let config = ExperimentConfig::load(&config_path)?;
        let scenarios = fs::read_to_string(dir.join("scenarios.txt"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().to_string())
            .collect();
        let mut cells = BTreeMap::new();
        let cell_dir = dir.join("cells");
        if cell_dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&cell_dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")) {
                for cell in parse_csv(&fs::read_to_string(f)?)? {
                    cells.insert(cell.key.clone(), cell);
                }
            }
        }
        Ok(ExperimentReport {
            config,
            scenarios,
            cells,
            failures: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Experiment directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent units; 0 means `config.jobs`.
    pub jobs: usize,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
enum Unit {
    Multi(CompressionRatio),
    Single(CompressionRatio, usize),
}

fn cr_tag(cr: CompressionRatio) -> String {
    format!("cr{}_{}", cr.num(), cr.den())
}

impl Unit {
    fn name(&self, scenarios: &[ScenarioDataset]) -> String {
        match self {
            Unit::Multi(cr) => format!("multi-{}", cr_tag(*cr)),
            Unit::Single(cr, i) => format!("single-{}-{}", cr_tag(*cr), scenarios[*i].id),
        }
    }
}

fn phase_cfg(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..*base }
}

fn log_trace(log: &mut String, phase: &str, trace: &[EpochLog]) {
    for e in trace {
        let val = e.val_loss.map_or("-".to_string(), |v| format!("{v:.6e}"));
        let _ = writeln!(log, "{phase} epoch={} loss={:.6e} val={val} seconds={:.3}", e.epoch, e.train_loss, e.seconds);
    }
}

struct UnitOutput {
    cells: Vec<ReportCell>,
    log: String,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a [ScenarioDataset],
    out: Option<&'a Path>,
}

impl Runner<'_> {
    fn model_cfg(&self, cr: CompressionRatio) -> Result<CompressionConfig> {
        let d = self.data[0].sample_dims();
        CompressionConfig::new(d[1], d[2], cr)
    }

    fn checkpoint_dir(&self, unit: &str) -> Result<Option<PathBuf>> {
        let Some(out) = self.out else { return Ok(None) };
        let dir = out.join("checkpoints").join(unit);
        fs::create_dir_all(&dir)?;
        Ok(Some(dir))
    }

    fn val(&self, phase: &TrainConfig, parts: &[&ScenarioDataset]) -> Result<Option<Tensor>> {
        if phase.val_every == 0 {
            return Ok(None);
        }
        let vals: Vec<Tensor> = parts.iter().map(|d| d.val.clone()).collect();
        Tensor::stack_batches(&vals).map(Some)
    }

    fn run(&self, unit: &Unit, name: &str) -> Result<UnitOutput> {
        let master = self.cfg.seed;
        let mut log = String::new();
        let mut cells = Vec::new();
        match *unit {
            Unit::Multi(cr) => {
                let tag = cr_tag(cr);
                let ckpt_dir = self.checkpoint_dir(name)?;
                let init_seed = derive_seed(master, &format!("multi/{tag}/init"));
                let model = build_model(&self.model_cfg(cr)?, init_seed)?;
                let params_ue = count_params(&model, PartitionSelector::Encoder) as u64;
                let small: Vec<ScenarioDataset> = self
                    .data
                    .iter()
                    .map(|d| d.take_train(self.cfg.pretrain.train))
                    .collect::<Result<_>>()?;
                let refs: Vec<&ScenarioDataset> = small.iter().collect();
                let combined = combine_datasets(&refs, derive_seed(master, &format!("multi/{tag}/combine")))?;
                let pre_seed = derive_seed(master, &format!("multi/{tag}/pretrain"));
                let pre_cfg = phase_cfg(&self.cfg.pretrain.train_cfg, pre_seed);
                let val = self.val(&pre_cfg, &refs)?;
                let pre = pretrain(&model, &combined, val.as_ref(), &pre_cfg)?;
                log_trace(&mut log, "pretrain", &pre.trace);
                let mut general = model.clone();
                general.load_params(&pre.params)?;
                if let Some(dir) = &ckpt_dir {
                    let ckpt = general.checkpoint(None, pre_seed, pre_cfg.epochs as u32);
                    save_checkpoint(&ckpt, dir.join("pretrained.ckpt"))?;
                }
                for (ds, small) in self.data.iter().zip(&small) {
                    let nmse = evaluate(&general, &ds.test, &ds.normalizer)?;
                    let _ = writeln!(log, "test model=general scenario={} nmse_db={:.4}", ds.id, nmse.db);
                    cells.push(ReportCell {
                        key: CellKey {
                            strategy: GENERAL_ROW.into(),
                            scenario: ds.id.clone(),
                            cr,
                        },
                        nmse_db: nmse.db,
                        params_ue,
                        train_samples: combined.len() as u64,
                        seconds: pre.seconds,
                        seed: pre_seed,
                    });
                    let subset = ds.train.head(self.cfg.finetune.train);
                    // The fine-tuning set must lie inside this scenario's pre-training contribution.
                    if subset.data() != &small.train.data()[..subset.numel()] {
                        return Err(Error::Integrity(format!("`{}`: fine-tuning set is not a pre-training subset", ds.id)));
                    }
                    let ft_seed = derive_seed(master, &format!("multi/{tag}/finetune/{}", ds.id));
                    let ft_cfg = phase_cfg(&self.cfg.finetune.train_cfg, ft_seed);
                    let val = self.val(&ft_cfg, &[ds])?;
                    let ft = finetune(&general, &subset, val.as_ref(), &ft_cfg)?;
                    log_trace(&mut log, &format!("finetune[{}]", ds.id), &ft.trace);
                    let tuned = general.with_decoder(&ft.params)?;
                    if let Some(dir) = &ckpt_dir {
                        let ckpt = tuned.checkpoint(Some(Partition::Decoder), ft_seed, ft_cfg.epochs as u32);
                        save_checkpoint(&ckpt, dir.join(format!("decoder-{}.ckpt", ds.id)))?;
                    }
                    let nmse = evaluate(&tuned, &ds.test, &ds.normalizer)?;
                    let _ = writeln!(log, "test model=finetuned scenario={} nmse_db={:.4}", ds.id, nmse.db);
                    cells.push(ReportCell {
                        key: CellKey {
                            strategy: Strategy::MultiTask.as_str().into(),
                            scenario: ds.id.clone(),
                            cr,
                        },
                        nmse_db: nmse.db,
                        params_ue,
                        train_samples: small.train.batch() as u64,
                        seconds: ft.seconds,
                        seed: ft_seed,
                    });
                }
            }
            Unit::Single(cr, i) => {
                let ds = &self.data[i];
                let tag = cr_tag(cr);
                let init_seed = derive_seed(master, &format!("single/{tag}/{}/init", ds.id));
                let model = build_model(&self.model_cfg(cr)?, init_seed)?;
                let seed = derive_seed(master, &format!("single/{tag}/{}/train", ds.id));
                let cfg = phase_cfg(&self.cfg.single.train_cfg, seed);
                let data = ds.take_train(self.cfg.single.train)?;
                let val = self.val(&cfg, &[ds])?;
                let run = train_single_task(&model, &data.train, val.as_ref(), &cfg)?;
                log_trace(&mut log, "single", &run.trace);
                let mut trained = model.clone();
                trained.load_params(&run.params)?;
                if let Some(dir) = self.checkpoint_dir(name)? {
                    save_checkpoint(&trained.checkpoint(None, seed, cfg.epochs as u32), dir.join("model.ckpt"))?;
                }
                let nmse = evaluate(&trained, &ds.test, &ds.normalizer)?;
                let _ = writeln!(log, "test model=single scenario={} nmse_db={:.4}", ds.id, nmse.db);
                cells.push(ReportCell {
                    key: CellKey {
                        strategy: Strategy::SingleTask.as_str().into(),
                        scenario: ds.id.clone(),
                        cr,
                    },
                    nmse_db: nmse.db,
                    params_ue: count_params(&trained, PartitionSelector::Encoder) as u64,
                    train_samples: data.train.batch() as u64,
                    seconds: run.seconds,
                    seed,
                });
            }
        }
        Ok(UnitOutput { cells, log })
    }
}

/// Generates or loads every scenario dataset named by the configuration.
pub fn resolve_datasets(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<ScenarioDataset>> {
    cfg.validate()?;
    let datasets: Vec<ScenarioDataset> = match &cfg.scenarios {
        ScenarioSource::Presets(names) => {
            let profiles: Vec<ScenarioProfile> = names
                .iter()
                .map(|n| ScenarioProfile::preset(n, cfg.dims))
                .collect::<Result<_>>()?;
            let mut out = Vec::with_capacity(profiles.len());
            for p in &profiles {
                let ds = generate_dataset(p, cfg.counts, cfg.seed)?;
                if let Some(dir) = out_dir {
                    let data_dir = dir.join("data");
                    fs::create_dir_all(&data_dir)?;
                    save_dataset(&ds, data_dir.join(format!("{}.csid", ds.id)))?;
                }
                out.push(ds);
            }
            out
        }
        ScenarioSource::Files(paths) => paths.iter().map(load_dataset).collect::<Result<_>>()?,
    };
    let want = [2, cfg.dims.rows, cfg.dims.antennas];
    let mut ids = BTreeSet::new();
    for ds in &datasets {
        if ds.sample_dims() != want {
            return Err(Error::Integrity(format!(
                "dataset `{}` has sample dims {:?}, configuration expects {:?}",
                ds.id,
                ds.sample_dims(),
                want
            )));
        }
        if ds.train.batch() < cfg.counts.train || ds.test.batch() == 0 {
            return Err(Error::Config(format!(
                "dataset `{}` has {} training samples, configuration needs {}",
                ds.id,
                ds.train.batch(),
                cfg.counts.train
            )));
        }
        if !ids.insert(ds.id.clone()) {
            return Err(Error::Config(format!("scenario `{}` appears twice", ds.id)));
        }
    }
    Ok(datasets)
}

/// Runs the configured grid. Per-unit failures are recorded in the report
/// and leave their cells missing; configuration and data errors abort
/// before any training.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = opts.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("cells"))?;
        fs::create_dir_all(dir.join("logs"))?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }
    let grid_empty = cfg.crs.is_empty() || cfg.strategies.is_empty() || cfg.scenarios.is_empty();
    let data = if grid_empty { Vec::new() } else { resolve_datasets(cfg, out)? };
    let scenarios: Vec<String> = data.iter().map(|d| d.id.clone()).collect();
    if let Some(dir) = out {
        let mut list = scenarios.join("\n");
        list.push('\n');
        fs::write(dir.join("scenarios.txt"), if scenarios.is_empty() { String::new() } else { list })?;
    }

    let mut units = Vec::new();
    for &cr in &cfg.crs {
        if cfg.strategies.contains(&Strategy::MultiTask) && !data.is_empty() {
            units.push(Unit::Multi(cr));
        }
        if cfg.strategies.contains(&Strategy::SingleTask) {
            units.extend((0..data.len()).map(|i| Unit::Single(cr, i)));
        }
    }
    let runner = Runner { cfg, data: &data, out };
    let names: Vec<String> = units.iter().map(|u| u.name(&data)).collect();
    let jobs = if opts.jobs == 0 { cfg.jobs } else { opts.jobs }.clamp(1, units.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<UnitOutput>>>> = Mutex::new((0..units.len()).map(|_| None).collect());

    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(unit) = units.get(i) else { break };
        if opts.verbose {
            eprintln!("[{}/{}] {} started", i + 1, units.len(), names[i]);
        }
        let result = runner.run(unit, &names[i]);
        if let (Some(dir), Ok(output)) = (out, &result) {
            let rows: Vec<&ReportCell> = output.cells.iter().collect();
            let written = write_csv(&rows)
                .and_then(|csv| Ok(fs::write(dir.join("cells").join(format!("{}.csv", names[i])), csv)?))
                .and_then(|_| Ok(fs::write(dir.join("logs").join(format!("{}.log", names[i])), &output.log)?));
            if let Err(e) = written {
                eprintln!("{}: cannot write results: {e}", names[i]);
            }
        }
        if opts.verbose {
            match &result {
                Ok(_) => eprintln!("[{}/{}] {} done", i + 1, units.len(), names[i]),
                Err(e) => eprintln!("[{}/{}] {} failed: {e}", i + 1, units.len(), names[i]),
            }
        }
        results.lock().expect("no worker panicked")[i] = Some(result);
    };
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }

    let mut report = ExperimentReport {
        config: cfg.clone(),
        scenarios,
        cells: BTreeMap::new(),
        failures: Vec::new(),
    };
    for (name, result) in names.iter().zip(results.into_inner().expect("no worker panicked")) {
        match result {
            Some(Ok(output)) => {
                for cell in output.cells {
                    report.cells.insert(cell.key.clone(), cell);
                }
            }
            Some(Err(e)) => report.failures.push((name.clone(), e.to_string())),
            None => report.failures.push((name.clone(), "not run".into())),
        }
    }
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
