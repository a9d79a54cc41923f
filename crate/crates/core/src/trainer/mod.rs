//! Pre-training on combined scenario data, fine-tuning with a frozen shared
//! encoder, the single-task baseline, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::ScenarioDataset;
use crate::error::{Error, Result};
use crate::models::FeedbackModel;
use crate::nn::{backward_pass, forward, loss_mse, AdamConfig, AdamState, ParamSet, Partition, Stack, Tensor};
use crate::pipeline::{nmse_normalized, Nmse, Normalizer};

mod experiment;

pub use experiment::{
    derive_seed, parse_csv, resolve_datasets, run_experiment, CellKey, ExperimentReport, ReportCell, RunOptions,
    GENERAL_ROW,
};

/// Samples per inference batch during evaluation and validation.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Validation loss is computed every this many epochs and after the
    /// last one; 0 disables it. Monitoring only.
    pub val_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, phase: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("{phase}.lr must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{phase}.batch must be >= 1")));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean minibatch loss.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Seconds since the start of the run.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub trace: Vec<EpochLog>,
    pub seconds: f64,
}

/// Train splits of several scenarios in one seeded shuffled order.
#[derive(Clone, Debug)]
pub struct CombinedDataset {
    pub samples: Tensor,
    /// Index into `provenance` for every sample.
    pub labels: Vec<usize>,
    /// (scenario id, sample count), in input order.
    pub provenance: Vec<(String, usize)>,
}

impl CombinedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn combine_datasets(datasets: &[&ScenarioDataset], seed: u64) -> Result<CombinedDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Config("no datasets to combine".into()))?;
    let dims = first.sample_dims().to_vec();
    let mut parts = Vec::with_capacity(datasets.len());
    let mut provenance = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if ds.sample_dims() != dims.as_slice() {
            return Err(Error::shape(
                "combine",
                format!("`{}` has dims {:?}, `{}` has {:?}", ds.id, ds.sample_dims(), first.id, dims),
            ));
        }
        parts.push(ds.train.clone());
        provenance.push((ds.id.clone(), ds.train.batch()));
    }
    let union = Tensor::stack_batches(&parts)?;
    let mut order: Vec<usize> = (0..union.batch()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let owner: Vec<usize> = provenance
        .iter()
        .enumerate()
        .flat_map(|(i, (_, n))| std::iter::repeat_n(i, *n))
        .collect();
    Ok(CombinedDataset {
        samples: union.gather(&order),
        labels: order.iter().map(|&i| owner[i]).collect(),
        provenance,
    })
}

/// Minibatch MSE/Adam over `data` for the trainable entries of `params`.
fn train_loop(stack: &Stack, mut params: ParamSet, data: &Tensor, val: Option<&Tensor>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate("train")?;
    let n = data.batch();
    if n == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let start = Instant::now();
    let mut adam = AdamState::new(&params, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.gather(chunk);
            let pass = backward_pass(stack, &params, &batch, &batch)?;
            adam.step(&mut params, &pass.grads)?;
            for (name, stat) in pass.running {
                params
                    .get_mut(&name)
                    .ok_or_else(|| Error::MissingParam(name.clone()))?
                    .tensor = stat;
            }
            total += pass.loss as f64 * chunk.len() as f64;
        }
        let monitor = cfg.val_every > 0 && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        let val_loss = match val {
            Some(v) if monitor => Some(inference_loss(stack, &params, v)?),
            _ => None,
        };
        trace.push(EpochLog {
            epoch,
            train_loss: total / n as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        params,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Inference-mode mean squared error, sample-weighted over chunks.
fn inference_loss(stack: &Stack, params: &ParamSet, data: &Tensor) -> Result<f64> {
    let mut total = 0.0f64;
    for start in (0..data.batch()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(data.batch())).collect();
        let batch = data.gather(&idx);
        let out = forward(stack, params, &batch)?;
        total += loss_mse(&out, &batch)? as f64 * idx.len() as f64;
    }
    Ok(total / data.batch() as f64)
}

fn check_dims(model: &FeedbackModel, data: &Tensor) -> Result<()> {
    let want = model.config().input_dims();
    if data.dims().len() != 4 || data.dims()[1..] != want {
        return Err(Error::shape(
            "data",
            format!("samples are {:?}, model expects [batch, {:?}]", &data.dims()[1..], want),
        ));
    }
    Ok(())
}

/// Trains every parameter of `model` on the combined small-size sets.
pub fn pretrain(model: &FeedbackModel, data: &CombinedDataset, val: Option<&Tensor>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Config("combined dataset is empty".into()));
    }
    check_dims(model, &data.samples)?;
    let mut params = model.params().clone();
    params.set_frozen(Partition::Encoder, false);
    params.set_frozen(Partition::Decoder, false);
    train_loop(model.autoencoder(), params, &data.samples, val, cfg)
}

/// Fine-tunes the decoder of a pre-trained model with the encoder frozen.
/// Returns the decoder parameters; the encoder is verified unchanged.
pub fn finetune(model: &FeedbackModel, data: &Tensor, val: Option<&Tensor>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dims(model, data)?;
    let before = model.encoder_params();
    let mut params = model.params().clone();
    params.set_frozen(Partition::Encoder, true);
    params.set_frozen(Partition::Decoder, false);
    let mut outcome = train_loop(model.autoencoder(), params, data, val, cfg)?;
    let mut after = outcome.params.partition(Partition::Encoder);
    after.set_frozen(Partition::Encoder, false);
    if !after.bit_equal(&before) {
        return Err(Error::Integrity("encoder changed during fine-tuning".into()));
    }
    let mut decoder = outcome.params.partition(Partition::Decoder);
    decoder.set_frozen(Partition::Decoder, false);
    outcome.params = decoder;
    Ok(outcome)
}

/// Trains a fresh model on one scenario's large-size set.
pub fn train_single_task(model: &FeedbackModel, data: &Tensor, val: Option<&Tensor>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dims(model, data)?;
    train_loop(model.autoencoder(), model.params().clone(), data, val, cfg)
}

/// NMSE of reconstructions produced by `reconstruct` over `test`, reduced in
/// sample order on denormalized matrices.
pub fn evaluate_with(
    test: &Tensor,
    normalizer: &Normalizer,
    mut reconstruct: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Nmse> {
    if test.dims().is_empty() || test.batch() == 0 {
        return Err(Error::Config("empty test set".into()));
    }
    let mut outputs = Vec::with_capacity(test.batch().div_ceil(EVAL_BATCH));
    for start in (0..test.batch()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(test.batch())).collect();
        outputs.push(reconstruct(&test.gather(&idx))?);
    }
    let estimate = Tensor::stack_batches(&outputs)?;
    nmse_normalized(normalizer, test, &estimate)
}

/// Inference-mode NMSE of `model` on a test split.
pub fn evaluate(model: &FeedbackModel, test: &Tensor, normalizer: &Normalizer) -> Result<Nmse> {
    check_dims(model, test)?;
    evaluate_with(test, normalizer, |batch| model.reconstruct(batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, ChannelDims, ScenarioProfile, SplitCounts};
    use crate::models::{build_model, CompressionConfig, CompressionRatio};
    use crate::pipeline::NEG_INF_DB;

    fn dims() -> ChannelDims {
        ChannelDims {
            spacing: 15e3,
            subcarriers: 8,
            antennas: 8,
            rows: 8,
        }
    }

    fn dataset(name: &str, train: usize) -> ScenarioDataset {
        let p = ScenarioProfile::preset(name, dims()).unwrap();
        generate_dataset(&p, SplitCounts::new(train, 4, 20), 5).unwrap()
    }

    fn model(seed: u64) -> FeedbackModel {
        let cfg = CompressionConfig::new(8, 8, CompressionRatio::new(1, 4).unwrap()).unwrap();
        build_model(&cfg, seed).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs,
            seed: 11,
            shuffle: true,
            val_every: 1,
        }
    }

    #[test]
    fn combine_preserves_samples_and_is_seeded() {
        let a = dataset("cdlA-like", 3);
        let b = dataset("cdlE-like", 3);
        let c = combine_datasets(&[&a, &b], 1).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.provenance, vec![("cdlA-like".to_string(), 3), ("cdlE-like".to_string(), 3)]);
        let mut seen = [0usize; 2];
        for (i, &label) in c.labels.iter().enumerate() {
            let src = if label == 0 { &a } else { &b };
            let hit = (0..3).filter(|&j| src.train.sample(j) == c.samples.sample(i)).count();
            assert_eq!(hit, 1);
            seen[label] += 1;
        }
        assert_eq!(seen, [3, 3]);
        let again = combine_datasets(&[&a, &b], 1).unwrap();
        assert_eq!(again.samples, c.samples);
        let other = combine_datasets(&[&a, &b], 2).unwrap();
        assert_ne!(other.samples, c.samples);
    }

    #[test]
    fn combine_rejects_mismatched_dims() {
        let a = dataset("cdlA-like", 3);
        let mut b = a.clone();
        b.train = Tensor::zeros(&[3, 2, 4, 8]);
        assert!(matches!(combine_datasets(&[&a, &b], 1), Err(Error::Shape { .. })));
        assert!(matches!(combine_datasets(&[], 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let m = model(3);
        let data = combine_datasets(&[&dataset("cdlB-like", 8)], 1).unwrap();
        let out = pretrain(&m, &data, None, &cfg(0)).unwrap();
        assert!(out.trace.is_empty());
        assert!(out.params.bit_equal(m.params()));
        let single = train_single_task(&m, &data.samples, None, &cfg(0)).unwrap();
        assert!(single.params.bit_equal(m.params()));
        let ft = finetune(&m, &data.samples, None, &cfg(0)).unwrap();
        assert!(ft.params.bit_equal(&m.decoder_params()));
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let m = model(3);
        let a = dataset("cdlA-like", 16);
        let data = combine_datasets(&[&a], 1).unwrap();
        let c = TrainConfig { epochs: 6, ..cfg(6) };
        let one = pretrain(&m, &data, Some(&a.val), &c).unwrap();
        let two = pretrain(&m, &data, Some(&a.val), &c).unwrap();
        assert!(one.params.bit_equal(&two.params));
        assert_eq!(one.trace.len(), 6);
        assert!(one.trace.iter().all(|e| e.val_loss.is_some()));
        assert!(one.trace[5].train_loss < one.trace[0].train_loss, "{:?}", one.trace);
        assert!(pretrain(&m, &CombinedDataset { samples: Tensor::zeros(&[1, 2, 8, 8]), labels: vec![], provenance: vec![] }, None, &c).is_err());
    }

    #[test]
    fn finetune_leaves_encoder_untouched() {
        let mut m = model(4);
        let a = dataset("cdlC-like", 12);
        let pre = pretrain(&m, &combine_datasets(&[&a], 2).unwrap(), None, &cfg(2)).unwrap();
        m.load_params(&pre.params).unwrap();
        let before = m.encoder_params();
        let ft = finetune(&m, &a.train, None, &cfg(3)).unwrap();
        assert!(ft.params.iter().all(|(_, e)| e.partition == Partition::Decoder));
        assert!(!ft.params.bit_equal(&m.decoder_params()));
        let tuned = m.with_decoder(&ft.params).unwrap();
        assert!(tuned.encoder_params().bit_equal(&before));
    }

    #[test]
    fn dims_mismatch_is_a_shape_error() {
        let m = model(1);
        let bad = Tensor::zeros(&[2, 2, 4, 8]);
        assert!(matches!(finetune(&m, &bad, None, &cfg(1)), Err(Error::Shape { .. })));
        assert!(matches!(evaluate(&m, &bad, &Normalizer::new(1.0).unwrap()), Err(Error::Shape { .. })));
    }

    #[test]
    fn batched_evaluation_matches_per_sample() {
        let m = model(9);
        let a = dataset("outdoor-like", 4);
        let batched = evaluate(&m, &a.test, &a.normalizer).unwrap();
        let single = evaluate_with(&a.test, &a.normalizer, |batch| {
            let parts: Vec<Tensor> = (0..batch.batch())
                .map(|i| m.reconstruct(&batch.gather(&[i])))
                .collect::<Result<_>>()?;
            Tensor::stack_batches(&parts)
        })
        .unwrap();
        assert_eq!(batched.linear.to_bits(), single.linear.to_bits());
    }

    #[test]
    fn untrained_model_is_near_zero_db() {
        let a = dataset("cdlA-like", 4);
        for seed in 0..3 {
            let n = evaluate(&model(seed), &a.test, &a.normalizer).unwrap();
            assert!(n.db.abs() <= 1.0, "seed {seed}: {} dB", n.db);
        }
    }

    #[test]
    fn oracle_decoder_gives_sentinel() {
        let a = dataset("cdlD-like", 4);
        let n = evaluate_with(&a.test, &a.normalizer, |b| Ok(b.clone())).unwrap();
        assert_eq!(n.db, NEG_INF_DB);
        let empty = Tensor::zeros(&[1, 2, 8, 8]).head(0);
        assert!(matches!(evaluate_with(&empty, &a.normalizer, |b| Ok(b.clone())), Err(Error::Config(_))));
    }
}
