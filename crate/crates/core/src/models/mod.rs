//! Encoder/decoder builders, parameter accounting, and UE storage.
//!
//! Parameter counts include every dense/conv weight and bias plus two
//! trainable values (scale, shift) per batch-norm channel. Batch-norm running
//! statistics are stored with the model but are not counted. Under this
//! convention the default encoder for a 2x32x32 input at CR 1/4 has
//! 1,049,130 parameters (conv 38 + batch-norm 4 + dense 1,049,088), 124 fewer
//! than the 1,049,254 usually quoted for this encoder.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{init_params, Layer, ParamSet, Partition, Stack, Tensor};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

pub const LEAKY_SLOPE: f32 = 0.3;

/// Codeword length over flattened input length, kept as a reduced fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CompressionRatio {
    num: u32,
    den: u32,
}

impl CompressionRatio {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::Config(format!("compression ratio {num}/{den} not in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(CompressionRatio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// The ratios used in the reference experiments.
    pub fn shipped() -> [CompressionRatio; 5] {
        [4, 8, 16, 32, 64].map(|d| CompressionRatio { num: 1, den: d })
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for CompressionRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse compression ratio `{s}`"));
        let (n, d) = s.trim().split_once('/').ok_or_else(bad)?;
        CompressionRatio::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CompressionConfig {
    /// Retained delay rows `N_c`.
    pub rows: usize,
    /// Transmit antennas `N_t`.
    pub antennas: usize,
    pub ratio: CompressionRatio,
}

impl CompressionConfig {
    pub fn new(rows: usize, antennas: usize, ratio: CompressionRatio) -> Result<Self> {
        let cfg = CompressionConfig {
            rows,
            antennas,
            ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.antennas == 0 {
            return Err(Error::Config("rows and antennas must be positive".into()));
        }
        if self.codeword_len() < 1 {
            return Err(Error::Config(format!(
                "CR {} leaves an empty codeword for N = {}",
                self.ratio,
                self.input_len()
            )));
        }
        Ok(())
    }

    /// `N = 2 · N_c · N_t`.
    pub fn input_len(&self) -> usize {
        2 * self.rows * self.antennas
    }

    /// `M = round(N · CR)`, ties to even.
    pub fn codeword_len(&self) -> usize {
        let scaled = self.input_len() as u64 * self.ratio.num as u64;
        let den = self.ratio.den as u64;
        let (q, r) = (scaled / den, scaled % den);
        let m = match (2 * r).cmp(&den) {
            std::cmp::Ordering::Less => q,
            std::cmp::Ordering::Greater => q + 1,
            std::cmp::Ordering::Equal => q + (q & 1),
        };
        m as usize
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [2, self.rows, self.antennas]
    }
}

/// A named encoder/decoder layout. Alternative layouts implement this trait
/// and are passed to [`build_model_with`].
pub trait Architecture {
    fn name(&self) -> &str;
    fn encoder(&self, cfg: &CompressionConfig) -> Vec<Layer>;
    fn decoder(&self, cfg: &CompressionConfig) -> Vec<Layer>;
    /// Parameters set to zero after random initialization.
    fn zero_init(&self) -> &[&str] {
        &[]
    }
}

/// Conv front end + dense compression; dense expansion + two residual
/// refinement blocks + sigmoid output.
#[derive(Clone, Copy, Debug, Default)]
pub struct CsiNetStyle;

impl Architecture for CsiNetStyle {
    fn name(&self) -> &str {
        "csinet"
    }

    // An untrained model then emits exactly 0.5, i.e. a zero channel.
    fn zero_init(&self) -> &[&str] {
        &["dec.out.weight"]
    }

    fn encoder(&self, cfg: &CompressionConfig) -> Vec<Layer> {
        vec![
            Layer::conv2d("enc.conv", 2, 2),
            Layer::batchnorm("enc.bn", 2),
            Layer::leaky_relu("enc.act", LEAKY_SLOPE),
            Layer::reshape("enc.flatten", &[cfg.input_len()]),
            Layer::dense("enc.fc", cfg.input_len(), cfg.codeword_len()),
        ]
    }

    fn decoder(&self, cfg: &CompressionConfig) -> Vec<Layer> {
        let mut layers = vec![
            Layer::dense("dec.fc", cfg.codeword_len(), cfg.input_len()),
            Layer::reshape("dec.unflatten", &cfg.input_dims()),
        ];
        for block in 0..2 {
            let p = format!("dec.refine{block}");
            let mut body = Vec::new();
            for (i, (cin, cout)) in [(2, 8), (8, 16), (16, 2)].into_iter().enumerate() {
                body.push(Layer::conv2d(format!("{p}.conv{i}"), cin, cout));
                body.push(Layer::batchnorm(format!("{p}.bn{i}"), cout));
                body.push(Layer::leaky_relu(format!("{p}.act{i}"), LEAKY_SLOPE));
            }
            layers.push(Layer::residual(p, body));
        }
        layers.push(Layer::conv2d("dec.out", 2, 2));
        layers.push(Layer::sigmoid("dec.sigmoid"));
        layers
    }
}

/// Encoder + decoder with a single parameter set partitioned between them.
#[derive(Clone, Debug)]
pub struct FeedbackModel {
    cfg: CompressionConfig,
    encoder: Stack,
    decoder: Stack,
    autoencoder: Stack,
    params: ParamSet,
}

/// Selects which parameters [`count_params`] counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionSelector {
    Encoder,
    Decoder,
    All,
}

pub fn build_model(cfg: &CompressionConfig, seed: u64) -> Result<FeedbackModel> {
    build_model_with(&CsiNetStyle, cfg, seed)
}

pub fn build_model_with(arch: &dyn Architecture, cfg: &CompressionConfig, seed: u64) -> Result<FeedbackModel> {
    cfg.validate()?;
    let encoder = Stack::new(&cfg.input_dims(), arch.encoder(cfg))?;
    if encoder.output_dims() != [cfg.codeword_len()] {
        return Err(Error::Config(format!(
            "{} encoder emits {:?}, codeword length is {}",
            arch.name(),
            encoder.output_dims(),
            cfg.codeword_len()
        )));
    }
    let decoder = Stack::new(&[cfg.codeword_len()], arch.decoder(cfg))?;
    let autoencoder = encoder.then(&decoder)?;
    if autoencoder.output_dims() != cfg.input_dims() {
        return Err(Error::Config(format!(
            "{} decoder emits {:?}, expected {:?}",
            arch.name(),
            autoencoder.output_dims(),
            cfg.input_dims()
        )));
    }
    let mut params = init_params(&encoder, Partition::Encoder, seed);
    let dec = init_params(&decoder, Partition::Decoder, seed ^ 0x9e37_79b9_7f4a_7c15);
    for (name, entry) in dec.iter() {
        params.insert(name, entry.clone())?;
    }
    for name in arch.zero_init() {
        let entry = params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        entry.tensor.data_mut().fill(0.0);
    }
    Ok(FeedbackModel {
        cfg: *cfg,
        encoder,
        decoder,
        autoencoder,
        params,
    })
}

impl FeedbackModel {
    pub fn config(&self) -> &CompressionConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Stack {
        &self.encoder
    }

    pub fn decoder(&self) -> &Stack {
        &self.decoder
    }

    /// Encoder followed by decoder.
    pub fn autoencoder(&self) -> &Stack {
        &self.autoencoder
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.partition(Partition::Encoder)
    }

    pub fn decoder_params(&self) -> ParamSet {
        self.params.partition(Partition::Decoder)
    }

    /// Replaces parameters by name (e.g. a fine-tuned decoder). Names, dims
    /// and partition tags are validated first; on error nothing changes.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.overwrite_from(params)
    }

    /// Copy of this model with a different decoder.
    pub fn with_decoder(&self, decoder: &ParamSet) -> Result<FeedbackModel> {
        if decoder.iter().any(|(_, e)| e.partition != Partition::Decoder) {
            return Err(Error::Integrity("decoder set contains encoder parameters".into()));
        }
        let expected = self.params.partition(Partition::Decoder).len();
        if decoder.len() != expected {
            return Err(Error::Integrity(format!(
                "decoder set has {} tensors, model expects {expected}",
                decoder.len()
            )));
        }
        let mut model = self.clone();
        model.load_params(decoder)?;
        Ok(model)
    }

    /// Codewords for a batch `[B, 2, N_c, N_t]` (inference mode).
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        crate::nn::forward(&self.encoder, &self.params, batch)
    }

    /// Reconstructions for codewords `[B, M]` (inference mode).
    pub fn decode(&self, codewords: &Tensor) -> Result<Tensor> {
        crate::nn::forward(&self.decoder, &self.params, codewords)
    }

    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        crate::nn::forward(&self.autoencoder, &self.params, batch)
    }
}

/// Exact trainable-parameter count of one partition or the whole model.
pub fn count_params(model: &FeedbackModel, which: PartitionSelector) -> usize {
    let p = model.params();
    match which {
        PartitionSelector::Encoder => p.partition(Partition::Encoder).trainable_count(),
        PartitionSelector::Decoder => p.partition(Partition::Decoder).trainable_count(),
        PartitionSelector::All => p.trainable_count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    SingleTask,
    MultiTask,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::SingleTask => "single-task",
            Strategy::MultiTask => "multi-task",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "single-task" => Ok(Strategy::SingleTask),
            "multi-task" | "shared-encoder" => Ok(Strategy::MultiTask),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Encoder parameters stored at the UE to serve `scenarios` scenarios: one
/// encoder per scenario for single-task, one shared encoder otherwise.
pub fn ue_storage(encoder_params: u64, scenarios: u64, strategy: Strategy) -> Result<u64> {
    if scenarios < 1 {
        return Err(Error::Config("at least one scenario is required".into()));
    }
    Ok(match strategy {
        Strategy::SingleTask => encoder_params * scenarios,
        Strategy::MultiTask => encoder_params,
    })
}

/// Integer percentage reduction `100 · (1 − shared/single)`, exact when it
/// divides evenly; `None` otherwise.
pub fn exact_reduction_percent(single: u64, shared: u64) -> Option<u64> {
    if single == 0 || shared > single {
        return None;
    }
    let saved = (single - shared) * 100;
    (saved % single == 0).then(|| saved / single)
}
