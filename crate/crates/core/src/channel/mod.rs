//! Synthetic multipath channels and per-scenario datasets.
//!
//! A channel is a sum of rays, each with a complex gain, a delay and an angle
//! of departure from a half-wavelength uniform linear array:
//!
//! `H̃[n, t] = Σ_p α_p · exp(−j2π n Δf τ_p) · exp(−jπ t sin φ_p)`
//!
//! Cluster delays are snapped to the delay-bin grid `1 / (Ñ_c Δf)` and capped
//! at `max_delay`, so a profile whose cap is below `(N_c − 1) / (Ñ_c Δf)` keeps
//! all of its energy in the first `N_c` delay rows.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::pipeline::ComplexMatrix;

mod dataset;

pub use dataset::{
    generate_dataset, load_dataset, save_dataset, GenerationSummary, ScenarioDataset, Split, SplitCounts,
};

/// Default simulation dimensions.
pub const SUBCARRIER_SPACING_HZ: f64 = 15e3;
pub const SUBCARRIERS: usize = 72;
pub const ANTENNAS: usize = 32;
pub const DELAY_ROWS: usize = 32;

/// Array and OFDM grid shared by every scenario of an experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelDims {
    /// Δf in Hz.
    pub spacing: f64,
    /// Ñ_c.
    pub subcarriers: usize,
    /// N_t.
    pub antennas: usize,
    /// N_c, delay rows kept after truncation.
    pub rows: usize,
}

impl Default for ChannelDims {
    fn default() -> Self {
        ChannelDims {
            spacing: SUBCARRIER_SPACING_HZ,
            subcarriers: SUBCARRIERS,
            antennas: ANTENNAS,
            rows: DELAY_ROWS,
        }
    }
}

impl ChannelDims {
    /// Width of one delay bin, `1 / (Ñ_c Δf)` seconds.
    pub fn delay_bin(&self) -> f64 {
        1.0 / (self.subcarriers as f64 * self.spacing)
    }

    /// Largest delay that stays inside the kept rows.
    pub fn max_delay(&self) -> f64 {
        self.rows.saturating_sub(1) as f64 * self.delay_bin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioProfile {
    pub id: String,
    /// Number of NLOS clusters P.
    pub clusters: usize,
    /// Mean excess delay of the exponential cluster-delay law, seconds.
    pub delay_spread: f64,
    /// Standard deviation of cluster angles around the mean angle, radians.
    pub angle_spread: f64,
    /// Rician K (linear); 0 means NLOS.
    pub los_factor: f64,
    /// Power ratio between consecutive clusters, in (0, 1].
    pub power_decay: f64,
    /// Delay cap, seconds.
    pub max_delay: f64,
    pub dims: ChannelDims,
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub gain: Complex64,
    /// Seconds.
    pub delay: f64,
    /// Radians from broadside.
    pub angle: f64,
}

/// Half-width of the uniform law for the per-sample mean angle.
const MEAN_ANGLE_RANGE: f64 = PI / 3.0;
/// Slack for floating-point delay-bound comparisons, in delay bins.
const DELAY_SLACK: f64 = 1e-9;

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ScenarioProfile {
    /// Shipped presets: `cdlA-like` … `cdlE-like`, `indoor-like`, `outdoor-like`.
    pub fn preset(name: &str, dims: ChannelDims) -> Result<ScenarioProfile> {
        let bin = dims.delay_bin();
        // (clusters, delay spread in bins, angle spread in degrees, K in dB or NLOS, decay)
        let (clusters, spread_bins, angle_deg, k_db, decay) = match name {
            "cdlA-like" => (24, 4.0, 12.0, None, 0.85),
            "cdlB-like" => (16, 2.0, 8.0, None, 0.8),
            "cdlC-like" => (12, 1.0, 5.0, None, 0.75),
            "cdlD-like" => (8, 8.0, 6.0, Some(10.0), 0.95),
            "cdlE-like" => (3, 0.5, 3.0, Some(13.0), 0.6),
            "indoor-like" => (6, 0.5, 4.0, None, 0.6),
            "outdoor-like" => (10, 6.0, 15.0, None, 0.85),
            _ => {
                return Err(Error::Config(format!(
                    "unknown profile `{name}`; expected one of {}",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        let profile = ScenarioProfile {
            id: name.to_string(),
            clusters,
            delay_spread: spread_bins * bin,
            angle_spread: f64::to_radians(angle_deg),
            los_factor: k_db.map_or(0.0, db_to_linear),
            power_decay: decay,
            max_delay: dims.max_delay(),
            dims,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub const PRESETS: [&'static str; 7] = [
        "cdlA-like",
        "cdlB-like",
        "cdlC-like",
        "cdlD-like",
        "cdlE-like",
        "indoor-like",
        "outdoor-like",
    ];

    /// Checks every bound and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let mut bad = Vec::new();
        if self.id.is_empty() {
            bad.push("id must be non-empty".to_string());
        }
        if self.clusters == 0 {
            bad.push("clusters must be >= 1".to_string());
        }
        if !(self.delay_spread.is_finite() && self.delay_spread >= 0.0) {
            bad.push(format!("delay_spread {} must be finite and >= 0", self.delay_spread));
        }
        if !(self.angle_spread.is_finite() && self.angle_spread >= 0.0) {
            bad.push(format!("angle_spread {} must be finite and >= 0", self.angle_spread));
        }
        if !(self.los_factor.is_finite() && self.los_factor >= 0.0) {
            bad.push(format!("los_factor {} must be finite and >= 0", self.los_factor));
        }
        if !(self.power_decay > 0.0 && self.power_decay <= 1.0) {
            bad.push(format!("power_decay {} must lie in (0, 1]", self.power_decay));
        }
        if !(d.spacing.is_finite() && d.spacing > 0.0) {
            bad.push(format!("subcarrier spacing {} must be > 0", d.spacing));
        }
        if d.subcarriers == 0 || d.antennas == 0 {
            bad.push("subcarriers and antennas must be >= 1".to_string());
        }
        if d.rows == 0 || d.rows > d.subcarriers {
            bad.push(format!("rows {} must lie in 1..={}", d.rows, d.subcarriers));
        }
        if bad.is_empty() {
            let cap = d.max_delay() + DELAY_SLACK * d.delay_bin();
            if !(self.max_delay.is_finite() && self.max_delay >= 0.0 && self.max_delay <= cap) {
                bad.push(format!(
                    "max_delay {:e} s must lie in [0, {:e}] s = (N_c - 1) / (Ñ_c Δf)",
                    self.max_delay,
                    d.max_delay()
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("profile `{}`: {}", self.id, bad.join("; "))))
        }
    }

    /// Draws the rays of one sample.
    pub fn draw_rays(&self, sample_seed: u64) -> Result<Vec<Ray>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let bin = self.dims.delay_bin();
        let max_bins = (self.max_delay / bin + DELAY_SLACK).floor();
        let mean_angle = rng.random_range(-MEAN_ANGLE_RANGE..MEAN_ANGLE_RANGE);

        // First cluster arrives at zero excess delay; the rest follow an
        // exponential law, so decay^p orders power by arrival.
        let mut delays = vec![0.0f64];
        if self.delay_spread > 0.0 {
            let law = Exp::new(1.0 / self.delay_spread).expect("positive rate");
            delays.extend((1..self.clusters).map(|_| law.sample(&mut rng)));
        } else {
            delays.resize(self.clusters, 0.0);
        }
        delays.sort_by(f64::total_cmp);

        let spread = Normal::new(0.0, self.angle_spread).expect("finite spread");
        let weights: Vec<f64> = (0..self.clusters).map(|p| self.power_decay.powi(p as i32)).collect();
        let total: f64 = weights.iter().sum();
        let nlos_share = 1.0 / (1.0 + self.los_factor);

        let mut rays = Vec::with_capacity(self.clusters + 1);
        if self.los_factor > 0.0 {
            rays.push(Ray {
                gain: Complex64::new((self.los_factor * nlos_share).sqrt(), 0.0),
                delay: 0.0,
                angle: mean_angle,
            });
        }
        for (delay, w) in delays.into_iter().zip(weights) {
            let power = w / total * nlos_share;
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let angle = (mean_angle + spread.sample(&mut rng)).clamp(-PI / 2.0, PI / 2.0);
            rays.push(Ray {
                gain: Complex64::new(re, im) * (power / 2.0).sqrt(),
                delay: (delay / bin).round().min(max_bins) * bin,
                angle,
            });
        }
        Ok(rays)
    }

    /// `Ñ_c × N_t` spatial-frequency matrix of the given rays.
    pub fn synthesize(&self, rays: &[Ray]) -> ComplexMatrix {
        let (nc, nt) = (self.dims.subcarriers, self.dims.antennas);
        let mut h = vec![Complex64::new(0.0, 0.0); nc * nt];
        for ray in rays {
            let freq: Vec<Complex64> = (0..nc)
                .map(|n| Complex64::from_polar(1.0, -2.0 * PI * n as f64 * self.dims.spacing * ray.delay))
                .collect();
            let space: Vec<Complex64> = (0..nt)
                .map(|t| Complex64::from_polar(1.0, -PI * t as f64 * ray.angle.sin()))
                .collect();
            for (row, &f) in h.chunks_exact_mut(nt).zip(&freq) {
                let g = ray.gain * f;
                for (v, &s) in row.iter_mut().zip(&space) {
                    *v += g * s;
                }
            }
        }
        ComplexMatrix::new(nc, nt, h).expect("dims match data")
    }
}

/// One spatial-frequency channel; deterministic in `(profile, sample_seed)`.
pub fn generate_channel(profile: &ScenarioProfile, sample_seed: u64) -> Result<ComplexMatrix> {
    let rays = profile.draw_rays(sample_seed)?;
    Ok(profile.synthesize(&rays))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed from the master seed, scenario id, split and index.
pub fn sample_seed(master_seed: u64, scenario: &str, split: Split, index: u64) -> u64 {
    // FNV-1a over the id keeps scenarios with a shared master seed apart.
    let id = scenario
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut h = splitmix(master_seed);
    h = splitmix(h ^ id);
    h = splitmix(h ^ split.tag());
    splitmix(h ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{energy_ratio, DftPair};

    fn toy_dims() -> ChannelDims {
        ChannelDims {
            antennas: 16,
            rows: 16,
            ..ChannelDims::default()
        }
    }

    #[test]
    fn single_flat_ray() {
        let profile = ScenarioProfile::preset("cdlA-like", toy_dims()).unwrap();
        let gain = Complex64::new(0.3, -1.1);
        let h = profile.synthesize(&[Ray {
            gain,
            delay: 0.0,
            angle: 0.0,
        }]);
        assert!(h.data().iter().all(|&v| (v - gain).norm() < 1e-12));
    }

    #[test]
    fn delay_lands_in_its_row() {
        let dims = ChannelDims::default();
        let profile = ScenarioProfile::preset("cdlA-like", dims).unwrap();
        let h = profile.synthesize(&[Ray {
            gain: Complex64::new(1.0, 0.0),
            delay: 3.0 * dims.delay_bin(),
            angle: 0.0,
        }]);
        let ad = DftPair::new(dims.subcarriers, dims.antennas).to_angular_delay(&h).unwrap();
        let row: f64 = (0..dims.antennas).map(|c| ad.get(3, c).norm_sqr()).sum();
        assert!(row / ad.energy() >= 0.999);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let profile = ScenarioProfile::preset("cdlB-like", toy_dims()).unwrap();
        let a = generate_channel(&profile, 11).unwrap();
        assert_eq!(a, generate_channel(&profile, 11).unwrap());
        assert_ne!(a, generate_channel(&profile, 12).unwrap());
    }

    #[test]
    fn presets_validate_and_contain_energy() {
        let dims = toy_dims();
        let dft = DftPair::new(dims.subcarriers, dims.antennas);
        for name in ScenarioProfile::PRESETS {
            let p = ScenarioProfile::preset(name, dims).unwrap();
            for seed in 0..20 {
                let h = dft.to_angular_delay(&generate_channel(&p, seed).unwrap()).unwrap();
                assert!(energy_ratio(&h, dims.rows).unwrap() > 0.999_999, "{name}");
            }
        }
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut p = ScenarioProfile::preset("cdlC-like", toy_dims()).unwrap();
        p.clusters = 0;
        p.power_decay = 1.5;
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("clusters") && msg.contains("power_decay"), "{msg}");
        let mut q = ScenarioProfile::preset("cdlC-like", toy_dims()).unwrap();
        q.max_delay = 16.0 * q.dims.delay_bin();
        assert!(matches!(q.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(
            ScenarioProfile::preset("cdlZ", ChannelDims::default()),
            Err(Error::Config(_))
        ));
    }
}
