use csi_mtl::channel::{
    generate_channel, generate_dataset, ChannelDims, ScenarioDataset, ScenarioProfile, SplitCounts,
};
use csi_mtl::config::{ExperimentConfig, ScenarioSource};
use csi_mtl::models::{
    build_model, exact_reduction_percent, load_checkpoint, save_checkpoint, ue_storage, Checkpoint,
    CompressionConfig, CompressionRatio, Strategy as Scheme,
};
use csi_mtl::nn::Tensor;
use csi_mtl::pipeline::{energy_ratio, truncate, ComplexMatrix, DftPair, Normalizer};
use csi_mtl::trainer::combine_datasets;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64) -> ComplexMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexMatrix::from_fn(rows, cols, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn small_dims() -> ChannelDims {
    ChannelDims {
        spacing: 15e3,
        subcarriers: 12,
        antennas: 4,
        rows: 6,
    }
}

fn ratio() -> impl Strategy<Value = CompressionRatio> {
    prop::sample::select(CompressionRatio::shipped().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transform_is_unitary_and_invertible(rows in 1usize..12, cols in 1usize..10, seed in any::<u64>()) {
        let h = matrix(rows, cols, seed);
        let dft = DftPair::new(rows, cols);
        let ad = dft.to_angular_delay(&h).unwrap();
        prop_assert!((ad.energy() - h.energy()).abs() <= 1e-9 * h.energy());
        let back = dft.from_angular_delay(&ad).unwrap();
        for (a, b) in back.data().iter().zip(h.data()) {
            prop_assert!((a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn normalization_round_trips_inside_range(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let h = matrix(rows, cols, seed);
        let norm = Normalizer::fit([&h]).unwrap();
        let csi = norm.normalize(&h);
        prop_assert_eq!(csi.clamped, 0);
        prop_assert!(csi.tensor.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = csi.denormalize();
        let scale = norm.scale();
        for (a, b) in back.data().iter().zip(h.data()) {
            prop_assert!((a - b).norm() <= 1e-6 * scale.max(1.0));
        }
    }

    #[test]
    fn codeword_length_is_nearest_and_nonempty(rows in 1usize..40, cols in 1usize..40, cr in ratio()) {
        if let Ok(cfg) = CompressionConfig::new(rows, cols, cr) {
            let exact = cfg.input_len() as f64 * cr.value();
            prop_assert!(cfg.codeword_len() >= 1 && cfg.codeword_len() <= cfg.input_len());
            prop_assert!((cfg.codeword_len() as f64 - exact).abs() <= 0.5);
        } else {
            prop_assert!((2 * rows * cols) as f64 * cr.value() < 0.5 + 1e-12);
        }
    }

    #[test]
    fn storage_reduction_is_exact(enc in 1u64..5_000_000, n in 1u64..12) {
        let single = ue_storage(enc, n, Scheme::SingleTask).unwrap();
        let multi = ue_storage(enc, n, Scheme::MultiTask).unwrap();
        prop_assert_eq!(single, n * enc);
        prop_assert_eq!(multi, enc);
        let want = (100 * (n - 1)) % n == 0;
        prop_assert_eq!(exact_reduction_percent(single, multi), want.then(|| 100 * (n - 1) / n));
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        rows in 2usize..8,
        extra in 0usize..8,
        train in 4usize..200,
        e2 in 0usize..20,
        gap in 1usize..20,
        lr in 1e-5f64..1e-1,
        shuffle in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.dims.rows = rows;
        cfg.dims.antennas = rows;
        cfg.dims.subcarriers = rows + extra;
        cfg.counts = SplitCounts::new(train, 3, 3);
        cfg.scenarios = ScenarioSource::Presets(vec!["indoor-like".into()]);
        cfg.crs = vec![CompressionRatio::new(1, 4).unwrap()];
        cfg.pretrain.train = train / 2;
        cfg.pretrain.train_cfg.epochs = e2 + gap;
        cfg.pretrain.train_cfg.learning_rate = lr;
        cfg.finetune.train = (train / 4).max(1);
        cfg.finetune.train_cfg.epochs = e2;
        cfg.finetune.train_cfg.shuffle = shuffle;
        cfg.single.train = train;
        prop_assume!(cfg.pretrain.train >= cfg.finetune.train);
        cfg.validate().unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_shapes_chain(rows in 1usize..7, cols in 1usize..7, cr in ratio(), batch in 1usize..4, seed in any::<u64>()) {
        let Ok(cfg) = CompressionConfig::new(rows, cols, cr) else { return Ok(()) };
        let model = build_model(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[batch, 2, rows, cols], |_| rng.random_range(0.0f32..1.0));
        let code = model.encode(&x).unwrap();
        prop_assert_eq!(code.dims(), &[batch, cfg.codeword_len()][..]);
        let y = model.decode(&code).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let direct = model.reconstruct(&x).unwrap();
        prop_assert_eq!(direct.data(), y.data());
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), cr in ratio(), epoch in any::<u32>()) {
        let cfg = CompressionConfig::new(4, 4, cr);
        let Ok(cfg) = cfg else { return Ok(()) };
        let model = build_model(&cfg, seed).unwrap();
        let ckpt = model.checkpoint(None, seed, epoch);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert!(back.params.bit_equal(model.params()));
        prop_assert_eq!(back.meta, ckpt.meta);
    }

    #[test]
    fn channels_stay_inside_kept_rows(seed in any::<u64>(), which in 0usize..7) {
        let name = ScenarioProfile::PRESETS[which];
        let profile = ScenarioProfile::preset(name, small_dims()).unwrap();
        let h = generate_channel(&profile, seed).unwrap();
        prop_assert!(h.is_finite());
        prop_assert_eq!(&h, &generate_channel(&profile, seed).unwrap());
        let d = profile.dims;
        let ad = DftPair::new(d.subcarriers, d.antennas).to_angular_delay(&h).unwrap();
        let ratio = energy_ratio(&ad, d.rows).unwrap();
        prop_assert!(ratio >= 1.0 - 1e-9, "{} kept {}", name, ratio);
    }

    #[test]
    fn combining_keeps_every_sample(n1 in 1usize..6, n2 in 1usize..6, seed in any::<u64>()) {
        let make = |name: &str, n| -> ScenarioDataset {
            let p = ScenarioProfile::preset(name, small_dims()).unwrap();
            generate_dataset(&p, SplitCounts::new(n, 1, 1), 3).unwrap()
        };
        let (a, b) = (make("cdlB-like", n1), make("outdoor-like", n2));
        let c = combine_datasets(&[&a, &b], seed).unwrap();
        prop_assert_eq!(c.len(), n1 + n2);
        prop_assert_eq!(c.labels.iter().filter(|&&l| l == 0).count(), n1);
        let mut want: Vec<Vec<u32>> = (0..n1).map(|i| a.train.sample(i).iter().map(|v| v.to_bits()).collect())
            .chain((0..n2).map(|i| b.train.sample(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut got: Vec<Vec<u32>> = (0..c.len()).map(|i| c.samples.sample(i).iter().map(|v| v.to_bits()).collect()).collect();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn truncation_keeps_leading_rows() {
    let h = matrix(8, 3, 1);
    let t = truncate(&h, 5).unwrap();
    assert_eq!(t.rows(), 5);
    assert_eq!(t.data(), &h.data()[..15]);
    assert!(truncate(&h, 9).is_err());
    assert!(truncate(&h, 0).is_err());
}

#[test]
fn checkpoint_files_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CompressionConfig::new(4, 4, CompressionRatio::new(1, 4).unwrap()).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model.checkpoint(None, 1, 0), &path).unwrap();
    let mut other = build_model(&cfg, 2).unwrap();
    other.attach(&load_checkpoint(&path).unwrap()).unwrap();
    assert!(other.params().bit_equal(model.params()));
}
