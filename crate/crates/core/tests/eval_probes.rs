use adclr::datasets::{generate, Mask, SyntheticSpec};
use adclr::encoder::EncoderConfig;
use adclr::eval::*;
use adclr::numerics::Tensor;
use adclr::objective::{HeadConfig, Network};
use adclr::trainer::{Container, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn bank(rows: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> FeatureBank {
    let d = rows[0].len();
    FeatureBank::new(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap(), labels, classes, FeatureSource::Cls).unwrap()
}

/// Two isotropic unit-variance blobs in 8-d whose means are 4σ apart.
fn blobs(n: usize, seed: u64) -> FeatureBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let mut r: Vec<f64> = (0..8).map(|_| normal.sample(&mut rng)).collect();
        r[0] += if c == 0 { -2.0 } else { 2.0 };
        r[1] += 10.0; // keep blobs away from the origin so cosine similarity separates them
        rows.push(r);
        labels.push(c);
    }
    bank(rows, labels, 2)
}

#[test]
fn knn_identical_point_k1() {
    let train = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]], vec![0, 1, 2], 3);
    let test = bank(vec![vec![0.0, 1.0]], vec![1], 3);
    let r = knn_probe(&train, &test, 1, 0.07).unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn knn_degenerate_bank_predicts_majority() {
    let train = bank(vec![vec![1.0, 1.0]; 5], vec![0, 1, 1, 2, 1], 3);
    let test = bank(vec![vec![0.3, -2.0], vec![5.0, 1.0]], vec![1, 0], 3);
    let r = knn_probe(&train, &test, 3, 0.07).unwrap();
    assert_eq!(r.confusion[1][1], 1);
    assert_eq!(r.confusion[0][1], 1);
}

#[test]
fn knn_uniform_weights_all_neighbours_is_majority() {
    let b = blobs(41, 1);
    let test = blobs(20, 2);
    let r = knn_probe(&b, &test, b.len(), f64::INFINITY).unwrap();
    // 21 of 41 training points are class 0.
    assert!(r.confusion.iter().all(|row| row[1] == 0));
}

#[test]
fn knn_separates_gaussian_blobs() {
    let train = blobs(200, 3);
    let test = blobs(200, 4);
    let r = knn_probe(&train, &test, 5, 0.07).unwrap();
    assert!(r.accuracy >= 0.95, "{}", r.accuracy);
}

#[test]
fn knn_argument_errors() {
    let b = blobs(10, 0);
    assert!(knn_probe(&b, &b, 0, 0.07).is_err());
    assert!(knn_probe(&b, &b, 11, 0.07).is_err());
    let narrow = bank(vec![vec![1.0]], vec![0], 2);
    assert!(knn_probe(&b, &narrow, 1, 0.07).is_err());
}

#[test]
fn linear_probe_separable_is_perfect() {
    let train = bank(vec![vec![-1.0, 0.1], vec![-2.0, 0.0], vec![1.0, 0.3], vec![2.5, -0.2]], vec![0, 0, 1, 1], 2);
    let test = bank(vec![vec![-3.0, 0.0], vec![3.0, 0.0]], vec![0, 1], 2);
    let r = linear_probe(&train, &test, &LinearProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn linear_probe_random_labels_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mk = |n: usize, rng: &mut ChaCha8Rng| {
        let rows = (0..n).map(|_| (0..4).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..4)).collect();
        bank(rows, labels, 4)
    };
    let (train, test) = (mk(400, &mut rng), mk(800, &mut rng));
    let r = linear_probe(&train, &test, &LinearProbeConfig::default()).unwrap();
    // 1/4 ± 4 binomial standard deviations at n = 800.
    let sd = (0.25f64 * 0.75 / 800.0).sqrt();
    assert!((r.accuracy - 0.25).abs() < 4.0 * sd, "{}", r.accuracy);
}

#[test]
fn linear_probe_rejects_single_class() {
    let train = bank(vec![vec![1.0], vec![2.0]], vec![1, 1], 2);
    assert!(linear_probe(&train, &train, &LinearProbeConfig::default()).is_err());
}

#[test]
fn feature_bank_persists_exactly() {
    let b = blobs(7, 5);
    let c = Container::from_bytes(&b.to_container().to_bytes()).unwrap();
    assert_eq!(FeatureBank::from_container(&c).unwrap(), b);
}

#[test]
fn half_mask_with_perfect_features_is_perfect() {
    // Left half of a 4x4 grid is object; the feature is the label itself.
    let mask = Mask {
        height: 16,
        width: 16,
        bits: (0..256).map(|i| i % 16 < 8).collect(),
    };
    let labels = mask.grid_labels(4, 4).unwrap();
    assert_eq!(labels.iter().filter(|&&b| b).count(), 8);
    let feats = Tensor::new(vec![16, 2], labels.iter().flat_map(|&b| if b { [1.0, 0.0] } else { [0.0, 1.0] }).collect()).unwrap();
    let features = vec![feats; 4];
    let masks = vec![mask; 4];
    let r = patch_probe(&features, (4, 4), &masks, &LocalizationConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(patch_probe(&features, (3, 3), &masks, &LocalizationConfig::default()).is_err());
}

#[test]
fn untrained_encoder_localization_near_base_rate_and_params_untouched() {
    let spec = SyntheticSpec::default();
    let ds = generate(&spec, 60).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (net, params) = Network::init(EncoderConfig { base_res: 64, ..cfg.encoder }, HeadConfig::default(), &mut rng).unwrap();
    let before = params.digest();
    let masks: Vec<Mask> = ds.samples.iter().map(|s| s.mask.clone()).collect();
    let r = localization_probe(&net, &params, &ds.images(), &masks, &LocalizationConfig::default()).unwrap();
    assert_eq!(params.digest(), before);
    let test_labels: Vec<bool> = masks[48..].iter().flat_map(|m| m.patch_labels(8).unwrap()).collect();
    let base = test_labels.iter().filter(|&&b| !b).count() as f64 / test_labels.len() as f64;
    // A random encoder still sees colour, so allow it to beat the majority rate,
    // but it must not fall below it by much.
    assert!(r.accuracy >= base - 0.05, "accuracy {} base {base}", r.accuracy);
    let bank = extract_features(&net, &params, &ds.images(), &ds.labels(), 3, FeatureSource::Patches, &ExtractConfig::default()).unwrap();
    assert_eq!(bank.dim(), cfg.encoder.dim);
    assert_eq!(params.digest(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_is_confusion_trace_ratio(truth in prop::collection::vec(0usize..4, 1..50), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.gen_bool(0.5) { t } else { rng.gen_range(0..4) }).collect();
        let r = ProbeResult::from_predictions(&truth, &pred, 4, 0).unwrap();
        let trace: usize = (0..4).map(|c| r.confusion[c][c]).sum();
        prop_assert_eq!(r.accuracy, trace as f64 / truth.len() as f64);
        prop_assert_eq!(r.total(), truth.len());
    }
}
