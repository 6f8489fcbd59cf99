use adclr::collapse::*;
use adclr::encoder::FlowMode;
use adclr::numerics::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: FlowMode, seed: u64) -> CollapseConfig {
    CollapseConfig {
        n_raw: 3,
        n_query: 5,
        dim: 6,
        steps: 20,
        mode,
        seed,
        ..CollapseConfig::default()
    }
}

fn matmul(a: &[Vec<f64>], b: &Tensor) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b.cols()).map(|j| r.iter().enumerate().map(|(k, v)| v * b.at(k, j)).sum()).collect())
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Direct evaluation of one branch with nested loops.
fn branch_oracle(x: &Tensor, inst: &CollapseInstance, cfg: &CollapseConfig) -> Vec<Vec<f64>> {
    let xr = rows(x);
    let (q, k, v) = (matmul(&xr, &inst.wq), matmul(&xr, &inst.wk), matmul(&xr, &inst.wv));
    let keys = match cfg.mode {
        FlowMode::Bidirectional => xr.len(),
        FlowMode::Unidirectional => cfg.n_raw,
    };
    let d = cfg.dim as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = (0..keys).map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let o: Vec<f64> = (0..cfg.dim).map(|c| (0..keys).map(|j| e[j] / z * v[j][c]).sum()).collect();
            let mean = o.iter().sum::<f64>() / d;
            let var = o.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            o.iter().map(|x| (x - mean) / (var + adclr::numerics::LAYERNORM_EPS).sqrt()).collect()
        })
        .collect()
}

#[test]
fn initial_loss_matches_direct_evaluation() {
    for mode in [FlowMode::Bidirectional, FlowMode::Unidirectional] {
        let cfg = small(mode, 4);
        let inst = build_instance(&cfg).unwrap();
        let (za, zb) = (branch_oracle(&inst.x_a, &inst, &cfg), branch_oracle(&inst.x_b, &inst, &cfg));
        let expect: f64 = (cfg.n_raw..cfg.n_raw + cfg.n_query)
            .map(|i| za[i].iter().zip(&zb[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        let trace = run_collapse(&CollapseConfig { steps: 0, ..cfg }).unwrap();
        assert!((trace.rows[0].loss - expect).abs() <= 1e-10 * expect.max(1.0), "{mode:?}");
    }
}

#[test]
fn shared_query_rows_are_identical_in_both_branches() {
    let inst = build_instance(&small(FlowMode::Bidirectional, 1)).unwrap();
    for i in 3..8 {
        assert_eq!(inst.x_a.row(i), inst.x_b.row(i));
    }
    assert_ne!(inst.x_a.row(0), inst.x_b.row(0));
}

#[test]
fn loss_decreases_under_gradient_descent() {
    for mode in [FlowMode::Bidirectional, FlowMode::Unidirectional] {
        let t = run_collapse(&CollapseConfig { steps: 200, ..small(mode, 2) }).unwrap();
        assert!(t.last().unwrap().loss < t.rows[0].loss, "{mode:?}");
    }
}

#[test]
fn zero_steps_is_undetermined_and_csv_has_one_row() {
    let t = run_collapse(&CollapseConfig { steps: 0, ..small(FlowMode::Bidirectional, 0) }).unwrap();
    assert_eq!(t.verdict(), Verdict::Undetermined);
    let csv = t.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,attn_divergence,eff_rank"));
    assert_eq!(lines.count(), 1);
}

#[test]
fn non_finite_updates_are_diverged() {
    let t = run_collapse(&CollapseConfig { lr: 1e300, ..small(FlowMode::Bidirectional, 0) }).unwrap();
    assert_eq!(t.verdict(), Verdict::Diverged);
}

#[test]
fn trace_is_deterministic() {
    let c = small(FlowMode::Unidirectional, 9);
    assert_eq!(run_collapse(&c).unwrap(), run_collapse(&c).unwrap());
}

#[test]
fn invalid_configs_rejected() {
    assert!(run_collapse(&CollapseConfig { dim: 1, ..CollapseConfig::default() }).is_err());
    assert!(run_collapse(&CollapseConfig { n_raw: 0, ..CollapseConfig::default() }).is_err());
    assert!(run_collapse(&CollapseConfig { lr: -1.0, ..CollapseConfig::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn singular_values_match_nalgebra(r in 1usize..9, c in 1usize..9, seed in 0u64..10_000, rank_one in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[r, c], 1.0, &mut rng);
        if rank_one {
            let u = Tensor::randn(&[r, 1], 1.0, &mut rng);
            let v = Tensor::randn(&[1, c], 1.0, &mut rng);
            t = u.matmul(&v).unwrap();
        }
        let ours = singular_values(&t);
        let m = DMatrix::from_row_slice(r, c, t.data());
        let mut theirs: Vec<f64> = m.singular_values().iter().cloned().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(ours.len(), theirs.len());
        let scale = theirs[0].max(1.0);
        for (a, b) in ours.iter().zip(&theirs) {
            prop_assert!((a - b).abs() <= 1e-9 * scale, "{:?} vs {:?}", ours, theirs);
        }
        let total: f64 = theirs.iter().sum();
        let h: f64 = theirs.iter().map(|s| s / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
        let er = effective_rank(&t).unwrap();
        prop_assert!((er - h.exp()).abs() <= 1e-6 * er);
        prop_assert!(er >= 1.0 - 1e-12 && er <= r.min(c) as f64 + 1e-9);
    }
}
