use adclr::numerics::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use adclr::objective::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn softmax(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn ce(p: &[f64], logits: &[f64], t: f64) -> f64 {
    let q = softmax(logits, t);
    -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>()
}

struct Case {
    student_cls: Vec<Tensor>,
    student_q: Vec<Tensor>,
    teacher_cls: Vec<Tensor>,
    teacher_q: Vec<Tensor>,
}

/// Two global views with `q` queries and `locals` local views, K = 5.
fn case(q: usize, locals: usize, seed: u64) -> Case {
    let k = 5;
    let views = 2 + locals;
    let tp = |t: Tensor| teacher_distribution(&t, &vec![0.1; k], 0.07).unwrap();
    Case {
        student_cls: (0..views).map(|v| rand_t(&[1, k], seed * 100 + v as u64)).collect(),
        student_q: (0..2).map(|v| rand_t(&[q, k], seed * 100 + 50 + v)).collect(),
        teacher_cls: (0..2).map(|v| tp(rand_t(&[1, k], seed * 100 + 70 + v))).collect(),
        teacher_q: (0..2).map(|v| tp(rand_t(&[q, k], seed * 100 + 80 + v))).collect(),
    }
}

fn build(g: &mut Graph, c: &Case, with_queries: bool) -> (Vec<StudentView>, Vec<TeacherView>) {
    let students = c
        .student_cls
        .iter()
        .enumerate()
        .map(|(i, t)| StudentView {
            cls: g.param(t.clone()),
            query: (with_queries && i < 2).then(|| g.param(c.student_q[i].clone())),
        })
        .collect();
    let teachers = (0..2)
        .map(|i| TeacherView {
            cls: c.teacher_cls[i].clone(),
            query: with_queries.then(|| c.teacher_q[i].clone()),
        })
        .collect();
    (students, teachers)
}

fn oracle(c: &Case, cfg: &LossConfig) -> (f64, f64) {
    let mut global = Vec::new();
    for i in 0..2 {
        for (v, s) in c.student_cls.iter().enumerate() {
            if v != i {
                global.push(ce(c.teacher_cls[i].row(0), s.row(0), cfg.tau_s));
            }
        }
    }
    let global = global.iter().sum::<f64>() / global.len() as f64;
    let q = c.student_q[0].rows();
    let dirs: &[(usize, usize)] = if cfg.symmetric { &[(1, 0), (0, 1)] } else { &[(1, 0)] };
    let mut local = 0.0;
    for &(t, s) in dirs {
        for r in 0..q {
            local += ce(c.teacher_q[t].row(r), c.student_q[s].row(r), cfg.tau_s);
        }
    }
    let local = cfg.lambda / q as f64 * local / dirs.len() as f64;
    (global, local)
}

#[test]
fn loss_matches_direct_formula() {
    for (symmetric, locals) in [(true, 0), (true, 3), (false, 2)] {
        let c = case(4, locals, 7);
        let cfg = LossConfig { symmetric, ..LossConfig::default() };
        let mut g = Graph::new();
        let (s, t) = build(&mut g, &c, true);
        let parts = adclr_loss(&mut g, &s, &t, &cfg).unwrap();
        let (eg, el) = oracle(&c, &cfg);
        let got_g = g.value(parts.global).data()[0];
        let got_l = g.value(parts.local.unwrap()).data()[0];
        assert!((got_g - eg).abs() < 1e-12, "{got_g} vs {eg}");
        assert!((got_l - el).abs() < 1e-12, "{got_l} vs {el}");
        assert!((g.value(parts.total).data()[0] - (eg + el)).abs() < 1e-12);
    }
}

#[test]
fn lambda_zero_and_no_queries_reduce_to_global_exactly() {
    let c = case(3, 2, 1);
    let mut g = Graph::new();
    let (s, t) = build(&mut g, &c, true);
    let zero = adclr_loss(&mut g, &s, &t, &LossConfig { lambda: 0.0, ..LossConfig::default() }).unwrap();
    let (s2, t2) = build(&mut g, &c, false);
    let none = adclr_loss(&mut g, &s2, &t2, &LossConfig::default()).unwrap();
    let a = g.value(zero.total).data()[0];
    let b = g.value(none.total).data()[0];
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(a.to_bits(), g.value(zero.global).data()[0].to_bits());
    assert!(zero.local.is_none() && none.local.is_none());
}

#[test]
fn local_term_is_linear_in_lambda() {
    let c = case(3, 0, 2);
    let at = |lambda| {
        let mut g = Graph::new();
        let (s, t) = build(&mut g, &c, true);
        let p = adclr_loss(&mut g, &s, &t, &LossConfig { lambda, ..LossConfig::default() }).unwrap();
        g.value(p.local.unwrap()).data()[0]
    };
    assert!((at(1.0) - 2.0 * at(0.5)).abs() < 1e-12);
}

#[test]
fn mismatched_query_counts_rejected() {
    let mut c = case(3, 0, 3);
    c.teacher_q[1] = c.teacher_q[1].slice_rows(0, 2);
    let mut g = Graph::new();
    let (s, t) = build(&mut g, &c, true);
    assert!(adclr_loss(&mut g, &s, &t, &LossConfig::default()).is_err());
}

#[test]
fn loss_gradient_passes_grad_check() {
    let c = case(2, 1, 4);
    let leaves: Vec<Tensor> = c.student_cls.iter().chain(&c.student_q).cloned().collect();
    let cfg = LossConfig::default();
    let f = |g: &mut Graph, v: &[Var]| {
        let s: Vec<StudentView> = (0..3)
            .map(|i| StudentView { cls: v[i], query: (i < 2).then(|| v[3 + i]) })
            .collect();
        let t: Vec<TeacherView> = (0..2)
            .map(|i| TeacherView { cls: c.teacher_cls[i].clone(), query: Some(c.teacher_q[i].clone()) })
            .collect();
        Ok(adclr_loss(g, &s, &t, &cfg)?.total)
    };
    let r = grad_check(f, &leaves, &GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn teacher_rows_are_distributions(seed in 0u64..10_000, k in 2usize..12, tau in 0.01f64..1.0) {
        let l = rand_t(&[3, k], seed);
        let c = rand_t(&[1, k], seed + 1);
        let p = teacher_distribution(&l, c.data(), tau).unwrap();
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_is_at_least_teacher_entropy(seed in 0u64..10_000) {
        let p = teacher_distribution(&rand_t(&[1, 6], seed), &[0.0; 6], 0.5).unwrap();
        let mut g = Graph::new();
        let s = g.param(rand_t(&[1, 6], seed + 9));
        let h = h_cross_entropy(&mut g, &p, s, 0.1).unwrap();
        let entropy: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
        prop_assert!(g.value(h).data()[0] >= entropy - 1e-12);
    }
}
