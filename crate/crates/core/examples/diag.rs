use adclr::datasets::{generate, SyntheticSpec};
use adclr::patchify::build_views;
use adclr::trainer::*;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let ds = generate(&SyntheticSpec::default(), 512).unwrap();
    let images = ds.images();
    let mut cfg = TrainConfig::default();
    cfg.views.global_res = 32;
    cfg.encoder.base_res = 32;
    cfg.optim.base_lr = a[1].parse().unwrap();
    cfg.optim.epochs = a[2].parse().unwrap();
    cfg.optim.tau_t.1 = a[3].parse().unwrap();
    cfg.head.prototypes = a[4].parse().unwrap();
    cfg.encoder.init_std = a[5].parse().unwrap();
    cfg.optim.momentum.0 = a[6].parse().unwrap();
    let mut st = TrainState::new(cfg, images.len()).unwrap();
    let total = st.total_steps();
    while st.step < total {
        if st.step % 64 == 0 {
            let s = st.schedules();
            let tau = s.tau_t.at(st.step);
            let mut logits = Vec::new();
            for k in 0..16 {
                let b = build_views(&images[k], &st.cfg.views, &mut derived_rng(1, 2, 3, k as u64)).unwrap();
                logits.extend(teacher_logits(&st.net, &st.pair.teacher, &b, st.cfg.flow).unwrap());
            }
            let t = teacher_targets(&logits, &st.pair.center, &st.pair.query_center, tau).unwrap();
            let ent: f64 = t.iter().map(|v| v.cls.row(0).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>()).sum::<f64>() / t.len() as f64;
            let k = logits[0].0.cols();
            let mut spread = 0.0;
            for j in 0..k {
                let vals: Vec<f64> = logits.iter().map(|(c, _)| c.at(0, j)).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                spread += (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt() / k as f64;
            }
            let argmaxes: std::collections::BTreeSet<usize> = t.iter().map(|v| { let r = v.cls.row(0); (0..k).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap() }).collect();
            println!("step {} teacher_entropy {:.3} logit_spread {:.4} distinct_argmax {}", st.step, ent, spread, argmaxes.len());
        }
        let idx = st.batch_indices();
        let b: Vec<_> = idx.iter().map(|&i| &images[i]).collect();
        let m = st.train_step(&b).unwrap();
        if st.step % 64 == 0 { println!("  loss g {:.4} l {:.4}", m.global_loss, m.local_loss); }
    }
}
