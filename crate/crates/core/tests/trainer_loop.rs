mod common;

use adclr::numerics::{Graph, Params};
use adclr::trainer::{student_loss, teacher_logits, teacher_targets, train, RunOptions, TrainState};
use adclr::patchify::build_views;
use adclr::trainer::derived_rng;
use common::{bits, tiny_config, tiny_images};

fn params_bits(p: &Params) -> Vec<u64> {
    p.iter().flat_map(|(_, _, t)| bits(t.data())).collect()
}

#[test]
fn same_seed_writes_identical_metrics() {
    let images = tiny_images(8);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut st = TrainState::new(tiny_config(1), images.len()).unwrap();
        let opts = RunOptions { out_dir: Some(d.path().to_path_buf()), ..Default::default() };
        train(&mut st, &images, &opts).unwrap();
    }
    let a = std::fs::read(dirs[0].path().join("metrics.csv")).unwrap();
    let b = std::fs::read(dirs[1].path().join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(text.starts_with("step,epoch,lr,wd,tau_t,m,global_loss,local_loss,total_loss\n"));
}

#[test]
fn different_seeds_differ() {
    let images = tiny_images(8);
    let run = |seed| {
        let mut st = TrainState::new(tiny_config(seed), images.len()).unwrap();
        train(&mut st, &images, &RunOptions::default()).unwrap().metrics
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let images = tiny_images(8);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = TrainState::new(tiny_config(5), images.len()).unwrap();
    train(&mut full, &images, &RunOptions { out_dir: Some(full_dir.path().into()), ..Default::default() }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::new(tiny_config(5), images.len()).unwrap();
    let opts = RunOptions { out_dir: Some(dir.path().into()), stop_at: Some(3), ..Default::default() };
    train(&mut first, &images, &opts).unwrap();
    assert_eq!(first.step, 3);
    let (mut resumed, warnings) = TrainState::load(&dir.path().join("checkpoint.bin"), Some(&tiny_config(5))).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(resumed, first);
    train(&mut resumed, &images, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();

    assert_eq!(params_bits(&resumed.pair.student), params_bits(&full.pair.student));
    assert_eq!(params_bits(&resumed.pair.teacher), params_bits(&full.pair.teacher));
    assert_eq!(bits(&resumed.pair.center), bits(&full.pair.center));
    assert_eq!(
        std::fs::read(dir.path().join("metrics.csv")).unwrap(),
        std::fs::read(full_dir.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn changed_config_warns_on_load() {
    let images = tiny_images(4);
    let dir = tempfile::tempdir().unwrap();
    let mut st = TrainState::new(tiny_config(0), images.len()).unwrap();
    st.save(&dir.path().join("c.bin")).unwrap();
    let mut other = tiny_config(0);
    other.loss.lambda = 0.0;
    let (loaded, warnings) = TrainState::load(&dir.path().join("c.bin"), Some(&other)).unwrap();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("digest"));
    assert_eq!(loaded.cfg, tiny_config(0));
    let _ = train(&mut st, &images, &RunOptions { stop_at: Some(1), ..Default::default() }).unwrap();
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let st = TrainState::new(tiny_config(0), 4).unwrap();
    let path = dir.path().join("c.bin");
    st.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(TrainState::load(&path, None).is_err());
}

#[test]
fn teacher_tracks_analytic_ema_of_student_trajectory() {
    let images = tiny_images(8);
    let mut st = TrainState::new(tiny_config(2), images.len()).unwrap();
    let mut expect: Vec<Vec<f64>> = st.pair.teacher.iter().map(|(_, _, t)| t.data().to_vec()).collect();
    for _ in 0..6 {
        let idx = st.batch_indices();
        let batch: Vec<_> = idx.iter().map(|&i| &images[i]).collect();
        let m = st.train_step(&batch).unwrap().m;
        for (e, (_, _, s)) in expect.iter_mut().zip(st.pair.student.iter()) {
            for (ev, sv) in e.iter_mut().zip(s.data()) {
                *ev = m * *ev + (1.0 - m) * sv;
            }
        }
    }
    for (e, (_, name, t)) in expect.iter().zip(st.pair.teacher.iter()) {
        let diff = e.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{name}: {diff}");
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let images = tiny_images(1);
    let st = TrainState::new(tiny_config(3), 1).unwrap();
    let batch = build_views(&images[0], &st.cfg.views, &mut derived_rng(0, 0, 0, 0)).unwrap();
    let logits = teacher_logits(&st.net, &st.pair.teacher, &batch, st.cfg.flow).unwrap();
    let targets = teacher_targets(&logits, &st.pair.center, &st.pair.query_center, 0.04).unwrap();
    let mut g = Graph::new();
    let teacher_vars = st.pair.teacher.bind_frozen(&mut g);
    let student_vars = st.pair.student.bind(&mut g);
    let parts = student_loss(&mut g, &st.net, &student_vars, &batch, &targets, &st.cfg.loss, st.cfg.flow).unwrap();
    let grads = g.backward(parts.total).unwrap();
    assert!(teacher_vars.vars().iter().all(|&v| !g.is_tracked(v) && grads.get(v).is_none()));
    assert!(student_vars.vars().iter().any(|&v| grads.get(v).is_some()));
}

#[test]
fn non_finite_input_reports_step() {
    let mut images = tiny_images(4);
    images[0].data_mut()[10] = f64::NAN;
    let mut st = TrainState::new(tiny_config(0), images.len()).unwrap();
    st.cfg.views.photometric = false;
    let err = (0..4)
        .find_map(|_| {
            let idx = st.batch_indices();
            let batch: Vec<_> = idx.iter().map(|&i| &images[i]).collect();
            st.train_step(&batch).err()
        })
        .expect("NaN pixel must surface");
    assert!(err.to_string().contains("non-finite"), "{err}");
}

#[test]
fn schedules_hit_their_endpoints() {
    let cfg = tiny_config(0);
    let st = TrainState::new(cfg.clone(), 40).unwrap();
    let s = st.schedules();
    let total = st.total_steps();
    assert_eq!(total, 10 * 3);
    let warm = (0.1 * total as f64).round() as usize;
    assert!((s.lr.at(warm) - cfg.optim.base_lr * 4.0 / 256.0).abs() < 1e-15);
    assert_eq!(s.lr.at(0), 0.0);
    assert!((s.tau_t.at(9) - 0.07).abs() < 1e-15);
    assert!((s.tau_t.at(total - 1) - 0.07).abs() < 1e-15);
    assert!((s.wd.at(0) - 0.04).abs() < 1e-12);
    assert!((s.wd.at(total) - 0.4).abs() < 1e-12);
    assert!((s.momentum.at(0) - 0.996).abs() < 1e-12);
    assert!((s.momentum.at(total) - 1.0).abs() < 1e-12);
}
