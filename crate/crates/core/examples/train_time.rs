use std::time::Instant;

use adclr::datasets::{generate, SyntheticSpec};
use adclr::trainer::{TrainConfig, TrainState};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let ds = generate(&SyntheticSpec::default(), 256).unwrap();
    let images = ds.images();
    let mut cfg = TrainConfig::default();
    cfg.views.global_res = a[1].parse().unwrap();
    cfg.views.query_count = a[2].parse().unwrap();
    cfg.head.prototypes = a[3].parse().unwrap();
    let mut st = TrainState::new(cfg, images.len()).unwrap();
    let t = Instant::now();
    for _ in 0..3 {
        let idx = st.batch_indices();
        let b: Vec<_> = idx.iter().map(|&i| &images[i]).collect();
        st.train_step(&b).unwrap();
    }
    println!("{:?}", t.elapsed() / 3);
}
