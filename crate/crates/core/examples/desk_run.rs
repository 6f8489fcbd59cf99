use std::time::Instant;

use adclr::datasets::{generate, SyntheticSpec};
use adclr::encoder::FlowPolicy;
use adclr::eval::*;
use adclr::trainer::{train, RunOptions, TrainConfig, TrainState};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let lambda: f64 = a[1].parse().unwrap();
    let flow = if a[2] == "bi" { FlowPolicy::bidirectional() } else { FlowPolicy::unidirectional() };
    let seed: u64 = a[3].parse().unwrap();
    let epochs: usize = a[4].parse().unwrap();
    let res: usize = a[5].parse().unwrap();
    let ds = generate(&SyntheticSpec::default(), 3000).unwrap();
    let (tr, te) = ds.split(2400).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.loss.lambda = lambda;
    cfg.flow = flow;
    cfg.optim.epochs = epochs.max(1);
    cfg.views.global_res = res;
    cfg.encoder.base_res = res;
    cfg.optim.base_lr = a[6].parse().unwrap();
    let t = Instant::now();
    let mut st = TrainState::new(cfg, tr.len()).unwrap();
    let stop = if epochs == 0 { Some(0) } else { None };
    if epochs == 0 { st.cfg.optim.epochs = 1; }
    let s = train(&mut st, &tr.images(), &RunOptions { verbose: true, stop_at: stop, ..Default::default() }).unwrap();
    eprintln!("train {:?} last {:?}", t.elapsed(), s.last());
    let ex = ExtractConfig { resolution: res, flow };
    let params = &st.pair.teacher;
    let trb = extract_features(&st.net, params, &tr.images(), &tr.labels(), 3, FeatureSource::Cls, &ex).unwrap();
    let teb = extract_features(&st.net, params, &te.images(), &te.labels(), 3, FeatureSource::Cls, &ex).unwrap();
    let knn = knn_probe(&trb, &teb, 20, 0.07).unwrap();
    let lin = linear_probe(&trb, &teb, &LinearProbeConfig::default()).unwrap();
    let masks: Vec<_> = te.samples.iter().map(|s| s.mask.clone()).collect();
    let loc = localization_probe(&st.net, params, &te.images(), &masks, &LocalizationConfig { extract: ex, ..Default::default() }).unwrap();
    println!("lambda={lambda} flow={} seed={seed} knn={:.4} linear={:.4} loc={:.4} time={:?}", a[2], knn.accuracy, lin.accuracy, loc.accuracy, t.elapsed());
}
