use adclr::cli::{load_config, pretrain, probe};
use adclr::trainer::TrainState;

fn main() {
    let mut overrides: Vec<String> = std::env::args().skip(1).collect();
    let init_only = overrides.iter().any(|o| o == "init");
    overrides.retain(|o| o != "init");
    let cfg = load_config(None, &overrides).unwrap();
    let t = std::time::Instant::now();
    let (state, last) = if init_only {
        let (train, _) = cfg.dataset.load().unwrap();
        (TrainState::new(cfg.train.clone(), train.len()).unwrap(), Default::default())
    } else {
        let (state, summary) = pretrain(&cfg, None, false).unwrap();
        let last = *summary.last().unwrap();
        (state, last)
    };
    let r = probe(&cfg, &state).unwrap();
    println!(
        "{} | g {:.3} l {:.3} lnK {:.3} | knn {:.4} lin {:.4} loc {:.4} | {:.0}s",
        overrides.join(" "),
        last.global_loss,
        last.local_loss,
        (state.cfg.head.prototypes as f64).ln(),
        r.knn.accuracy,
        r.linear.accuracy,
        r.localization.accuracy,
        t.elapsed().as_secs_f64()
    );
}
