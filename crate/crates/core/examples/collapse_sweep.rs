use adclr::collapse::{run_collapse, CollapseConfig};
use adclr::encoder::FlowMode;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: FlowMode = args[0].parse().unwrap();
    let seeds: u64 = args[1].parse().unwrap();
    for pair in &args[2..] {
        let (lr, init) = pair.split_once(',').unwrap();
        let (lr, init): (f64, f64) = (lr.parse().unwrap(), init.parse().unwrap());
        let mut ok = 0;
        let mut line = String::new();
        for seed in 0..seeds {
            let cfg = CollapseConfig { lr, init_std: init, mode, seed, ..CollapseConfig::default() };
            let t = run_collapse(&cfg).unwrap();
            let r = t.last().unwrap();
            ok += t.collapsed() as usize;
            line += &format!(" [{} {:.1e} {:.1e} {:.2}]", r.step, r.loss, r.attn_divergence, r.eff_rank);
        }
        println!("lr={lr} init={init} collapsed={ok}/{seeds}{line}");
    }
}
