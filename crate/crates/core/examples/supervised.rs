use adclr::cli::load_config;
use adclr::eval::*;
use adclr::numerics::{Graph, Tensor};
use adclr::patchify::{build_views, patchify};
use adclr::trainer::{derived_rng, AdamW, AdamWConfig};
use adclr::objective::Network;
use rand::SeedableRng;

fn main() {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = load_config(None, &overrides).unwrap();
    let (tr, te) = cfg.dataset.load().unwrap();
    let t = &cfg.train;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (net, mut params) = Network::init(t.encoder, t.head, &mut rng).unwrap();
    let w = params.add("clf", Tensor::randn(&[t.encoder.dim, 3], 0.02, &mut rng), true);
    let mut opt = AdamW::new(AdamWConfig::default(), &params);
    let images = tr.images();
    let labels = tr.labels();
    let p = t.encoder.patch;
    for step in 0..(images.len() / 32) * t.optim.epochs {
        let mut grads: Vec<Vec<f64>> = params.iter().map(|(_, _, x)| vec![0.0; x.len()]).collect();
        let mut loss = 0.0;
        for k in 0..32 {
            let i = (step * 32 + k * 7919) % images.len();
            let b = build_views(&images[i], &t.views, &mut derived_rng(0, 3, step as u64, k as u64)).unwrap();
            let v = &b.globals[0];
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let grid = (v.image.height() / p, v.image.width() / p);
            let o = net.encoder.forward(&mut g, &bound, &patchify(&v.image, p).unwrap(), grid, None, t.flow, Default::default()).unwrap();
            let logits = g.matmul(o.cls, bound.var(w)).unwrap();
            let mut target = Tensor::zeros(&[1, 3]);
            target.data_mut()[labels[i]] = 1.0;
            let l = g.soft_cross_entropy(logits, &target, 1.0).unwrap();
            loss += g.value(l).data()[0];
            let gr = g.backward(l).unwrap();
            for (acc, var) in grads.iter_mut().zip(bound.vars()) {
                if let Some(d) = gr.get(*var) {
                    for (a, x) in acc.iter_mut().zip(d) {
                        *a += x / 32.0;
                    }
                }
            }
        }
        opt.step(&mut params, &grads, std::env::var("SUP_LR").map_or(1e-3, |v| v.parse().unwrap()), 0.01).unwrap();
        if step % 75 == 0 {
            eprintln!("step {step} loss {:.4}", loss / 32.0);
        }
    }
    let ex = ExtractConfig { resolution: cfg.eval_resolution(), flow: t.flow };
    let trb = extract_features(&net, &params, &tr.images(), &tr.labels(), 3, FeatureSource::Cls, &ex).unwrap();
    let teb = extract_features(&net, &params, &te.images(), &te.labels(), 3, FeatureSource::Cls, &ex).unwrap();
    let knn = knn_probe(&trb, &teb, 20, 0.07).unwrap();
    let lin = linear_probe(&trb, &teb, &LinearProbeConfig::default()).unwrap();
    println!("supervised {} | knn {:.4} lin {:.4}", overrides.join(" "), knn.accuracy, lin.accuracy);
}
