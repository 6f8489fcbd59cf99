use std::process::Command;

use adclr::cli::{apply_override, load_config, RunConfig};
use adclr::encoder::FlowMode;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adclr"))
}

#[test]
fn aliases_reach_nested_fields() {
    let cfg = load_config(None, &["lambda=0".into(), "q=4".into(), "flow=bidirectional".into()]).unwrap();
    assert_eq!(cfg.train.loss.lambda, 0.0);
    assert_eq!(cfg.train.views.query_count, 4);
    assert_eq!(cfg.train.flow.mode, FlowMode::Bidirectional);
}

#[test]
fn later_overrides_win_and_file_is_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 4\n[train.loss]\nlambda = 0.25\n").unwrap();
    let cfg = load_config(Some(&path), &[]).unwrap();
    assert_eq!((cfg.seed, cfg.train.seed, cfg.train.loss.lambda), (4, 4, 0.25));
    let cfg = load_config(Some(&path), &["lambda=0.75".into(), "train.loss.lambda=0.5".into()]).unwrap();
    assert_eq!(cfg.train.loss.lambda, 0.5);
}

#[test]
fn unknown_keys_are_rejected_with_the_field_name() {
    let err = load_config(None, &["train.optim.learning_rate=1".into()]).unwrap_err().to_string();
    assert!(err.contains("learning_rate"), "{err}");
    let err = load_config(None, &["train.loss=3".into(), "train.loss.lambda=1".into()]).unwrap_err();
    assert!(err.to_string().contains("section"), "{err}");
    assert!(load_config(None, &["novalue".into()]).is_err());
}

#[test]
fn invalid_values_are_config_errors() {
    let err = load_config(None, &["train.optim.batch_size=0".into()]).unwrap_err();
    assert!(matches!(err, adclr::Error::Config(_)), "{err}");
}

#[test]
fn resolved_config_reproduces_itself() {
    let cfg = load_config(None, &["seed=9".into(), "q=3".into()]).unwrap();
    let mut doc: toml::Table = toml::from_str(&cfg.to_toml()).unwrap();
    apply_override(&mut doc, "seed=9").unwrap();
    let back: RunConfig = toml::Value::Table(doc).try_into().unwrap();
    assert_eq!(back.resolve().unwrap(), cfg);
}

#[test]
fn accounting_command_prints_ratios() {
    let out = bin().args(["accounting"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "3.89");
    let out = bin()
        .args(["accounting", "--set", "accounting.local_count=0", "--set", "accounting.query_count=0"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "2.00");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let zero = bin().args(["collapse", "--steps", "0", "--out", out_dir]).output().unwrap();
    assert_eq!(zero.status.code(), Some(0));
    assert!(String::from_utf8(zero.stdout).unwrap().contains("UNDETERMINED"));
    assert!(dir.path().join("resolved.toml").exists());
    assert!(dir.path().join("collapse_trace.csv").exists());

    let usage = bin().args(["pretrain", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let config = bin().args(["accounting", "--set", "nonsense=1"]).output().unwrap();
    assert_eq!(config.status.code(), Some(1));
    let runtime = bin()
        .args(["probe", "--checkpoint", "/nonexistent/checkpoint.bin", "--out", out_dir])
        .output()
        .unwrap();
    assert_eq!(runtime.status.code(), Some(2));
    let diverged = bin()
        .args(["collapse", "--steps", "50", "--set", "collapse.lr=1e300", "--out", out_dir])
        .output()
        .unwrap();
    assert_eq!(diverged.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverged.stdout));
}

#[test]
fn pretrain_probe_and_attnmap_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        r#"
checkpoint_every = 1
[dataset]
train = 8
test = 6
[dataset.synthetic]
size = 32
[train.encoder]
dim = 8
depth = 1
heads = 2
mlp_hidden = 16
patch = 4
base_res = 16
[train.head]
hidden = 16
bottleneck = 8
prototypes = 16
[train.views]
global_res = 16
query_count = 3
patch = 4
[train.optim]
batch_size = 4
epochs = 2
[eval]
knn_k = 3
[eval.linear]
epochs = 20
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let st = bin().args(["pretrain", "--config", cfg_s, "--out", out_s, "--seed", "3"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["metrics.csv", "checkpoint.bin", "resolved.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    // The resolved snapshot alone reproduces the run.
    let again = dir.path().join("again");
    let resolved = out.join("resolved.toml");
    let st = bin()
        .args(["pretrain", "--config", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(st.status.success());
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(again.join("metrics.csv")).unwrap());

    let ckpt = out.join("checkpoint.bin");
    let st = bin()
        .args(["probe", "--config", cfg_s, "--out", out_s, "--checkpoint", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(out.join("probe.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("knn,"));
    assert!(out.join("features_train.bin").exists());

    for token in ["cls", "raw:2", "query:1"] {
        let st = bin()
            .args(["attnmap", "--config", cfg_s, "--out", out_s, "--checkpoint", ckpt.to_str().unwrap(), "--token", token])
            .output()
            .unwrap();
        assert!(st.status.success(), "{token}: {}", String::from_utf8_lossy(&st.stderr));
        let text = String::from_utf8(st.stdout).unwrap();
        let total: f64 = text.split_whitespace().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-5, "{token}: {total}");
    }
    assert!(out.join("attn_query1.pgm").exists());
    let bad = bin()
        .args(["attnmap", "--config", cfg_s, "--out", out_s, "--checkpoint", ckpt.to_str().unwrap(), "--token", "raw:99"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
