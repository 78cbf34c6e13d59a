use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_chanprune");

const CONFIG: &str = r#"
seed = 4
[model]
preset = "mnist_small"
[data]
kind = "synthetic"
test_samples = 100
[data.synthetic]
samples = 500
[train]
rho = 0.2
mu0 = 0.05
max_steps = 40
batch_size = 32
[finetune]
max_steps = 20
batch_size = 32
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn full_pipeline_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, CONFIG);
    let s = |p: &str| d.join(p).display().to_string();

    let o = run(&["train", "--config", &cfg, "--out", &s("sparse")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("stage: sparsified"));
    for f in ["model.ckpt", "history.csv", "warnings.txt"] {
        assert!(d.join("sparse").join(f).is_file(), "{f}");
    }
    let hist = fs::read_to_string(d.join("sparse/history.csv")).unwrap();
    assert!(hist.starts_with("epoch,loss,sparsity_fraction,lasso_term,lr\n"));

    let o = run(&["prune", "--checkpoint", &s("sparse/model.ckpt"), "--out", &s("pruned")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.join("pruned/prune_report.csv")).unwrap();
    assert!(report.starts_with("layer_id,kept,total,params_before,params_after\n"));

    let o = run(&["finetune", "--config", &cfg, "--checkpoint", &s("pruned/model.ckpt"), "--out", &s("ft")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["eval", "--config", &cfg, "--checkpoint", &s("ft/model.ckpt"), "--out", &s("ft")]);
    assert_eq!(code(&o), 0);
    let metrics = fs::read_to_string(d.join("ft/metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,accuracy,loss,samples,params,flops\nfinetuned,"));

    let o = run(&["inspect", "--checkpoint", &s("sparse/model.ckpt")]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("conv1") && text.contains("suggested α"));
}

#[test]
fn seed_flag_and_overrides_change_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, CONFIG);
    let out = |n: &str| d.join(n).display().to_string();
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", &out("a"), "--override", "train.max_steps=10"])), 0);
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", &out("b"), "--override", "train.max_steps=10"])), 0);
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            &cfg,
            "--out",
            &out("c"),
            "--seed",
            "99",
            "--override",
            "train.max_steps=10"
        ])),
        0
    );
    let read = |n: &str| fs::read(d.join(n).join("model.ckpt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad = write_config(d, &format!("{CONFIG}\nunknown_key = 1\n"));
    let o = run(&["train", "--config", &bad, "--out", &d.join("x").display().to_string()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
    let cfg = write_config(d, CONFIG);
    assert_eq!(code(&run(&["train", "--config", &cfg])), 1, "missing output directory");
    assert_eq!(code(&run(&["train", "--config", &cfg, "--override", "train.rho=-1", "--out", "x"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn io_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.join("o").display().to_string();
    assert_eq!(code(&run(&["prune", "--checkpoint", "/nonexistent/model.ckpt", "--out", &out])), 3);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent/run.toml", "--out", &out])), 3);

    let cfg = write_config(d, CONFIG);
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", &out, "--override", "train.max_steps=5"])), 0);
    let ckpt = d.join("o/model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0xff;
    fs::write(&ckpt, &bytes).unwrap();
    let o = run(&["prune", "--checkpoint", &ckpt.display().to_string(), "--out", &d.join("p").display().to_string()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("checksum"));

    let mnist = write_config(
        d,
        r#"
        [model]
        preset = "mnist_small"
        [data]
        kind = "mnist"
        train_images = "missing-images"
        train_labels = "missing-labels"
        test_images = "missing-images"
        test_labels = "missing-labels"
        "#,
    );
    assert_eq!(code(&run(&["train", "--config", &mnist, "--out", &out])), 3);
}

#[test]
fn divergence_exits_2_and_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, CONFIG);
    let out = d.join("div");
    let o = run(&["train", "--config", &cfg, "--out", &out.display().to_string(), "--override", "train.mu0=1e300"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    let ck = chanprune::checkpoint::read_checkpoint(&out.join("model.ckpt")).unwrap();
    assert!(ck.graph.param_keys().into_iter().all(|k| ck.graph.param(k).unwrap().all_finite()));
}

#[test]
fn pruning_all_channels_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, CONFIG);
    let s = |p: &str| d.join(p).display().to_string();
    let o = run(&["train", "--config", &cfg, "--out", &s("huge"), "--override", "train.rho=1e4"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("decrease rho"));
    let o = run(&["prune", "--checkpoint", &s("huge/model.ckpt"), "--out", &s("p")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("conv1"));
}
