//! The pipeline subcommands. Each reads and writes the same checkpoint format:
//!
//! * `train`    — build (or load) a model, optionally rescale γ/W by α, train with ISTA → `baseline` or `sparsified`
//! * `prune`    — drop γ = 0 channels, fold their constants, undo the rescaling → `pruned`
//! * `finetune` — plain SGD on the compact model → `finetuned`
//! * `eval`     — top-1 accuracy, loss, params and flops on the test split
//! * `inspect`  — γ histograms, λ table and a suggested α

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chanprune::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, Stage};
use chanprune::data::{load_cifar10, load_mnist, synth_dataset, Dataset, Split};
use chanprune::graph::{GraphDescription, NetworkGraph};
use chanprune::presets::build_preset_named;
use chanprune::prune::{prune, PruneReport};
use chanprune::sparsify::{
    diagnose, evaluate, rescale_gamma_w, suggest_alpha, train, EvalMetrics, GammaUpdate, IstaConfig, StopReason,
    TrainOptions, Warning,
};
use chanprune::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{DataKind, RunConfig};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const WARNINGS_FILE: &str = "warnings.txt";
pub const REPORT_CSV: &str = "prune_report.csv";
pub const REPORT_TXT: &str = "prune_report.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const INSPECT_FILE: &str = "inspect.txt";

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::io(format!("{what} {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err("writing", path, e))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_err("creating", out, e))
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    read_checkpoint(path).map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset, CliError> {
    let first = &parts[0];
    let (split, classes, dims) = (first.split, first.num_classes, first.dims());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in &parts {
        if p.dims() != dims {
            return Err(CliError::io("data files disagree on image dimensions"));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    let images = Tensor::new(vec![labels.len(), dims.height, dims.width, dims.channels], data)?;
    Ok(Dataset::new(images, labels, classes, split)?)
}

/// Train and test splits, prepared for training: the test split is always
/// standardized with training statistics; the training split is standardized
/// up front unless augmentation is configured, in which case the augmentation
/// pipeline standardizes each batch.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.data;
    let (train_set, test_set) = match d.kind {
        DataKind::Synthetic => {
            let spec = d.synthetic.clone().unwrap_or_default();
            let all = synth_dataset(&spec)?;
            all.split_off_test(d.test_samples.expect("validated"))?
        }
        DataKind::Mnist => (
            load_mnist(d.train_images.as_ref().unwrap(), d.train_labels.as_ref().unwrap(), Split::Train)?,
            load_mnist(d.test_images.as_ref().unwrap(), d.test_labels.as_ref().unwrap(), Split::Test)?,
        ),
        DataKind::Cifar10 => {
            let tr = d.train_files.iter().map(|f| load_cifar10(f, Split::Train)).collect::<Result<Vec<_>, _>>()?;
            let te = d.test_files.iter().map(|f| load_cifar10(f, Split::Test)).collect::<Result<Vec<_>, _>>()?;
            (concat(tr)?, concat(te)?)
        }
    };
    if !d.standardize {
        return Ok((train_set, test_set));
    }
    let stats = train_set.channel_stats()?;
    let test_set = test_set.standardized(&stats)?;
    let train_set = match &d.augment {
        Some(a) if a.standardize => train_set.with_stats(stats),
        _ => train_set.standardized(&stats)?,
    };
    Ok((train_set, test_set))
}

/// The configured model with parameters initialized from `seed`.
pub fn build_model(cfg: &RunConfig, seed: u64) -> Result<NetworkGraph, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    match (&cfg.model.preset, &cfg.model.graph) {
        (Some(p), _) => Ok(build_preset_named(p, &mut rng)?),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| io_err("reading", path, e))?;
            let desc: GraphDescription = serde_json::from_str(&text)
                .map_err(|e| CliError::io(format!("graph description {}: {e}", path.display())))?;
            Ok(NetworkGraph::initialize(&desc, &mut rng)?)
        }
        (None, None) => Err(CliError::usage("model needs `preset` or `graph`")),
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub stage: Stage,
    pub stop: StopReason,
    pub steps: usize,
    pub final_loss: f64,
    pub final_sparsity: f64,
    pub warnings: Vec<Warning>,
}

impl TrainSummary {
    pub fn render(&self) -> String {
        format!(
            "stage: {}\nsteps: {}\nstop: {:?}\nfinal loss: {:.6}\nfinal γ sparsity: {:.4}\ncheckpoint: {}\n",
            self.stage.name(),
            self.steps,
            self.stop,
            self.final_loss,
            self.final_sparsity,
            self.checkpoint.display()
        )
    }
}

fn is_sparsifying(c: &IstaConfig) -> bool {
    c.gamma_update == GammaUpdate::Ista && (c.rho > 0.0 || c.rho_warm.is_some_and(|w| w > 0.0))
}

/// Shared body of `train` and `finetune`.
fn run_training(
    cfg: &RunConfig,
    ista: &IstaConfig,
    mut ckpt: Checkpoint,
    apply_alpha: bool,
    out: &Path,
) -> Result<TrainSummary, CliError> {
    let (train_set, _) = load_data(cfg)?;
    prepare_out(out)?;
    let mut graph = ckpt.graph.clone();
    if apply_alpha && ista.alpha != 1.0 {
        graph = rescale_gamma_w(&graph, ista.alpha)?;
        ckpt.rescale_alpha *= ista.alpha;
    }
    let options = TrainOptions { seed: cfg.seed, augment: cfg.data.augment.clone() };
    let outcome = train(&graph, &train_set, ista, &options)?;
    let warnings = diagnose(&outcome.monitor);
    write_file(&out.join(HISTORY_FILE), outcome.monitor.to_csv())?;
    let warn_text: String = warnings.iter().map(|w| format!("{}\n", w.message())).collect();
    write_file(&out.join(WARNINGS_FILE), warn_text)?;

    let last = outcome.monitor.last().cloned();
    ckpt.graph = outcome.graph;
    ckpt.seed = cfg.seed;
    ckpt.dtype = cfg.checkpoint_dtype;
    ckpt.ista = Some(ista.clone());
    ckpt.history = Some(outcome.monitor);
    ckpt.extra.insert("config".into(), cfg.to_json());
    ckpt.extra.insert("stop".into(), serde_json::to_value(&outcome.stop).expect("serializable"));
    let path = out.join(CHECKPOINT_FILE);
    write_checkpoint(&path, &ckpt)?;
    if let StopReason::Diverged { step, detail } = &outcome.stop {
        return Err(CliError::numerical(format!(
            "training diverged at step {step} ({detail}); last good state saved to {}",
            path.display()
        )));
    }
    Ok(TrainSummary {
        checkpoint: path,
        stage: ckpt.stage,
        stop: outcome.stop,
        steps: outcome.steps,
        final_loss: last.as_ref().map_or(f64::NAN, |r| r.loss),
        final_sparsity: last.as_ref().map_or(0.0, |r| r.sparsity_fraction),
        warnings,
    })
}

/// Steps 1–3: penalties from the graph, optional γ/W rescaling, ISTA training.
/// With `init` the run starts from an existing checkpoint (e.g. a pruned model
/// sparsified further with a larger ρ).
pub fn cmd_train(cfg: &RunConfig, init: Option<&Path>, out: &Path) -> Result<TrainSummary, CliError> {
    let stage = if is_sparsifying(&cfg.train) { Stage::Sparsified } else { Stage::Baseline };
    let mut ckpt = match init {
        Some(p) => {
            let mut c = load(p)?;
            c.stage = stage;
            c
        }
        None => Checkpoint::new(stage, build_model(cfg, cfg.seed)?, cfg.seed),
    };
    ckpt.stage = stage;
    run_training(cfg, &cfg.train, ckpt, true, out)
}

#[derive(Debug, Clone)]
pub struct PruneSummary {
    pub checkpoint: PathBuf,
    pub report: PruneReport,
    pub notes: Vec<String>,
}

/// Steps 4–5: remove γ = 0 channels with constant folding, then undo the
/// γ/W rescaling.
pub fn cmd_prune(checkpoint: &Path, out: &Path) -> Result<PruneSummary, CliError> {
    let mut ckpt = load(checkpoint)?;
    let mut notes = Vec::new();
    if ckpt.stage != Stage::Sparsified {
        notes.push(format!(
            "checkpoint stage is `{}`, not `sparsified`; channels are pruned only where γ is already exactly zero",
            ckpt.stage.name()
        ));
    }
    let (rw, report) = prune(&ckpt.graph)?;
    let mut graph = rw.graph;
    if ckpt.rescale_alpha != 1.0 {
        graph = rescale_gamma_w(&graph, 1.0 / ckpt.rescale_alpha)?;
        notes.push(format!("undid γ/W rescaling by α = {}", ckpt.rescale_alpha));
    }
    if report.requires_finetune {
        notes.push("requires fine-tune: zero-padded consumers make the fold approximate at borders".into());
    }
    prepare_out(out)?;
    write_file(&out.join(REPORT_CSV), report.to_csv())?;
    write_file(&out.join(REPORT_TXT), report.summary())?;
    ckpt.graph = graph;
    ckpt.stage = Stage::Pruned;
    ckpt.rescale_alpha = 1.0;
    ckpt.extra.insert(
        "prune".into(),
        json!({
            "params_before": report.params_before,
            "params_after": report.params_after,
            "flops_before": report.flops_before,
            "flops_after": report.flops_after,
            "requires_finetune": report.requires_finetune,
        }),
    );
    let path = out.join(CHECKPOINT_FILE);
    write_checkpoint(&path, &ckpt)?;
    Ok(PruneSummary { checkpoint: path, report, notes })
}

/// Step 6: regular SGD on the pruned model.
pub fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(TrainSummary, Vec<String>), CliError> {
    let mut ckpt = load(checkpoint)?;
    let mut notes = Vec::new();
    if ckpt.stage != Stage::Pruned {
        notes.push(format!("fine-tuning a `{}` checkpoint (expected `pruned`)", ckpt.stage.name()));
    }
    if ckpt.rescale_alpha != 1.0 {
        notes.push(format!("checkpoint still carries γ/W rescaling α = {}; run prune first", ckpt.rescale_alpha));
    }
    ckpt.stage = Stage::Finetuned;
    let summary = run_training(cfg, &cfg.finetune, ckpt, false, out)?;
    Ok((summary, notes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub stage: Stage,
    pub metrics: EvalMetrics,
    pub params: u64,
    pub flops: u64,
}

impl EvalSummary {
    pub fn to_csv(&self) -> String {
        format!(
            "stage,accuracy,loss,samples,params,flops\n{},{},{},{},{},{}\n",
            self.stage.name(),
            self.metrics.accuracy,
            self.metrics.loss,
            self.metrics.samples,
            self.params,
            self.flops
        )
    }
}

/// Top-1 accuracy and size of a checkpoint on the configured test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalSummary, CliError> {
    let ckpt = load(checkpoint)?;
    let (_, test_set) = load_data(cfg)?;
    let metrics = evaluate(&ckpt.graph, &test_set, cfg.eval.batch_size)?;
    let s =
        EvalSummary { stage: ckpt.stage, metrics, params: ckpt.graph.count_params(), flops: ckpt.graph.count_flops() };
    prepare_out(out)?;
    write_file(&out.join(METRICS_FILE), s.to_csv())?;
    Ok(s)
}

const HIST_EDGES: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

fn histogram(values: &[f64]) -> [usize; 7] {
    let mut h = [0; 7];
    for &v in values {
        let a = v.abs();
        let bin = if a == 0.0 { 0 } else { 1 + HIST_EDGES.iter().take_while(|&&e| a >= e).count() };
        h[bin] += 1;
    }
    h
}

/// Text report of the γ distribution, per-layer penalties and the α heuristic.
/// `mu` and `rho` default to the checkpoint's training configuration.
pub fn cmd_inspect(
    checkpoint: &Path,
    mu: Option<f64>,
    rho: Option<f64>,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let ckpt = load(checkpoint)?;
    let g = &ckpt.graph;
    let ista = ckpt.ista.clone().unwrap_or_default();
    let mu = mu.unwrap_or(ista.mu0);
    let rho = rho.unwrap_or(ista.rho);
    let mut s = String::new();
    let _ = writeln!(s, "stage: {}   seed: {}   rescale α: {}", ckpt.stage.name(), ckpt.seed, ckpt.rescale_alpha);
    let _ = writeln!(s, "params: {}   flops: {}", g.count_params(), g.count_flops());
    let _ = writeln!(s, "\nper-layer penalty λ and γ");
    let _ = writeln!(
        s,
        "{:<22} {:>5} {:>5} {:>12} {:>10} {:>10}   |γ| histogram [0 | <1e-3 | <1e-2 | <1e-1 | <1 | <10 | >=10]",
        "layer", "ch", "zero", "λ", "mean|γ|", "max|γ|"
    );
    for l in g.bn_layers() {
        let layer = g.layer(l);
        let gamma = layer.bn().unwrap().gamma.data();
        let zeros = gamma.iter().filter(|&&v| v == 0.0).count();
        let mean = gamma.iter().map(|v| v.abs()).sum::<f64>() / gamma.len() as f64;
        let max = gamma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lambda = if layer.prunable() {
            let (n, d) = g.penalty_lambda_ratio(l)?;
            format!("{n}/{d}")
        } else {
            "fixed".into()
        };
        let h = histogram(gamma);
        let _ = writeln!(
            s,
            "{:<22} {:>5} {:>5} {:>12} {:>10.4} {:>10.4}   {:?}",
            layer.name(),
            gamma.len(),
            zeros,
            lambda,
            mean,
            max,
            h
        );
    }
    let a = suggest_alpha(g, mu, rho)?;
    let _ = writeln!(s, "\nsuggested α for μ = {mu}, ρ = {rho}: {} ({})", a.alpha, a.reason);
    if let Some(out) = out {
        prepare_out(out)?;
        write_file(&out.join(INSPECT_FILE), &s)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_by_magnitude() {
        let h = histogram(&[0.0, -0.0, 5e-4, -0.005, 0.05, 0.5, -2.0, 20.0]);
        assert_eq!(h, [2, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn sparsifying_requires_ista_and_positive_rho() {
        let c = IstaConfig::default();
        assert!(!is_sparsifying(&c));
        assert!(is_sparsifying(&IstaConfig { rho: 0.1, ..c.clone() }));
        assert!(is_sparsifying(&IstaConfig { rho_warm: Some(0.1), ..c.clone() }));
        assert!(!is_sparsifying(&IstaConfig { rho: 0.1, gamma_update: GammaUpdate::Sgd, ..c }));
    }
}
