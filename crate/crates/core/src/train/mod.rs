//! Training loop: sample → augment → heatmap target → loss → clipped Nesterov SGD.
//!
//! Outputs in the fold directory: `checkpoint_best`, `checkpoint_final`, `log.jsonl`,
//! `progress.csv`, `state.json` and, with validation cases, `validation.json`.

pub mod augment;
pub mod checkpoint;
pub mod sample;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{aggregate_report, evaluate_case, EvalReport, DEFAULT_THRESHOLDS};
use crate::heatmap::{bce_topk_loss_and_grad, mse_loss_and_grad, patch_to_heatmap};
use crate::inference::{predict_preprocessed, NetworkModel};
use crate::io;
use crate::nn::optim::{clip_grad_norm, Adam, Optimizer, Sgd};
use crate::nn::{build_network, Act, UNet};
use crate::plan::{LossKind, OptimizerKind, Plan};
use crate::preprocess::PreprocessedCase;
use crate::rng;

pub use augment::{augment, AugmentParams};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use sample::{sample_patch, PatchPair, TrainCase};

pub const CHECKPOINT_BEST: &str = "checkpoint_best";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final";
/// Smoothing of the per-epoch loss used to pick the best checkpoint.
pub const EMA_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub fold: String,
    pub augment: AugmentParams,
}

impl TrainOptions {
    pub fn new(seed: u64, fold: impl Into<String>) -> Self {
        TrainOptions { seed, fold: fold.into(), augment: AugmentParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_mean: f64,
    pub loss_median: f64,
    pub ema_loss: f64,
    pub lr: f64,
    pub grad_norm_mean: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStats {
    pub kind: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub plan_hash: String,
    pub fold: String,
    pub seed: u64,
    /// Named random streams derived from `seed`.
    pub rng_streams: Vec<String>,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub epoch: usize,
    pub iteration: usize,
    pub optimizer: OptimizerStats,
    pub best_epoch: usize,
    pub best_ema_loss: f64,
    pub checkpoint_best: String,
    pub checkpoint_final: String,
    pub train_loss: Vec<f64>,
    pub validation_mre: Option<f64>,
}

/// Written next to the checkpoints when a step produces a non-finite loss.
#[derive(Debug, Clone, Serialize)]
struct Diagnostics {
    epoch: usize,
    iteration: usize,
    lr: f64,
    loss: f64,
    cases: Vec<String>,
    non_finite_params: usize,
    max_abs_param: f64,
    last_grad_norm: f64,
}

struct StepOutcome {
    loss: f64,
    grad_norm: f64,
    cases: Vec<String>,
}

/// One optimizer step on a freshly sampled batch; `grads` is overwritten.
#[allow(clippy::too_many_arguments)]
fn train_step<R: Rng>(
    net: &UNet,
    params: &mut [f32],
    grads: &mut [f32],
    opt: &mut Optimizer,
    cases: &[TrainCase],
    plan: &Plan,
    aug: &AugmentParams,
    lr: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    grads.iter_mut().for_each(|g| *g = 0.0);
    let b = plan.batch_size;
    let c = plan.class_count();
    let mut loss = 0.0;
    let mut ids = Vec::with_capacity(b);
    for _ in 0..b {
        let tc = &cases[rng.gen_range(0..cases.len())];
        ids.push(tc.case.case_id.clone());
        let p = sample_patch(tc, plan.patch_size, plan.oversample_foreground_fraction, rng);
        let (image, labels) = augment(&p.image, &p.labels, p.shape, aug, rng);
        let target = patch_to_heatmap(&labels, p.shape, c, plan.edt_radius_voxels)?;
        let (logits, tape) = net.forward_train(params, &Act::from_data(p.shape, 1, image));
        let cm = logits.to_channel_major();
        let (l, mut g) = match plan.loss {
            LossKind::BceTopk => bce_topk_loss_and_grad(&cm, &target, plan.topk_percent)?,
            LossKind::Mse => mse_loss_and_grad(&cm, &target)?,
        };
        loss += l / b as f64;
        g.iter_mut().for_each(|v| *v /= b as f32);
        net.backward(params, tape, &Act::from_channel_major(p.shape, c, &g), grads);
    }
    if !loss.is_finite() {
        return Ok(StepOutcome { loss, grad_norm: f64::NAN, cases: ids });
    }
    let grad_norm = clip_grad_norm(grads, plan.learning_rate.grad_clip_norm);
    opt.step(params, grads, lr);
    Ok(StepOutcome { loss, grad_norm, cases: ids })
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn checkpoint(net: &UNet, plan: &Plan, params: &[f32], opt: &Optimizer, epoch: usize, iteration: usize) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            spec: net.spec.clone(),
            plan_hash: plan.hash(),
            classes: plan.classes.clone(),
            epoch,
            iteration,
            param_count: params.len(),
            has_velocity: true,
        },
        params: params.to_vec(),
        velocity: Some(opt.momentum_buffer().to_vec()),
    }
}

/// Predicts every case on its preprocessed grid and scores against its world landmarks (mm).
pub fn validate(model: &NetworkModel, plan: &Plan, cases: &[PreprocessedCase]) -> Result<EvalReport> {
    let mut evals = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = predict_preprocessed(model, &case.image, plan, &case.case_id)?;
        evals.push(evaluate_case(&case.landmarks, &pred.landmarks, None, 1.0)?);
    }
    aggregate_report(evals, &plan.classes, &DEFAULT_THRESHOLDS, "mm")
}

/// Trains one fold and writes its artifacts to `out_dir`.
pub fn train(
    plan: &Plan,
    train_cases: Vec<PreprocessedCase>,
    val_cases: &[PreprocessedCase],
    opts: &TrainOptions,
    out_dir: &Path,
) -> Result<TrainState> {
    plan.validate()?;
    if train_cases.len() < 2 {
        return Err(Error::Config(format!("training needs ≥ 2 cases, got {}", train_cases.len())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("log.jsonl");
    let progress_path = out_dir.join("progress.csv");
    for p in [&log_path, &progress_path] {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    append_line(&progress_path, "epoch,loss_mean,loss_median,ema_loss,lr,grad_norm_mean,seconds")?;

    let (net, mut params) = build_network(plan, plan.class_count(), opts.seed)?;
    let lr_cfg = &plan.learning_rate;
    let mut opt = match lr_cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(params.len(), lr_cfg.momentum, lr_cfg.weight_decay)),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(params.len(), lr_cfg.momentum, lr_cfg.weight_decay)),
    };
    let mut grads = vec![0.0f32; params.len()];
    let train_ids: Vec<String> = train_cases.iter().map(|c| c.case_id.clone()).collect();
    let cases: Vec<TrainCase> = train_cases.into_iter().map(TrainCase::new).collect();
    let total = plan.epochs * plan.iterations_per_epoch;
    log::info!("training fold {} on {} cases: {} parameters, {} steps", opts.fold, cases.len(), params.len(), total);

    let mut state = TrainState {
        plan_hash: plan.hash(),
        fold: opts.fold.clone(),
        seed: opts.seed,
        rng_streams: vec!["network_init".into(), "train_iter/<step>".into()],
        train_cases: train_ids,
        val_cases: val_cases.iter().map(|c| c.case_id.clone()).collect(),
        epoch: 0,
        iteration: 0,
        optimizer: OptimizerStats {
            kind: opt.kind().into(),
            momentum: lr_cfg.momentum,
            weight_decay: lr_cfg.weight_decay,
            velocity_norm: 0.0,
        },
        best_epoch: 0,
        best_ema_loss: f64::INFINITY,
        checkpoint_best: CHECKPOINT_BEST.into(),
        checkpoint_final: CHECKPOINT_FINAL.into(),
        train_loss: Vec::with_capacity(plan.epochs),
        validation_mre: None,
    };
    let mut ema: Option<f64> = None;
    let mut last_grad_norm = 0.0;
    for epoch in 0..plan.epochs {
        let t0 = Instant::now();
        let mut losses = Vec::with_capacity(plan.iterations_per_epoch);
        let mut gnorm = 0.0;
        let mut lr = 0.0;
        for _ in 0..plan.iterations_per_epoch {
            let step = state.iteration;
            lr = lr_cfg.lr_at(step, total);
            let mut rng = rng::indexed_stream(opts.seed, "train_iter", step as u64);
            let out = train_step(&net, &mut params, &mut grads, &mut opt, &cases, plan, &opts.augment, lr, &mut rng)?;
            if !out.loss.is_finite() {
                let diag = Diagnostics {
                    epoch,
                    iteration: step,
                    lr,
                    loss: out.loss,
                    cases: out.cases,
                    non_finite_params: params.iter().filter(|p| !p.is_finite()).count(),
                    max_abs_param: params.iter().fold(0.0f64, |m, p| m.max(p.abs() as f64)),
                    last_grad_norm,
                };
                let path = out_dir.join("diagnostics.json");
                io::write_json(&path, &diag)?;
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, iteration {step}; diagnostics in {}",
                    path.display()
                )));
            }
            last_grad_norm = out.grad_norm;
            gnorm += out.grad_norm;
            losses.push(out.loss);
            state.iteration += 1;
        }
        let n = losses.len().max(1) as f64;
        let loss_mean = losses.iter().sum::<f64>() / n;
        let e = match ema {
            None => loss_mean,
            Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * loss_mean,
        };
        ema = Some(e);
        state.epoch = epoch + 1;
        state.train_loss.push(loss_mean);
        if e < state.best_ema_loss {
            state.best_ema_loss = e;
            state.best_epoch = epoch;
            checkpoint(&net, plan, &params, &opt, state.epoch, state.iteration).save(&out_dir.join(CHECKPOINT_BEST))?;
        }
        let rec = EpochRecord {
            epoch,
            loss_mean,
            loss_median: median(&losses),
            ema_loss: e,
            lr,
            grad_norm_mean: gnorm / n,
            seconds: t0.elapsed().as_secs_f64(),
        };
        append_line(&log_path, &serde_json::to_string(&rec).map_err(|e| Error::json(&log_path, e))?)?;
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{:.6},{:.6},{:.6},{:.6e},{:.4},{:.2}",
            rec.epoch, rec.loss_mean, rec.loss_median, rec.ema_loss, rec.lr, rec.grad_norm_mean, rec.seconds
        );
        append_line(&progress_path, &row)?;
        log::info!("epoch {epoch}: loss {loss_mean:.5} (ema {e:.5}), lr {lr:.2e}, {:.1}s", rec.seconds);
    }
    checkpoint(&net, plan, &params, &opt, state.epoch, state.iteration).save(&out_dir.join(CHECKPOINT_FINAL))?;
    state.optimizer.velocity_norm = crate::nn::optim::grad_norm(opt.momentum_buffer());

    if !val_cases.is_empty() {
        let model = NetworkModel { net, params };
        let report = validate(&model, plan, val_cases)?;
        log::info!("fold {} validation MRE {:.3} mm", opts.fold, report.mre);
        state.validation_mre = Some(report.mre);
        io::write_json(&out_dir.join("validation.json"), &report)?;
    }
    io::write_json(&out_dir.join("state.json"), &state)?;
    Ok(state)
}

pub fn checkpoint_path(fold_dir: &Path, best: bool) -> PathBuf {
    fold_dir.join(if best { CHECKPOINT_BEST } else { CHECKPOINT_FINAL })
}
