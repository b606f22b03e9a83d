//! Adam training loop with margin-aware weighting and early stopping.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    batch_objective, LossBreakdown, LossMode, LossWeights, NoiseSource, OmegaSource,
};
use crate::margins::{
    feature_margins, kendall_tau, logit_margin, margin_weight, neural_collapse_index,
    MarginNormalizer, MarginParams, PNorm,
};
use crate::model::{self, ModelDims, ModelParams, Pooling, SlideForward};
use crate::numerics::RngState;
use crate::stats;
use crate::synthdata::PatchBag;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
/// Window for the trailing mean ± std of validation accuracy.
pub const TAIL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub margin_params: MarginParams,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub n_classes: usize,
    pub hidden: usize,
    pub latent: usize,
    pub attn_hidden: usize,
    pub pooling: Pooling,
    pub feature_norm: PNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 100,
            max_epochs: 500,
            batch_size: 8,
            loss_weights: LossWeights::default(),
            margin_params: MarginParams::default(),
            seed: 0,
            loss_mode: LossMode::CeConPf,
            n_classes: d.n_classes,
            hidden: d.hidden,
            latent: d.latent,
            attn_hidden: d.attn_hidden,
            pooling: Pooling::Attention,
            feature_norm: PNorm::L2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "patience, max_epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if self.n_classes < 2 || self.hidden == 0 || self.latent == 0 || self.attn_hidden == 0 {
            return Err(Error::Config(
                "model needs >= 2 classes and non-zero widths".into(),
            ));
        }
        self.loss_weights.validate()?;
        let mp = self.margin_params;
        margin_weight(0.5, mp.gamma, mp.tau_m, mp.kappa)?;
        Ok(())
    }

    pub fn dims(&self, in_dim: usize) -> ModelDims {
        ModelDims {
            in_dim,
            hidden: self.hidden,
            latent: self.latent,
            attn_hidden: self.attn_hidden,
            n_classes: self.n_classes,
        }
    }

    /// λs after masking out the terms the loss mode excludes.
    pub fn effective_weights(&self) -> LossWeights {
        self.loss_weights.masked(self.loss_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-step breakdown over the epoch.
    pub train_loss: LossBreakdown,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_mean_d_out: f64,
    pub val_kendall_tau: Option<f64>,
    pub val_neural_collapse: Option<f64>,
    /// Mean ω of misclassified / correctly classified training bags at the
    /// start of the epoch.
    pub omega_misclassified: Option<f64>,
    pub omega_correct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub tail_mean_val_accuracy: f64,
    pub tail_std_val_accuracy: f64,
}

impl RunHistory {
    /// NDJSON: one header line (carrying `header`), then one record per epoch,
    /// then a summary line.
    pub fn write_ndjson<W: Write>(&self, mut w: W, header: &serde_json::Value) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(header)?)?;
        for e in &self.epochs {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        let summary = serde_json::json!({
            "stopping_epoch": self.stopping_epoch,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "tail_mean_val_accuracy": self.tail_mean_val_accuracy,
            "tail_std_val_accuracy": self.tail_std_val_accuracy,
        });
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }

    pub fn save_ndjson(&self, path: &Path, header: &serde_json::Value) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ndjson(f, header)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Softmax probabilities per bag.
    pub scores: Vec<Vec<f64>>,
}

pub fn forward_all(params: &ModelParams, bags: &[PatchBag]) -> Result<Vec<SlideForward>> {
    bags.par_iter()
        .map(|b| model::forward(&b.patches, params))
        .collect()
}

/// Accuracy and confusion against each bag's observed label.
pub fn evaluate(params: &ModelParams, bags: &[PatchBag]) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(Error::Empty);
    }
    let k = params.dims.n_classes;
    let fwd = forward_all(params, bags)?;
    let mut confusion = vec![vec![0; k]; k];
    let mut predictions = Vec::with_capacity(bags.len());
    let mut scores = Vec::with_capacity(bags.len());
    let mut correct = 0;
    for (f, b) in fwd.iter().zip(bags) {
        if b.label >= k {
            return Err(Error::Label(format!("label {} with {k} classes", b.label)));
        }
        let (pred, _) = logit_margin(&f.logits)?;
        confusion[b.label][pred] += 1;
        correct += usize::from(pred == b.label);
        predictions.push(pred);
        scores.push(model::softmax(&f.logits));
    }
    Ok(EvalReport {
        accuracy: correct as f64 / bags.len() as f64,
        confusion,
        labels: bags.iter().map(|b| b.label).collect(),
        predictions,
        scores,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Validation-side diagnostics for one set of forwards.
struct ValStats {
    accuracy: f64,
    mean_d_out: f64,
    kendall: Option<f64>,
    collapse: Option<f64>,
}

fn validation_stats(params: &ModelParams, bags: &[PatchBag], norm: PNorm) -> Result<ValStats> {
    let fwd = forward_all(params, bags)?;
    let mut d_out = Vec::with_capacity(bags.len());
    let mut d_feat = Vec::with_capacity(bags.len());
    let mut correct = 0;
    for (f, b) in fwd.iter().zip(bags) {
        let (pred, d) = logit_margin(&f.logits)?;
        correct += usize::from(pred == b.label);
        d_out.push(d);
        d_feat.push(feature_margins(&f.embedding, &params.head_w, &params.head_b, norm)?.d_feat);
    }
    let embeddings: Vec<Vec<f64>> = fwd.into_iter().map(|f| f.embedding).collect();
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    Ok(ValStats {
        accuracy: correct as f64 / bags.len() as f64,
        mean_d_out: stats::mean(&d_out),
        kendall: kendall_tau(&d_feat, &d_out).ok(),
        collapse: neural_collapse_index(&embeddings, &labels).ok(),
    })
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut out = steps.first().copied().unwrap_or_default();
    out.ce = steps.iter().map(|s| s.ce).sum::<f64>() / n;
    out.con = steps.iter().map(|s| s.con).sum::<f64>() / n;
    out.pf = steps.iter().map(|s| s.pf).sum::<f64>() / n;
    out.total = steps.iter().map(|s| s.total).sum::<f64>() / n;
    out.mean_omega = steps.iter().map(|s| s.mean_omega).sum::<f64>() / n;
    out
}

fn check_bags(bags: &[PatchBag], dims: &ModelDims, what: &str) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    for b in bags {
        if b.label >= dims.n_classes {
            return Err(Error::Label(format!(
                "{what} label {} with {} classes",
                b.label, dims.n_classes
            )));
        }
        if b.patches.is_empty() {
            return Err(Error::EmptyBag);
        }
        if b.patches.iter().any(|p| p.len() != dims.in_dim) {
            return Err(Error::dim(format!(
                "{what} patch width differs from {}",
                dims.in_dim
            )));
        }
    }
    Ok(())
}

/// Train from a seeded initialization; returns the best-validation checkpoint.
pub fn train(
    cfg: &TrainConfig,
    train_bags: &[PatchBag],
    val_bags: &[PatchBag],
) -> Result<(ModelParams, RunHistory)> {
    cfg.validate()?;
    let in_dim = train_bags
        .first()
        .map_or(0, |b| b.patches.first().map_or(0, Vec::len));
    let dims = cfg.dims(in_dim);
    check_bags(train_bags, &dims, "training")?;
    check_bags(val_bags, &dims, "validation")?;
    let mut init_rng = RngState::with_stream(cfg.seed, INIT_STREAM);
    let params = ModelParams::init(dims, cfg.pooling, &mut init_rng);
    train_from(cfg, params, train_bags, val_bags)
}

/// Train starting from `params`.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: ModelParams,
    train_bags: &[PatchBag],
    val_bags: &[PatchBag],
) -> Result<(ModelParams, RunHistory)> {
    cfg.validate()?;
    let weights = cfg.effective_weights();
    let shuffle_root = RngState::with_stream(cfg.seed, SHUFFLE_STREAM);
    let noise_root = RngState::with_stream(cfg.seed, NOISE_STREAM);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut best = (params.clone(), f64::NEG_INFINITY, 0usize);
    // patience counts from the last strict improvement
    let mut improved_at = 0usize;
    let mut epochs = Vec::new();
    let mut step = 0u64;
    let mut stopping_epoch = 0;

    for epoch in 0..cfg.max_epochs {
        stopping_epoch = epoch;
        // frozen margin constants and ω statistics for this epoch
        let fwd = forward_all(&params, train_bags)?;
        let margins: Vec<(usize, f64)> = fwd
            .iter()
            .map(|f| logit_margin(&f.logits))
            .collect::<Result<_>>()?;
        let d_outs: Vec<f64> = margins.iter().map(|m| m.1).collect();
        let normalizer = MarginNormalizer::fit(&d_outs);
        let mp = cfg.margin_params;
        let (mut om_bad, mut om_good) = (Vec::new(), Vec::new());
        let mut train_correct = 0;
        for ((pred, d), b) in margins.iter().zip(train_bags) {
            let w = margin_weight(normalizer.normalize(*d), mp.gamma, mp.tau_m, mp.kappa)?;
            if *pred == b.label {
                train_correct += 1;
                om_good.push(w);
            } else {
                om_bad.push(w);
            }
        }
        drop(fwd);

        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        shuffle_root.derive(epoch as u64).shuffle(&mut order);
        let mut steps = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let bags: Vec<&[Vec<f64>]> = chunk
                .iter()
                .map(|i| train_bags[*i].patches.as_slice())
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|i| train_bags[*i].label).collect();
            let res = batch_objective(
                &params,
                &bags,
                &labels,
                OmegaSource::Margin {
                    normalizer,
                    params: mp,
                },
                &weights,
                NoiseSource::Sample(noise_root.derive(step)),
            );
            let res = match res {
                Ok(r) => r,
                Err(e) => {
                    let blown = bags.iter().any(|b| {
                        model::forward(b, &params)
                            .map_or(true, |f| f.embedding.iter().any(|v| !v.is_finite()))
                    });
                    if blown {
                        return Err(Error::Diverged {
                            epoch,
                            last_finite: Box::new(params),
                        });
                    }
                    return Err(e);
                }
            };
            step += 1;
            let g = res.grad.to_flat();
            if !res.breakdown.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    last_finite: Box::new(params),
                });
            }
            let last = flat.clone();
            adam.step(&mut flat, &g, cfg);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    last_finite: Box::new(params.with_flat(&last)?),
                });
            }
            params.set_flat(&flat)?;
            steps.push(res.breakdown);
        }

        let val = validation_stats(&params, val_bags, cfg.feature_norm)?;
        let mean_or_none = |v: &[f64]| (!v.is_empty()).then(|| stats::mean(v));
        epochs.push(EpochRecord {
            epoch,
            train_loss: mean_breakdown(&steps),
            train_accuracy: train_correct as f64 / train_bags.len() as f64,
            val_accuracy: val.accuracy,
            val_mean_d_out: val.mean_d_out,
            val_kendall_tau: val.kendall,
            val_neural_collapse: val.collapse,
            omega_misclassified: mean_or_none(&om_bad),
            omega_correct: mean_or_none(&om_good),
        });
        // ties move the checkpoint to the later, longer-trained epoch
        if val.accuracy > best.1 {
            improved_at = epoch;
        }
        if val.accuracy >= best.1 {
            best = (params.clone(), val.accuracy, epoch);
        }
        if epoch - improved_at >= cfg.patience {
            break;
        }
    }

    let accs: Vec<f64> = epochs.iter().map(|e| e.val_accuracy).collect();
    let tail = &accs[accs.len().saturating_sub(TAIL_WINDOW)..];
    let history = RunHistory {
        stopping_epoch,
        best_epoch: best.2,
        best_val_accuracy: best.1,
        tail_mean_val_accuracy: stats::mean(tail),
        tail_std_val_accuracy: stats::std_dev(tail),
        epochs,
    };
    Ok((best.0, history))
}
