//! Cross-entropy, supervised contrastive and Perturbation Fidelity losses,
//! each with a hand-derived gradient, and the margin-weighted fusion of the
//! three into one training objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margins::{logit_margin, margin_weight, MarginNormalizer, MarginParams};
use crate::model::{self, softmax, ModelParams, SlideForward};
use crate::numerics::{self, axpy, covariance, dot, norm2, Matrix, RngState};

/// Diagonal jitter added to the mini-batch feature covariance.
pub const COVARIANCE_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_con: f64,
    pub lambda_pf: f64,
    pub tau_con: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Drop `j = i` from the contrastive sums (the usual SupCon variant).
    pub supcon_exclude_self: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 0.7,
            lambda_con: 0.2,
            lambda_pf: 0.1,
            tau_con: 0.5,
            alpha: 0.5,
            beta: 0.1,
            supcon_exclude_self: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_con", self.lambda_con),
            ("lambda_pf", self.lambda_pf),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.tau_con > 0.0) {
            return Err(Error::Parameter(format!(
                "tau_con must be > 0, got {}",
                self.tau_con
            )));
        }
        Ok(())
    }

    /// Zero out the λ of every term the mode leaves out.
    pub fn masked(&self, mode: LossMode) -> Self {
        let mut w = *self;
        match mode {
            LossMode::Ce => {
                w.lambda_con = 0.0;
                w.lambda_pf = 0.0;
            }
            LossMode::CeCon => w.lambda_pf = 0.0,
            LossMode::CeConPf => {}
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[value(name = "ce")]
    Ce,
    #[value(name = "ce_con")]
    CeCon,
    #[value(name = "ce_con_pf")]
    CeConPf,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Ce, LossMode::CeCon, LossMode::CeConPf];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::CeCon => "ce_con",
            LossMode::CeConPf => "ce_con_pf",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------- cross-entropy

fn onehot_index(row: &[f64]) -> Result<usize> {
    let ones = row.iter().filter(|v| **v == 1.0).count();
    let zeros = row.iter().filter(|v| **v == 0.0).count();
    if ones != 1 || ones + zeros != row.len() {
        return Err(Error::Label(format!("row {row:?} is not one-hot")));
    }
    Ok(row.iter().position(|v| *v == 1.0).unwrap())
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Batch-summed cross-entropy against one-hot labels.
pub fn cross_entropy(logits: &[Vec<f64>], onehot: &[Vec<f64>]) -> Result<f64> {
    if logits.len() != onehot.len() || logits.is_empty() {
        return Err(Error::dim(
            "logits and labels must be non-empty and equally long",
        ));
    }
    let labels = onehot
        .iter()
        .map(|r| onehot_index(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(cross_entropy_terms(logits, &labels)?.0.iter().sum())
}

/// Per-sample `−log softmax(l)[y]` and its gradient with respect to the logits.
pub fn cross_entropy_terms(
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut terms = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    for (l, y) in logits.iter().zip(labels) {
        if *y >= l.len() {
            return Err(Error::Label(format!(
                "label {y} out of range for {} classes",
                l.len()
            )));
        }
        terms.push(log_sum_exp(l) - l[*y]);
        let mut g = softmax(l);
        g[*y] -= 1.0;
        grads.push(g);
    }
    Ok((terms, grads))
}

// ---------------------------------------------------------------- contrastive

fn unit_vectors(features: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(features.len());
    let mut norms = Vec::with_capacity(features.len());
    for v in features {
        let n = norm2(v);
        if !(n > 0.0) {
            return Err(Error::CosineUndefined);
        }
        units.push(v.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

/// Back through `n = v/‖v‖`: `(I − n nᵀ) g / ‖v‖`.
fn normalize_backward(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(unit, g);
    g.iter()
        .zip(unit)
        .map(|(gi, ni)| (gi - proj * ni) / norm)
        .collect()
}

/// Supervised contrastive loss over cosine similarities at temperature `tau`.
///
/// With `exclude_self = false` both sums run over every `j`, including `i`.
pub fn supcon_loss(
    features: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    exclude_self: bool,
) -> Result<f64> {
    let w = vec![1.0; features.len()];
    Ok(supcon_terms(features, labels, tau, exclude_self, &w)?
        .0
        .iter()
        .sum())
}

/// Per-anchor contrastive terms (each already carrying the `1/N`) and the
/// gradient of `Σ weights_i · term_i` with respect to every feature vector.
pub fn supcon_terms(
    features: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    exclude_self: bool,
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!(
            "contrastive temperature must be > 0, got {tau}"
        )));
    }
    let n = features.len();
    if n < 2 || labels.len() != n || weights.len() != n {
        return Err(Error::dim(
            "contrastive loss needs N >= 2 matched features and labels",
        ));
    }
    let (units, norms) = unit_vectors(features)?;
    let d = units[0].len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = dot(&units[i], &units[j]) / tau;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let mut terms = vec![0.0; n];
    let mut d_units = vec![vec![0.0; d]; n];
    for i in 0..n {
        let in_all = |j: usize| !(exclude_self && j == i);
        let in_pos = |j: usize| in_all(j) && labels[j] == labels[i];
        if !(0..n).any(in_pos) {
            continue;
        }
        let m = (0..n)
            .filter(|j| in_all(*j))
            .map(|j| sim[i][j])
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..n)
            .map(|j| {
                if in_all(j) {
                    (sim[i][j] - m).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let all: f64 = e.iter().sum();
        let pos: f64 = (0..n).filter(|j| in_pos(*j)).map(|j| e[j]).sum();
        terms[i] = -(pos.ln() - all.ln()) / n as f64;
        // d(w_i · term_i)/d sim_ij = −(w_i/N)(q_ij − p_ij)
        let scale = weights[i] / n as f64;
        for j in 0..n {
            if !in_all(j) {
                continue;
            }
            let p = e[j] / all;
            let q = if in_pos(j) { e[j] / pos } else { 0.0 };
            let g = -scale * (q - p) / tau;
            if g == 0.0 {
                continue;
            }
            axpy(g, &units[j], &mut d_units[i]);
            axpy(g, &units[i], &mut d_units[j]);
        }
    }
    let grads = (0..n)
        .map(|i| normalize_backward(&units[i], norms[i], &d_units[i]))
        .collect();
    Ok((terms, grads))
}

// ---------------------------------------------------------------- fidelity

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm2(a), norm2(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::CosineUndefined);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `T = (1 + cos(v, v′)) / 2`.
pub fn tissue_compat(v: &[f64], v_pert: &[f64]) -> Result<f64> {
    Ok(0.5 * (1.0 + cosine(v, v_pert)?))
}

/// `F = |⟨ψ(v), ψ(v′)⟩| · T(v, v′)` with ψ the L2 normalization.
pub fn fidelity(v: &[f64], v_pert: &[f64]) -> Result<f64> {
    let c = cosine(v, v_pert)?;
    Ok(fidelity_from_cos(c))
}

fn fidelity_from_cos(c: f64) -> f64 {
    c.abs() * 0.5 * (1.0 + c)
}

fn fidelity_dcos(c: f64) -> f64 {
    let s = if c >= 0.0 { 1.0 } else { -1.0 };
    s * 0.5 * (1.0 + 2.0 * c)
}

/// Structure tensor `S = g gᵀ`.
pub fn structure_tensor(g: &[f64]) -> Result<Matrix> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite sensitivity vector".into()));
    }
    Ok(Matrix::outer(g, g))
}

/// Principal eigenvector of `S = g gᵀ` scaled by `√tr S`, oriented along `g`.
/// For the rank-one tensor this is `S g / ‖g‖² = g`.
pub fn structure_direction(s: &Matrix, g: &[f64]) -> Result<Vec<f64>> {
    let gg = dot(g, g);
    if gg == 0.0 {
        return Ok(vec![0.0; g.len()]);
    }
    Ok(s.matvec(g)?.into_iter().map(|v| v / gg).collect())
}

#[derive(Debug, Clone)]
pub struct PerturbationContext {
    /// Sensitivity direction at the feature (top-logit gradient).
    pub grad: Vec<f64>,
    /// Mini-batch feature covariance.
    pub sigma: Matrix,
    pub rng: RngState,
}

/// `v′ = v + α·u(S) + β·n`, `n ~ N(0, Σ)`.
pub fn perturb(
    v: &[f64],
    ctx: &mut PerturbationContext,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if ctx.grad.len() != v.len() || ctx.sigma.rows() != v.len() {
        return Err(Error::dim(
            "perturbation context does not match feature dimension",
        ));
    }
    let s = structure_tensor(&ctx.grad)?;
    let dir = structure_direction(&s, &ctx.grad)?;
    let mut out = v.to_vec();
    axpy(alpha, &dir, &mut out);
    if beta != 0.0 {
        let factor = noise_factor(&ctx.sigma)?;
        let n = numerics::sample_with_factor(&vec![0.0; v.len()], &factor, &mut ctx.rng);
        axpy(beta, &n, &mut out);
    }
    Ok(out)
}

fn noise_factor(sigma: &Matrix) -> Result<Matrix> {
    numerics::cholesky_psd(sigma, COVARIANCE_JITTER)
}

/// Empirical batch covariance; falls back to its diagonal when the batch is
/// too small for a full-rank estimate (`N < d + 1`).
pub fn batch_covariance(features: &[Vec<f64>]) -> Result<Matrix> {
    let d = features.first().map_or(0, Vec::len);
    if features.len() < 2 {
        return Ok(Matrix::zeros(d, d));
    }
    let cov = covariance(features)?;
    if features.len() < d + 1 {
        let diag: Vec<f64> = (0..d).map(|k| cov[(k, k)]).collect();
        return Ok(Matrix::diag(&diag));
    }
    Ok(cov)
}

/// Perturbation Fidelity loss: mean over ordered off-diagonal pairs.
pub fn pf_loss(features: &[Vec<f64>], labels: &[usize], perturbed: &[Vec<f64>]) -> Result<f64> {
    let w = vec![1.0; features.len()];
    Ok(pf_terms(features, labels, perturbed, &w)?
        .terms
        .iter()
        .sum())
}

pub struct PfTerms {
    /// Each anchor's share `(1/(N(N−1))) Σ_{j≠i} penalty(i, j)`.
    pub terms: Vec<f64>,
    pub d_features: Vec<Vec<f64>>,
    pub d_perturbed: Vec<Vec<f64>>,
}

/// PF terms and gradients of `Σ weights_i · term_i`.
pub fn pf_terms(
    features: &[Vec<f64>],
    labels: &[usize],
    perturbed: &[Vec<f64>],
    weights: &[f64],
) -> Result<PfTerms> {
    let n = features.len();
    if n < 2 || perturbed.len() != n || labels.len() != n || weights.len() != n {
        return Err(Error::dim(
            "PF loss needs N >= 2 and matching features, labels, perturbations",
        ));
    }
    let (u, un) = unit_vectors(features)?;
    let (p, pn) = unit_vectors(perturbed)?;
    let d = u[0].len();
    let norm = 1.0 / (n * (n - 1)) as f64;
    let mut terms = vec![0.0; n];
    let mut du = vec![vec![0.0; d]; n];
    let mut dp = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = dot(&u[i], &p[j]).clamp(-1.0, 1.0);
            let f = fidelity_from_cos(c);
            let same = labels[i] == labels[j];
            terms[i] += norm * if same { 1.0 - f } else { f };
            let g = weights[i]
                * norm
                * if same {
                    -fidelity_dcos(c)
                } else {
                    fidelity_dcos(c)
                };
            axpy(g, &p[j], &mut du[i]);
            axpy(g, &u[i], &mut dp[j]);
        }
    }
    Ok(PfTerms {
        terms,
        d_features: (0..n)
            .map(|i| normalize_backward(&u[i], un[i], &du[i]))
            .collect(),
        d_perturbed: (0..n)
            .map(|j| normalize_backward(&p[j], pn[j], &dp[j]))
            .collect(),
    })
}

// ---------------------------------------------------------------- fusion

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: Vec<f64>,
    pub con: Vec<f64>,
    pub pf: Vec<f64>,
}

/// `Σ_i ω_i (λ_CE ce_i + λ_CON con_i + λ_PF pf_i)`; missing terms count as 0.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, omega: &[f64]) -> Result<f64> {
    for (name, v) in [
        ("lambda_ce", weights.lambda_ce),
        ("lambda_con", weights.lambda_con),
        ("lambda_pf", weights.lambda_pf),
    ] {
        if v < 0.0 {
            return Err(Error::Parameter(format!("{name} is negative")));
        }
    }
    let n = omega.len();
    for t in [&terms.ce, &terms.con, &terms.pf] {
        if !t.is_empty() && t.len() != n {
            return Err(Error::dim("loss terms and omega differ in length"));
        }
    }
    let at = |t: &Vec<f64>, i: usize| t.get(i).copied().unwrap_or(0.0);
    Ok((0..n)
        .map(|i| {
            omega[i]
                * (weights.lambda_ce * at(&terms.ce, i)
                    + weights.lambda_con * at(&terms.con, i)
                    + weights.lambda_pf * at(&terms.pf, i))
        })
        .sum())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub con: f64,
    pub pf: f64,
    pub total: f64,
    pub lambda_ce: f64,
    pub lambda_con: f64,
    pub lambda_pf: f64,
    pub mean_omega: f64,
}

/// Where the β-scaled Gaussian perturbation comes from.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum NoiseSource {
    /// Draw from `N(0, Σ_batch)` with this stream.
    Sample(RngState),
    /// Replay previously drawn samples (held constant under differentiation).
    Fixed(Vec<Vec<f64>>),
}

/// Per-bag sample weights; never differentiated.
#[derive(Debug, Clone, Copy)]
pub enum OmegaSource<'a> {
    Fixed(&'a [f64]),
    /// `ω` from each bag's current logit margin under frozen normalization.
    Margin {
        normalizer: MarginNormalizer,
        params: MarginParams,
    },
}

pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grad: ModelParams,
    pub forwards: Vec<SlideForward>,
    pub terms: LossTerms,
    pub omega: Vec<f64>,
    /// The noise actually used, for replay.
    pub noise: Vec<Vec<f64>>,
}

/// Margin-weighted three-term objective over a batch of bags with its full
/// parameter gradient.
///
/// Contrastive and PF values are always evaluated (for logging) when the batch
/// holds at least two bags; they contribute gradient only when their λ > 0.
pub fn batch_objective(
    params: &ModelParams,
    bags: &[&[Vec<f64>]],
    labels: &[usize],
    omega: OmegaSource,
    weights: &LossWeights,
    noise: NoiseSource,
) -> Result<BatchResult> {
    weights.validate()?;
    let n = bags.len();
    if n == 0 || labels.len() != n {
        return Err(Error::dim(
            "batch and labels must be non-empty and equally long",
        ));
    }
    let forwards = bags
        .par_iter()
        .map(|b| model::forward(b, params))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<Vec<f64>> = forwards.iter().map(|f| f.logits.clone()).collect();
    let omega: Vec<f64> = match omega {
        OmegaSource::Fixed(w) => {
            if w.len() != n {
                return Err(Error::dim("omega length differs from batch"));
            }
            w.to_vec()
        }
        OmegaSource::Margin {
            normalizer,
            params: mp,
        } => logits
            .iter()
            .map(|l| {
                let (_, d) = logit_margin(l)?;
                margin_weight(normalizer.normalize(d), mp.gamma, mp.tau_m, mp.kappa)
            })
            .collect::<Result<_>>()?,
    };
    let omega = omega.as_slice();
    let features: Vec<Vec<f64>> = forwards.iter().map(|f| f.embedding.clone()).collect();
    let d = params.dims.latent;

    let (ce, ce_grad) = cross_entropy_terms(&logits, labels)?;
    let d_logits: Vec<Vec<f64>> = ce_grad
        .into_iter()
        .zip(omega)
        .map(|(g, w)| g.into_iter().map(|v| v * w * weights.lambda_ce).collect())
        .collect();
    let mut d_features = vec![vec![0.0; d]; n];
    let mut head_extra = Matrix::zeros(params.dims.n_classes, d);
    let mut terms = LossTerms {
        ce,
        ..LossTerms::default()
    };
    let mut used_noise = Vec::new();

    if n >= 2 {
        let w_con: Vec<f64> = omega.iter().map(|o| o * weights.lambda_con).collect();
        let (con, con_grad) = supcon_terms(
            &features,
            labels,
            weights.tau_con,
            weights.supcon_exclude_self,
            &w_con,
        )?;
        if weights.lambda_con > 0.0 {
            for (df, g) in d_features.iter_mut().zip(&con_grad) {
                axpy(1.0, g, df);
            }
        }
        terms.con = con;

        let predicted: Vec<usize> = logits
            .iter()
            .map(|l| logit_margin(l).map(|(p, _)| p))
            .collect::<Result<_>>()?;
        used_noise = match noise {
            NoiseSource::Fixed(v) => {
                if v.len() != n || v.iter().any(|x| x.len() != d) {
                    return Err(Error::dim("fixed noise does not match batch"));
                }
                v
            }
            NoiseSource::Sample(mut rng) => {
                if weights.beta == 0.0 {
                    vec![vec![0.0; d]; n]
                } else {
                    let sigma = batch_covariance(&features)?;
                    let factor = noise_factor(&sigma)?;
                    (0..n)
                        .map(|_| numerics::sample_with_factor(&vec![0.0; d], &factor, &mut rng))
                        .collect()
                }
            }
        };
        let perturbed: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut v = features[j].clone();
                axpy(weights.alpha, params.head_row(predicted[j]), &mut v);
                axpy(weights.beta, &used_noise[j], &mut v);
                v
            })
            .collect();
        let w_pf: Vec<f64> = omega.iter().map(|o| o * weights.lambda_pf).collect();
        let pf = pf_terms(&features, labels, &perturbed, &w_pf)?;
        if weights.lambda_pf > 0.0 {
            for j in 0..n {
                axpy(1.0, &pf.d_features[j], &mut d_features[j]);
                axpy(1.0, &pf.d_perturbed[j], &mut d_features[j]);
                axpy(
                    weights.alpha,
                    &pf.d_perturbed[j],
                    head_extra.row_mut(predicted[j]),
                );
            }
        }
        terms.pf = pf.terms;
    }

    let total = total_loss(&terms, weights, omega)?;
    let sum = |t: &[f64]| t.iter().sum::<f64>();
    let breakdown = LossBreakdown {
        ce: sum(&terms.ce),
        con: sum(&terms.con),
        pf: sum(&terms.pf),
        total,
        lambda_ce: weights.lambda_ce,
        lambda_con: weights.lambda_con,
        lambda_pf: weights.lambda_pf,
        mean_omega: omega.iter().sum::<f64>() / n as f64,
    };

    // per-bag gradients in parallel, reduced in index order
    let per_bag: Vec<ModelParams> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = params.zeros_like();
            let mut dz = model::head_backward(params, &forwards[i].embedding, &d_logits[i], &mut g);
            axpy(1.0, &d_features[i], &mut dz);
            model::embedding_backward(params, &forwards[i], bags[i], &dz, &mut g);
            g
        })
        .collect();
    let mut grad = params.zeros_like();
    for g in &per_bag {
        grad.add_scaled(g, 1.0);
    }
    for (a, b) in grad
        .head_w
        .as_mut_slice()
        .iter_mut()
        .zip(head_extra.as_slice())
    {
        *a += b;
    }

    Ok(BatchResult {
        breakdown,
        grad,
        forwards,
        terms,
        omega: omega.to_vec(),
        noise: used_noise,
    })
}
