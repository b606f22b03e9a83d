//! Logit, feature-space and input-space margins, margin-aware sample
//! weights, and the diagnostics that relate them (Kendall τ-b, robust /
//! non-robust separation AUROC, neural-collapse index).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::numerics::{norm2, Matrix, RngState};

/// Flip radii beyond this are reported as `+∞`.
pub const MAX_PROBE_RADIUS: f64 = 1e3;

/// Threat-model norm `p`; the feature margin divides by the dual norm `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PNorm {
    #[default]
    L2,
    LInf,
}

impl PNorm {
    pub fn dual_norm(self, v: &[f64]) -> f64 {
        match self {
            PNorm::L2 => norm2(v),
            PNorm::LInf => v.iter().map(|x| x.abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub gamma: f64,
    pub tau_m: f64,
    pub kappa: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            tau_m: 0.5,
            kappa: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub predicted: usize,
    pub d_out: f64,
    /// Distance to the hyperplane between the predicted class and class `j`.
    pub pairwise: BTreeMap<usize, f64>,
    pub d_feat: f64,
    pub d_in_estimate: Option<f64>,
    pub omega: f64,
}

/// `(argmax, top − runner-up)`; ties go to the lowest index.
pub fn logit_margin(logits: &[f64]) -> Result<(usize, f64)> {
    if logits.len() < 2 {
        return Err(Error::dim("logit margin needs at least two classes"));
    }
    let mut top = 0;
    for (k, v) in logits.iter().enumerate() {
        if *v > logits[top] {
            top = k;
        }
    }
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != top)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((top, logits[top] - runner_up))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMargins {
    pub predicted: usize,
    pub pairwise: BTreeMap<usize, f64>,
    pub d_feat: f64,
}

/// Distances from `z` to every hyperplane `{w_ŷ·z + b_ŷ = w_j·z + b_j}`.
pub fn feature_margins(
    z: &[f64],
    head_w: &Matrix,
    head_b: &[f64],
    norm: PNorm,
) -> Result<FeatureMargins> {
    if head_w.cols() != z.len() || head_w.rows() != head_b.len() {
        return Err(Error::dim("head shape does not match embedding"));
    }
    let mut logits = head_w.matvec(z)?;
    for (l, b) in logits.iter_mut().zip(head_b) {
        *l += b;
    }
    let (pred, _) = logit_margin(&logits)?;
    let w_pred = head_w.row(pred);
    let mut pairwise = BTreeMap::new();
    for j in 0..logits.len() {
        if j == pred {
            continue;
        }
        let diff: Vec<f64> = w_pred
            .iter()
            .zip(head_w.row(j))
            .map(|(a, b)| a - b)
            .collect();
        let denom = norm.dual_norm(&diff);
        let num = logits[pred] - logits[j];
        let dist = if denom == 0.0 {
            if head_b[pred] == head_b[j] {
                return Err(Error::DegenerateHead(pred, j));
            }
            if num > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            num / denom
        };
        pairwise.insert(j, dist);
    }
    let d_feat = pairwise.values().cloned().fold(f64::INFINITY, f64::min);
    Ok(FeatureMargins {
        predicted: pred,
        pairwise,
        d_feat,
    })
}

/// `ω = 1 + γ·σ((τ_m − d)/κ)` for a min–max normalized logit margin `d`.
pub fn margin_weight(d_out_normalized: f64, gamma: f64, tau_m: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Parameter(format!("kappa must be > 0, got {kappa}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(1.0 + gamma * sigmoid((tau_m - d_out_normalized) / kappa))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Min–max constants for logit margins, frozen over a reference set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginNormalizer {
    pub min: f64,
    pub max: f64,
}

impl MarginNormalizer {
    pub fn fit(d_outs: &[f64]) -> Self {
        let min = d_outs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = d_outs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !min.is_finite() || !max.is_finite() {
            return Self { min: 0.0, max: 0.0 };
        }
        Self { min, max }
    }

    /// Maps into `[0, 1]`, clamping margins outside the frozen range. A
    /// degenerate range maps everything to 0.
    pub fn normalize(&self, d: f64) -> f64 {
        let range = self.max - self.min;
        if !(range > 0.0) {
            return 0.0;
        }
        ((d - self.min) / range).clamp(0.0, 1.0)
    }
}

/// Assemble the margin report for one forward pass.
pub fn margin_report(
    logits: &[f64],
    z: &[f64],
    params: &ModelParams,
    norm: PNorm,
    normalizer: &MarginNormalizer,
    mp: &MarginParams,
) -> Result<MarginReport> {
    let (predicted, d_out) = logit_margin(logits)?;
    let fm = feature_margins(z, &params.head_w, &params.head_b, norm)?;
    let omega = margin_weight(normalizer.normalize(d_out), mp.gamma, mp.tau_m, mp.kappa)?;
    Ok(MarginReport {
        predicted,
        d_out,
        pairwise: fm.pairwise,
        d_feat: fm.d_feat,
        d_in_estimate: None,
        omega,
    })
}

/// Anything that maps a bag of patches to logits, with patch gradients.
pub trait BagClassifier {
    fn bag_logits(&self, patches: &[Vec<f64>]) -> Result<Vec<f64>>;
    /// Gradient of `d_logits · logits` with respect to every patch.
    fn bag_logit_gradient(&self, patches: &[Vec<f64>], d_logits: &[f64]) -> Result<Vec<Vec<f64>>>;
}

impl BagClassifier for ModelParams {
    fn bag_logits(&self, patches: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(model::forward(patches, self)?.logits)
    }

    fn bag_logit_gradient(&self, patches: &[Vec<f64>], d_logits: &[f64]) -> Result<Vec<Vec<f64>>> {
        let fwd = model::forward(patches, self)?;
        Ok(model::logit_gradient_wrt_patches(self, &fwd, d_logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub direction_budget: usize,
    pub tol: f64,
    /// Include the gradient directions of every competitor-minus-top logit.
    pub gradient_directions: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            direction_budget: 8,
            tol: 1e-4,
            gradient_directions: true,
        }
    }
}

/// Upper-bound estimate of the ℓ₂ input-space robust radius of a bag.
///
/// Probes `direction_budget` random unit directions in the concatenated patch
/// space plus, optionally, the gradient-ascent direction of each
/// competitor-minus-top logit (runner-up first). Along each ray the first
/// prediction flip is bracketed by doubling and bisected to `tol`; the
/// smallest flip radius wins. Returns `+∞` when nothing flips within
/// [`MAX_PROBE_RADIUS`].
pub fn estimate_input_margin<M: BagClassifier + ?Sized>(
    model: &M,
    patches: &[Vec<f64>],
    probe: &ProbeConfig,
    rng: &mut RngState,
) -> Result<f64> {
    if !(probe.tol > 0.0) {
        return Err(Error::Parameter("probe tolerance must be > 0".into()));
    }
    if patches.is_empty() {
        return Err(Error::EmptyBag);
    }
    let logits = model.bag_logits(patches)?;
    let (pred, _) = logit_margin(&logits)?;
    let dim = patches[0].len();
    let total = dim * patches.len();

    let mut directions: Vec<Vec<f64>> = Vec::new();
    if probe.gradient_directions {
        let mut competitors: Vec<usize> = (0..logits.len()).filter(|j| *j != pred).collect();
        competitors.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
        for j in competitors {
            let mut d_logits = vec![0.0; logits.len()];
            d_logits[j] = 1.0;
            d_logits[pred] = -1.0;
            let g = model.bag_logit_gradient(patches, &d_logits)?.concat();
            if let Some(u) = unit(g) {
                directions.push(u);
            }
        }
    }
    for _ in 0..probe.direction_budget {
        if let Some(u) = unit(rng.normal_vec(total)) {
            directions.push(u);
        }
    }

    let mut best = f64::INFINITY;
    for dir in &directions {
        if let Some(r) = flip_radius(model, patches, dir, pred, probe.tol, best)? {
            best = best.min(r);
        }
    }
    Ok(best)
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm2(&v);
    if n > 0.0 && n.is_finite() {
        Some(v.into_iter().map(|x| x / n).collect())
    } else {
        None
    }
}

fn flip_radius<M: BagClassifier + ?Sized>(
    model: &M,
    patches: &[Vec<f64>],
    dir: &[f64],
    pred: usize,
    tol: f64,
    limit: f64,
) -> Result<Option<f64>> {
    let dim = patches[0].len();
    let flipped = |r: f64| -> Result<bool> {
        let moved: Vec<Vec<f64>> = patches
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.iter()
                    .zip(&dir[i * dim..(i + 1) * dim])
                    .map(|(x, d)| x + r * d)
                    .collect()
            })
            .collect();
        Ok(logit_margin(&model.bag_logits(&moved)?)?.0 != pred)
    };
    let cap = limit.min(MAX_PROBE_RADIUS);
    let mut lo = 0.0;
    let mut hi = tol;
    loop {
        if hi > cap {
            // one last look at the cap itself
            if cap.is_finite() && cap > lo && flipped(cap)? {
                hi = cap;
                break;
            }
            return Ok(None);
        }
        if flipped(hi)? {
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if flipped(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Kendall τ-b via Knight's O(n log n) merge-sort algorithm.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim(format!("{} vs {} values", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::dim("kendall tau needs at least two pairs"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Parameter("NaN in kendall tau input".into()));
    }
    let mut pairs: Vec<(f64, f64)> = xs.iter().cloned().zip(ys.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as f64;
    let mut tie_x = 0u64;
    let mut tie_xy = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let t = (j - i) as u64;
        tie_x += t * (t - 1) / 2;
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && pairs[m].1 == pairs[k].1 {
                m += 1;
            }
            let u = (m - k) as u64;
            tie_xy += u * (u - 1) / 2;
            k = m;
        }
        i = j;
    }

    let mut ys_sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys_sorted, &mut buf);

    let mut tie_y = 0u64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && ys_sorted[j] == ys_sorted[i] {
            j += 1;
        }
        let t = (j - i) as u64;
        tie_y += t * (t - 1) / 2;
        i = j;
    }

    let (tx, ty, txy) = (tie_x as f64, tie_y as f64, tie_xy as f64);
    let denom = ((n0 - tx) * (n0 - ty)).sqrt();
    if denom == 0.0 {
        return Err(Error::Undefined("kendall tau"));
    }
    let numer = n0 - tx - ty + txy - 2.0 * swaps as f64;
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    while i < mid {
        buf[k] = v[i];
        i += 1;
        k += 1;
    }
    while j < n {
        buf[k] = v[j];
        j += 1;
        k += 1;
    }
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Probability that a random robust bag has a larger logit margin than a
/// random non-robust one (ties ½).
pub fn margin_separation_auroc(d_out: &[f64], robust: &[bool]) -> Result<f64> {
    crate::stats::roc_auc(d_out, robust).map_err(|e| match e {
        Error::Undefined(_) => Error::Undefined("margin separation AUROC"),
        other => other,
    })
}

/// `tr(S_within) / tr(S_between)` of the given representations.
pub fn neural_collapse_index(latents: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if latents.len() != labels.len() {
        return Err(Error::dim("latents and labels differ in length"));
    }
    if latents.is_empty() {
        return Err(Error::Empty);
    }
    let d = latents[0].len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, y) in latents.iter().zip(labels) {
        if x.len() != d {
            return Err(Error::dim("ragged latents"));
        }
        let e = sums.entry(*y).or_insert_with(|| (vec![0.0; d], 0));
        crate::numerics::axpy(1.0, x, &mut e.0);
        e.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::Undefined(
            "neural collapse index with fewer than two classes",
        ));
    }
    let means: BTreeMap<usize, Vec<f64>> = sums
        .iter()
        .map(|(c, (s, n))| (*c, s.iter().map(|v| v / *n as f64).collect()))
        .collect();
    let n = latents.len() as f64;
    let global: Vec<f64> = (0..d)
        .map(|k| sums.values().map(|(s, _)| s[k]).sum::<f64>() / n)
        .collect();
    let within: f64 = latents
        .iter()
        .zip(labels)
        .map(|(x, y)| sq_dist(x, &means[y]))
        .sum();
    let between: f64 = sums
        .iter()
        .map(|(c, (_, cnt))| *cnt as f64 * sq_dist(&means[c], &global))
        .sum();
    if between <= 0.0 {
        return Err(Error::DegenerateScatter);
    }
    Ok(within / between)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum over competitors of the raw logit gap `f_ŷ − f_j`; equals `d_out`.
pub fn min_pairwise_logit_gap(logits: &[f64]) -> Result<f64> {
    let (pred, _) = logit_margin(logits)?;
    Ok(logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != pred)
        .map(|(_, l)| logits[pred] - l)
        .fold(f64::INFINITY, f64::min))
}

/// Head rows at the vertices of a regular simplex (all pairwise row
/// distances equal to `scale·√2`).
pub fn simplex_head(n_classes: usize, latent: usize, scale: f64) -> Result<Matrix> {
    if latent < n_classes {
        return Err(Error::dim("simplex head needs latent >= n_classes"));
    }
    let rows =
        crate::synthdata::class_prototypes(n_classes, latent, scale * std::f64::consts::SQRT_2);
    Matrix::from_rows(&rows)
}

/// Linear bag model `logits = A·vec(bag) + c`, used as a closed-form probe oracle.
#[derive(Debug, Clone)]
pub struct LinearBagModel {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LinearBagModel {
    /// Exact ℓ₂ distance from `patches` to the nearest decision boundary.
    pub fn boundary_distance(&self, patches: &[Vec<f64>]) -> Result<f64> {
        let logits = self.bag_logits(patches)?;
        let (pred, _) = logit_margin(&logits)?;
        let mut best = f64::INFINITY;
        for j in 0..logits.len() {
            if j == pred {
                continue;
            }
            let g: Vec<f64> = self
                .weights
                .row(pred)
                .iter()
                .zip(self.weights.row(j))
                .map(|(a, b)| a - b)
                .collect();
            let n = norm2(&g);
            if n > 0.0 {
                best = best.min((logits[pred] - logits[j]) / n);
            }
        }
        Ok(best)
    }
}

impl BagClassifier for LinearBagModel {
    fn bag_logits(&self, patches: &[Vec<f64>]) -> Result<Vec<f64>> {
        let flat = patches.concat();
        let mut l = self.weights.matvec(&flat)?;
        for (v, b) in l.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(l)
    }

    fn bag_logit_gradient(&self, patches: &[Vec<f64>], d_logits: &[f64]) -> Result<Vec<Vec<f64>>> {
        let g = self.weights.tmatvec(d_logits)?;
        let d = patches[0].len();
        Ok(g.chunks(d).map(|c| c.to_vec()).collect())
    }
}

/// `‖w_i − w_j‖_q` for two head rows.
pub fn head_row_gap(head_w: &Matrix, i: usize, j: usize, norm: PNorm) -> f64 {
    let diff: Vec<f64> = head_w
        .row(i)
        .iter()
        .zip(head_w.row(j))
        .map(|(a, b)| a - b)
        .collect();
    norm.dual_norm(&diff)
}
