//! Statistical validation battery: bootstrap intervals, paired and exact
//! tests, effect sizes, dispersion tests and ranking metrics.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::special::{chi2_sf, f_sf, ln_choose};
use crate::numerics::RngState;

/// Tables up to this total are enumerated with exact integer arithmetic.
pub const FISHER_EXACT_MAX_TOTAL: u64 = 30;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile bootstrap interval for the mean, resampling with replacement.
///
/// Every resample draws from its own stream derived from `rng`, so the result
/// does not depend on how iterations are scheduled across threads.
pub fn bootstrap_ci(
    values: &[f64],
    n_boot: usize,
    level: f64,
    rng: &RngState,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("n_boot {n_boot}, level {level}")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut r = rng.derive(b as u64);
            (0..n).map(|_| values[r.below(n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let lo = quantile_sorted(&means, alpha / 2.0);
    let hi = quantile_sorted(&means, 1.0 - alpha / 2.0);
    Ok((lo.min(hi), hi.max(lo)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedPredictions {
    pub labels: Vec<usize>,
    pub pred_a: Vec<usize>,
    pub pred_b: Vec<usize>,
}

impl PairedPredictions {
    pub fn new(labels: Vec<usize>, pred_a: Vec<usize>, pred_b: Vec<usize>) -> Result<Self> {
        if labels.len() != pred_a.len() || labels.len() != pred_b.len() {
            return Err(Error::dim("paired predictions differ in length"));
        }
        Ok(Self {
            labels,
            pred_a,
            pred_b,
        })
    }

    /// `(b, c)`: a right & b wrong, a wrong & b right.
    pub fn discordant(&self) -> (u64, u64) {
        let mut b = 0;
        let mut c = 0;
        for ((y, a), p) in self.labels.iter().zip(&self.pred_a).zip(&self.pred_b) {
            match (a == y, p == y) {
                (true, false) => b += 1,
                (false, true) => c += 1,
                _ => {}
            }
        }
        (b, c)
    }

    pub fn swapped(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            pred_a: self.pred_b.clone(),
            pred_b: self.pred_a.clone(),
        }
    }
}

/// McNemar χ² and its χ²₁ tail probability.
pub fn mcnemar(paired: &PairedPredictions, continuity_correction: bool) -> Result<(f64, f64)> {
    let (b, c) = paired.discordant();
    mcnemar_counts(b, c, continuity_correction)
}

pub fn mcnemar_counts(b: u64, c: u64, continuity_correction: bool) -> Result<(f64, f64)> {
    if b + c == 0 {
        return Err(Error::NoDiscordance);
    }
    let diff = (b as f64 - c as f64).abs();
    let num = if continuity_correction {
        (diff - 1.0).max(0.0)
    } else {
        diff
    };
    let chi2 = num * num / (b + c) as f64;
    Ok((chi2, chi2_sf(chi2, 1.0)))
}

fn binom_u128(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> Result<f64> {
    let [[a, b], [c, d]] = table;
    let n = a + b + c + d;
    if n == 0 {
        return Err(Error::DegenerateTable);
    }
    if n <= FISHER_EXACT_MAX_TOTAL {
        Ok(fisher_enumerated(table))
    } else {
        Ok(fisher_log_path(table))
    }
}

/// Exact integer enumeration: table weights `C(r1, k)·C(r2, c1 − k)` compared
/// without rounding.
pub fn fisher_enumerated(table: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = table;
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let observed = binom_u128(r1, a) * binom_u128(r2, c1 - a);
    let mut hits: u128 = 0;
    for k in lo..=hi {
        let w = binom_u128(r1, k) * binom_u128(r2, c1 - k);
        if w <= observed {
            hits += w;
        }
    }
    (hits as f64 / binom_u128(n, c1) as f64).min(1.0)
}

/// Log-gamma path for large totals.
pub fn fisher_log_path(table: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = table;
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let ln_total = ln_choose(n, c1);
    let ln_p = |k: u64| ln_choose(r1, k) + ln_choose(r2, c1 - k) - ln_total;
    let observed = ln_p(a);
    let slack = 1e-9;
    let p: f64 = (lo..=hi)
        .map(ln_p)
        .filter(|lp| *lp <= observed + slack)
        .map(f64::exp)
        .sum();
    p.min(1.0)
}

/// `(mean_a − mean_b) / pooled sd`.
pub fn cohens_d(group_a: &[f64], group_b: &[f64]) -> Result<f64> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::dim("cohen's d needs at least two samples per group"));
    }
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let va = std_dev(group_a).powi(2);
    let vb = std_dev(group_b).powi(2);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((mean(group_a) - mean(group_b)) / pooled)
}

/// Brown–Forsythe (median-centred) Levene test: `(W, p)`.
pub fn levene(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::dim(
            "levene needs at least two groups of at least two samples",
        ));
    }
    let k = groups.len() as f64;
    let deviations: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let m = median(g);
            g.iter().map(|x| (x - m).abs()).collect()
        })
        .collect();
    let total_n: usize = deviations.iter().map(Vec::len).sum();
    let n = total_n as f64;
    let grand = deviations.iter().flatten().sum::<f64>() / n;
    let group_means: Vec<f64> = deviations.iter().map(|z| mean(z)).collect();
    let between: f64 = deviations
        .iter()
        .zip(&group_means)
        .map(|(z, m)| z.len() as f64 * (m - grand).powi(2))
        .sum();
    let within: f64 = deviations
        .iter()
        .zip(&group_means)
        .map(|(z, m)| z.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    if within == 0.0 {
        if between == 0.0 {
            return Ok((0.0, 1.0));
        }
        return Ok((f64::INFINITY, 0.0));
    }
    let w = (n - k) / (k - 1.0) * between / within;
    Ok((w, f_sf(w, k - 1.0, n - k)))
}

/// Rank-sum AUC with ties counted ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC-AUC with a single class"));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for k in &idx[i..j] {
            ranks[*k] = avg;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapCurve {
    /// `(fraction ranked, fraction of positives captured)`, starting at (0, 0).
    pub points: Vec<(f64, f64)>,
    pub accuracy_ratio: f64,
}

/// Cumulative accuracy profile. Tied scores are treated as one block, so the
/// curve interpolates linearly across them.
pub fn cap_curve(scores: &[f64], labels: &[bool]) -> Result<CapCurve> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels differ in length"));
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Undefined("CAP curve with a single class"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut points = vec![(0.0, 0.0)];
    let mut captured = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        captured += idx[i..j].iter().filter(|k| labels[**k]).count();
        points.push((j as f64 / n as f64, captured as f64 / n_pos as f64));
        i = j;
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    let pi = n_pos as f64 / n as f64;
    let perfect = 1.0 - pi / 2.0;
    let accuracy_ratio = (area - 0.5) / (perfect - 0.5);
    Ok(CapCurve {
        points,
        accuracy_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest metrics from a confusion matrix (rows true, columns predicted).
/// Zero denominators are reported as `None`.
pub fn per_class_metrics(confusion: &[Vec<u64>]) -> Result<Vec<ClassMetrics>> {
    let k = confusion.len();
    if confusion.iter().any(|r| r.len() != k) {
        return Err(Error::dim("confusion matrix must be square"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    Ok((0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_ = confusion[c].iter().sum::<u64>() - tp;
            let fp = (0..k).map(|r| confusion[r][c]).sum::<u64>() - tp;
            let tn = total - tp - fn_ - fp;
            ClassMetrics {
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                ppv: ratio(tp, tp + fp),
                npv: ratio(tn, tn + fn_),
            }
        })
        .collect())
}

/// `100 · sd / mean` with the n − 1 standard deviation.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::dim(
            "coefficient of variation needs at least two values",
        ));
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(Error::Undefined("coefficient of variation with zero mean"));
    }
    Ok(100.0 * std_dev(values) / m)
}

/// `(σ²_base − σ²_new) / σ²_base · 100`.
pub fn variance_reduction(baseline: &[f64], candidate: &[f64]) -> Option<f64> {
    let vb = std_dev(baseline).powi(2);
    (vb > 0.0).then(|| (vb - std_dev(candidate).powi(2)) / vb * 100.0)
}

/// Per-bag predictions of one classifier, as exchanged through CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub bag_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn n_classes(&self) -> usize {
        self.scores.first().map(Vec::len).unwrap_or(0).max(
            self.labels
                .iter()
                .chain(&self.preds)
                .max()
                .map_or(0, |m| m + 1),
        )
    }

    pub fn correct(&self) -> Vec<f64> {
        self.labels
            .iter()
            .zip(&self.preds)
            .map(|(y, p)| if y == p { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        mean(&self.correct())
    }

    pub fn confusion(&self) -> Vec<Vec<u64>> {
        let k = self.n_classes();
        let mut m = vec![vec![0u64; k]; k];
        for (y, p) in self.labels.iter().zip(&self.preds) {
            m[*y][*p] += 1;
        }
        m
    }

    /// Per-class recall, skipping classes with no instances.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        let conf = self.confusion();
        conf.iter()
            .enumerate()
            .filter_map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.scores.first().map_or(0, Vec::len);
        let mut header = String::from("bag_id,label,pred");
        for c in 0..k {
            header.push_str(&format!(",score_{c}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.labels.len() {
            let mut line = format!("{},{},{}", self.bag_ids[i], self.labels[i], self.preds[i]);
            for s in &self.scores[i] {
                line.push_str(&format!(",{s}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Empty)??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[0] != "bag_id" || cols[1] != "label" || cols[2] != "pred" {
            return Err(Error::Config(format!(
                "unexpected prediction header `{header}`"
            )));
        }
        let k = cols.len() - 3;
        let mut set = PredictionSet {
            bag_ids: Vec::new(),
            labels: Vec::new(),
            preds: Vec::new(),
            scores: Vec::new(),
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != k + 3 {
                return Err(Error::Config(format!(
                    "line {}: expected {} fields",
                    lineno + 2,
                    k + 3
                )));
            }
            let parse_usize = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: bad integer `{s}`", lineno + 2)))
            };
            set.bag_ids.push(parse_usize(fields[0])?);
            set.labels.push(parse_usize(fields[1])?);
            set.preds.push(parse_usize(fields[2])?);
            let scores = fields[3..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Config(format!("line {}: bad score `{s}`", lineno + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            set.scores.push(scores);
        }
        if set.labels.is_empty() {
            return Err(Error::Empty);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    pub accuracy_ci95: (f64, f64),
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub roc_auc: Vec<Option<f64>>,
    pub cap_accuracy_ratio: Vec<Option<f64>>,
    pub per_class_accuracy_cv: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub candidate: String,
    pub discordant_b: u64,
    pub discordant_c: u64,
    pub mcnemar_chi2: Option<f64>,
    pub mcnemar_p: Option<f64>,
    pub cohens_d: Option<f64>,
    /// Per class: Fisher exact p on [[base right, base wrong], [cand right, cand wrong]].
    pub fisher_p: Vec<Option<f64>>,
    pub levene_w: Option<f64>,
    pub levene_p: Option<f64>,
    pub variance_reduction_pct: Option<f64>,
    pub bonferroni_factor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub classifiers: Vec<ClassifierReport>,
    pub comparisons: Vec<ComparisonReport>,
}

#[derive(Debug, Clone, Copy)]
pub struct BatteryConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    pub mcnemar_continuity: bool,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            level: 0.95,
            seed: 0,
            mcnemar_continuity: false,
        }
    }
}

pub fn classifier_report(
    name: &str,
    set: &PredictionSet,
    cfg: &BatteryConfig,
) -> Result<ClassifierReport> {
    let correct = set.correct();
    let rng = RngState::new(cfg.seed);
    let ci = bootstrap_ci(&correct, cfg.n_boot, cfg.level, &rng)?;
    let confusion = set.confusion();
    let k = set.n_classes();
    let has_scores = set.scores.first().is_some_and(|s| s.len() == k);
    let mut aucs = Vec::with_capacity(k);
    let mut caps = Vec::with_capacity(k);
    for c in 0..k {
        if !has_scores {
            aucs.push(None);
            caps.push(None);
            continue;
        }
        let scores: Vec<f64> = set.scores.iter().map(|s| s[c]).collect();
        let labels: Vec<bool> = set.labels.iter().map(|y| *y == c).collect();
        aucs.push(roc_auc(&scores, &labels).ok());
        caps.push(
            cap_curve(&scores, &labels)
                .ok()
                .map(|cap| cap.accuracy_ratio),
        );
    }
    Ok(ClassifierReport {
        name: name.to_string(),
        n: set.labels.len(),
        accuracy: set.accuracy(),
        accuracy_ci95: ci,
        per_class: per_class_metrics(&confusion)?,
        confusion,
        roc_auc: aucs,
        cap_accuracy_ratio: caps,
        per_class_accuracy_cv: coefficient_of_variation(&set.per_class_accuracy()).ok(),
    })
}

pub fn comparison_report(
    base_name: &str,
    base: &PredictionSet,
    cand_name: &str,
    cand: &PredictionSet,
    n_comparisons: usize,
    cfg: &BatteryConfig,
) -> Result<ComparisonReport> {
    if base.labels != cand.labels {
        return Err(Error::Config(format!(
            "{base_name} and {cand_name} are not evaluated on the same bags"
        )));
    }
    let paired =
        PairedPredictions::new(base.labels.clone(), base.preds.clone(), cand.preds.clone())?;
    let (b, c) = paired.discordant();
    let mc = mcnemar(&paired, cfg.mcnemar_continuity).ok();
    let (ca, cb) = (cand.correct(), base.correct());
    let k = base.n_classes().max(cand.n_classes());
    let fisher_p = (0..k)
        .map(|cls| {
            let mut t = [[0u64; 2]; 2];
            for (i, y) in base.labels.iter().enumerate() {
                if *y != cls {
                    continue;
                }
                t[0][(cb[i] == 0.0) as usize] += 1;
                t[1][(ca[i] == 0.0) as usize] += 1;
            }
            fisher_exact(t).ok()
        })
        .collect();
    let (base_pc, cand_pc) = (base.per_class_accuracy(), cand.per_class_accuracy());
    let lev = levene(&[base_pc.clone(), cand_pc.clone()]).ok();
    Ok(ComparisonReport {
        baseline: base_name.to_string(),
        candidate: cand_name.to_string(),
        discordant_b: b,
        discordant_c: c,
        mcnemar_chi2: mc.map(|m| m.0),
        mcnemar_p: mc.map(|m| m.1),
        cohens_d: cohens_d(&ca, &cb).ok(),
        fisher_p,
        levene_w: lev.map(|l| l.0),
        levene_p: lev.map(|l| l.1),
        variance_reduction_pct: variance_reduction(&base_pc, &cand_pc),
        bonferroni_factor: n_comparisons.max(1),
    })
}

/// Full battery: one report per classifier, and the first classifier
/// compared against each of the others.
pub fn battery(sets: &[(String, PredictionSet)], cfg: &BatteryConfig) -> Result<StatsReport> {
    if sets.is_empty() {
        return Err(Error::Empty);
    }
    let classifiers = sets
        .iter()
        .map(|(name, s)| classifier_report(name, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (base_name, base) = &sets[0];
    let comparisons = sets[1..]
        .iter()
        .map(|(name, s)| comparison_report(base_name, base, name, s, sets.len() - 1, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(StatsReport {
        classifiers,
        comparisons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_constant_is_degenerate() {
        let ci = bootstrap_ci(&[2.5, 2.5, 2.5], 1000, 0.95, &RngState::new(0)).unwrap();
        assert_eq!(ci, (2.5, 2.5));
        assert!(bootstrap_ci(&[], 10, 0.95, &RngState::new(0)).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<f64> = (0..30).map(|i| (i * i % 7) as f64).collect();
        let a = bootstrap_ci(&v, 500, 0.95, &RngState::new(3)).unwrap();
        let b = bootstrap_ci(&v, 500, 0.95, &RngState::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.0 <= a.1);
    }

    #[test]
    fn mcnemar_examples() {
        let (chi2, p) = mcnemar_counts(4, 4, false).unwrap();
        assert_eq!(chi2, 0.0);
        assert!((p - 1.0).abs() < 1e-15);
        let (chi2, p) = mcnemar_counts(10, 2, false).unwrap();
        assert!((chi2 - 64.0 / 12.0).abs() < 1e-12);
        assert!((p - 0.020_921_335_337_794_0).abs() < 1e-6);
        assert!(matches!(
            mcnemar_counts(0, 0, false),
            Err(Error::NoDiscordance)
        ));
        let (cc, _) = mcnemar_counts(10, 2, true).unwrap();
        assert!((cc - 49.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn mcnemar_swap_symmetry() {
        let p = PairedPredictions::new(
            vec![0, 1, 1, 0, 2],
            vec![0, 1, 0, 1, 2],
            vec![1, 1, 1, 0, 0],
        )
        .unwrap();
        assert_eq!(
            mcnemar(&p, false).unwrap(),
            mcnemar(&p.swapped(), false).unwrap()
        );
    }

    #[test]
    fn fisher_examples() {
        assert!((fisher_exact([[1, 1], [1, 1]]).unwrap() - 1.0).abs() < 1e-15);
        assert!((fisher_exact([[5, 0], [0, 5]]).unwrap() - 2.0 / 252.0).abs() < 1e-15);
        assert!(matches!(
            fisher_exact([[0, 0], [0, 0]]),
            Err(Error::DegenerateTable)
        ));
        let t = [[3, 7], [9, 2]];
        let tt = [[2, 9], [7, 3]];
        assert!((fisher_exact(t).unwrap() - fisher_exact(tt).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn fisher_paths_agree_near_boundary() {
        for n in 20..=30u64 {
            for a in 0..=n.min(8) {
                for b in 0..=(n - a).min(8) {
                    for c in 0..=(n - a - b) {
                        let d = n - a - b - c;
                        let t = [[a, b], [c, d]];
                        let e = fisher_enumerated(t);
                        let l = fisher_log_path(t);
                        assert!((e - l).abs() < 1e-10, "{t:?}: {e} vs {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn cohens_d_examples() {
        assert_eq!(cohens_d(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        let d = cohens_d(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]).unwrap();
        assert!((d + 1.0 / (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((d + 0.8660).abs() < 1e-4);
        let r = cohens_d(&[1.0, 1.0, 3.0, 3.0], &[0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(r, -d);
        assert!(matches!(
            cohens_d(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn levene_examples() {
        let g = vec![1.0, 4.0, 2.0, 8.0];
        assert_eq!(levene(&[g.clone(), g.clone()]).unwrap(), (0.0, 1.0));
        let big: Vec<f64> = g.iter().map(|v| v * 10.0).collect();
        assert!(levene(&[g, big]).unwrap().0 > 0.0);
        let (w, p) = levene(&[vec![0.0, 1.0, 2.0], vec![0.0, 5.0, 10.0]]).unwrap();
        assert!((w - 128.0 / 52.0).abs() < 1e-10);
        assert!((p - 0.191_744_357_341_423_34).abs() < 1e-10);
        assert_eq!(
            levene(&[vec![3.0, 3.0], vec![1.0, 1.0]]).unwrap(),
            (0.0, 1.0)
        );
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.3; 4], &[false, false, true, true]).unwrap(),
            0.5
        );
        let a = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn cap_examples() {
        let cap = cap_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!((cap.accuracy_ratio - 1.0).abs() < 1e-12);
        assert_eq!(*cap.points.last().unwrap(), (1.0, 1.0));
        assert!(cap
            .points
            .windows(2)
            .all(|w| w[1].1 >= w[0].1 && w[1].0 >= w[0].0));
        let flat = cap_curve(&[0.5; 6], &[true, false, false, true, false, false]).unwrap();
        assert!(flat.accuracy_ratio.abs() < 1e-12);
    }

    #[test]
    fn per_class_examples() {
        let diag = vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 5]];
        for m in per_class_metrics(&diag).unwrap() {
            assert_eq!(m.sensitivity, Some(1.0));
            assert_eq!(m.specificity, Some(1.0));
            assert_eq!(m.ppv, Some(1.0));
            assert_eq!(m.npv, Some(1.0));
        }
        let m = per_class_metrics(&[vec![8, 2], vec![1, 9]]).unwrap();
        assert_eq!(m[0].sensitivity, Some(0.8));
        assert_eq!(m[0].specificity, Some(0.9));
        assert_eq!(m[0].ppv, Some(8.0 / 9.0));
        assert_eq!(m[0].npv, Some(9.0 / 11.0));
        let empty = per_class_metrics(&[vec![0, 0], vec![1, 3]]).unwrap();
        assert_eq!(empty[0].sensitivity, None);
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[4.0, 4.0, 4.0]).unwrap(), 0.0);
        assert!((coefficient_of_variation(&[90.0, 100.0, 110.0]).unwrap() - 10.0).abs() < 1e-12);
        let s = coefficient_of_variation(&[9.0, 10.0, 11.0]).unwrap();
        assert!((s - 10.0).abs() < 1e-12);
        assert!(coefficient_of_variation(&[-1.0, 1.0]).is_err());
    }

    #[test]
    fn prediction_csv_round_trip() {
        let set = PredictionSet {
            bag_ids: vec![0, 1, 2],
            labels: vec![0, 1, 1],
            preds: vec![0, 0, 1],
            scores: vec![vec![0.75, 0.25], vec![0.5, 0.5], vec![0.125, 0.875]],
        };
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = PredictionSet::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(set, back);
    }
}
