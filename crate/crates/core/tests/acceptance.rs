//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::Path;
use std::time::Instant;

use marginlab::bayesopt::{
    bo_optimize, expected_improvement, gp_posterior, BOState, BoConfig, Dimension, Kernel,
    Observation, SearchSpace,
};
use marginlab::losses::{
    batch_covariance, batch_objective, fidelity, perturb, pf_loss, tissue_compat, LossMode,
    LossWeights, NoiseSource, OmegaSource, PerturbationContext,
};
use marginlab::margins::{
    estimate_input_margin, feature_margins, kendall_tau, logit_margin, margin_separation_auroc,
    min_pairwise_logit_gap, simplex_head, PNorm, ProbeConfig,
};
use marginlab::model::{ModelDims, ModelParams, Pooling};
use marginlab::numerics::{covariance, grad_check, Matrix, RngState};
use marginlab::stats::{bootstrap_ci, fisher_exact, mcnemar_counts, mean, roc_auc, std_dev};
use marginlab::synthdata::{generate_bags, split_bags, BagSpec, PatchBag};
use marginlab::trainer::{evaluate, forward_all, train, TrainConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// 1 ─────────────────────────────────────────────────────────────────────────

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let dims = ModelDims {
        in_dim: 16,
        hidden: 32,
        latent: 16,
        attn_hidden: 8,
        n_classes: 5,
    };
    let only = |ce: f64, con: f64, pf: f64| LossWeights {
        lambda_ce: ce,
        lambda_con: con,
        lambda_pf: pf,
        beta: 0.0,
        ..LossWeights::default()
    };
    let variants = [
        ("ce", only(1.0, 0.0, 0.0)),
        ("con", only(0.0, 1.0, 0.0)),
        ("pf", only(0.0, 0.0, 1.0)),
        ("fused", LossWeights::default()),
    ];
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut rng = RngState::new(100 + seed);
        let p = ModelParams::init(dims, Pooling::Attention, &mut rng);
        let bags: Vec<Vec<Vec<f64>>> = (0..8)
            .map(|_| (0..6).map(|_| rng.normal_vec(16)).collect())
            .collect();
        let refs: Vec<&[Vec<f64>]> = bags.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let omega: Vec<f64> = (0..8).map(|_| 1.0 + rng.uniform()).collect();
        for (name, w) in &variants {
            let r = match batch_objective(
                &p,
                &refs,
                &labels,
                OmegaSource::Fixed(&omega),
                w,
                NoiseSource::Sample(rng.derive(7)),
            ) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("{name} seed {seed}: {e}")),
            };
            let noise = r.noise.clone();
            let f = |flat: &[f64]| {
                let q = p.with_flat(flat).expect("flat length");
                batch_objective(
                    &q,
                    &refs,
                    &labels,
                    OmegaSource::Fixed(&omega),
                    w,
                    NoiseSource::Fixed(noise.clone()),
                )
                .map(|r| r.breakdown.total)
                .unwrap_or(f64::NAN)
            };
            match grad_check(f, &p.to_flat(), &r.grad.to_flat(), 1e-5) {
                Ok(e) => worst = worst.max(e),
                Err(e) => return outcome(false, format!("{name} seed {seed}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e}, {secs:.1} s"),
    )
}

// 2 ─────────────────────────────────────────────────────────────────────────

fn criterion_margin_oracle() -> Outcome {
    let mut rng = RngState::new(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = 1 + rng.below(8);
        let w = Matrix::from_vec(2, d, rng.normal_vec(2 * d)).unwrap();
        let b = rng.normal_vec(2);
        let z = rng.normal_vec(d);
        let fm = feature_margins(&z, &w, &b, PNorm::L2).unwrap();
        let diff: Vec<f64> = (0..d).map(|k| w[(0, k)] - w[(1, k)]).collect();
        let num = diff.iter().zip(&z).map(|(a, x)| a * x).sum::<f64>() + b[0] - b[1];
        let expected = num.abs() / diff.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max((fm.d_feat - expected).abs());
    }
    let mut invariants = true;
    for _ in 0..200 {
        let k = 2 + rng.below(6);
        // eighths keep every sum and difference exact
        let logits: Vec<f64> = (0..k)
            .map(|_| (rng.below(64) as f64 - 32.0) / 8.0)
            .collect();
        let shift = (rng.below(200) as f64 - 100.0) / 4.0;
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        invariants &= logit_margin(&logits).unwrap() == logit_margin(&shifted).unwrap();
        let mut tied = logits.clone();
        let top = tied.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = tied.iter().position(|v| *v == top).unwrap();
        let other = (first + 1 + rng.below(k - 1)) % k;
        tied[other] = top;
        invariants &= logit_margin(&tied).unwrap() == (first.min(other), 0.0);
    }
    outcome(
        worst <= 1e-10 && invariants,
        format!(
            "max |d_feat − closed form| {worst:.1e}, logit invariants {}",
            if invariants { "hold" } else { "broken" }
        ),
    )
}

// 3 ─────────────────────────────────────────────────────────────────────────

fn criterion_symmetric_head() -> Outcome {
    let mut all_one = true;
    let mut detail = Vec::new();
    for seed in [0u64, 1, 2] {
        let spec = BagSpec {
            n_bags: 80,
            patches_per_bag: 16,
            seed,
            ..BagSpec::default()
        };
        let bags = generate_bags(&spec).unwrap();
        let mut p = ModelParams::init(
            ModelDims::default(),
            Pooling::Attention,
            &mut RngState::new(seed),
        );
        p.head_w = simplex_head(5, 16, 0.7 + seed as f64).unwrap();
        p.head_b = vec![0.0; 5];
        let fw = forward_all(&p, &bags).unwrap();
        let d_feat: Vec<f64> = fw
            .iter()
            .map(|f| {
                feature_margins(&f.embedding, &p.head_w, &p.head_b, PNorm::L2)
                    .unwrap()
                    .d_feat
            })
            .collect();
        let gaps: Vec<f64> = fw
            .iter()
            .map(|f| min_pairwise_logit_gap(&f.logits).unwrap())
            .collect();
        let tau = kendall_tau(&d_feat, &gaps).unwrap();
        all_one &= tau == 1.0;
        detail.push(format!("{tau}"));
    }
    outcome(all_one, format!("tau per dataset [{}]", detail.join(", ")))
}

// 4, 5, 7 ──────────────────────────────────────────────────────────────────

fn benchmark_config(mode: LossMode, seed: u64) -> TrainConfig {
    TrainConfig {
        loss_mode: mode,
        seed,
        ..TrainConfig::default()
    }
}

fn benchmark_split(spec: BagSpec) -> (Vec<PatchBag>, Vec<PatchBag>) {
    split_bags(generate_bags(&spec).unwrap(), 250).unwrap()
}

fn margins_on(params: &ModelParams, bags: &[PatchBag]) -> (Vec<f64>, Vec<f64>) {
    forward_all(params, bags)
        .unwrap()
        .iter()
        .map(|f| {
            let d_out = logit_margin(&f.logits).unwrap().1;
            let d_feat = feature_margins(&f.embedding, &params.head_w, &params.head_b, PNorm::L2)
                .unwrap()
                .d_feat;
            (d_out, d_feat)
        })
        .unzip()
}

fn criterion_alignment(full: &[ModelParams], vals: &[Vec<PatchBag>], secs: f64) -> Outcome {
    let taus: Vec<f64> = full
        .iter()
        .zip(vals)
        .map(|(r, va)| {
            let (d_out, d_feat) = margins_on(r, va);
            kendall_tau(&d_feat, &d_out).unwrap()
        })
        .collect();
    let hits = taus.iter().filter(|t| **t >= 0.5).count();
    outcome(
        hits >= 4 && secs < 300.0,
        format!(
            "tau {} ({hits}/5 >= 0.5), training {secs:.0} s",
            fmt_list(&taus)
        ),
    )
}

fn criterion_separation(full: &[ModelParams], vals: &[Vec<PatchBag>]) -> Outcome {
    let probe = ProbeConfig::default();
    let aurocs: Vec<f64> = full
        .iter()
        .zip(vals)
        .enumerate()
        .map(|(s, (r, va))| {
            let (d_out, _) = margins_on(r, va);
            let mut rng = RngState::with_stream(s as u64, 9);
            let d_in: Vec<f64> = va
                .iter()
                .map(|b| estimate_input_margin(r, &b.patches, &probe, &mut rng).unwrap())
                .collect();
            let med = marginlab::stats::median(&d_in);
            let robust: Vec<bool> = d_in.iter().map(|d| *d >= med).collect();
            margin_separation_auroc(&d_out, &robust).unwrap()
        })
        .collect();
    let hits = aurocs.iter().filter(|a| **a >= 0.85).count();
    outcome(
        hits >= 4,
        format!("AUROC {} ({hits}/5 >= 0.85)", fmt_list(&aurocs)),
    )
}

fn criterion_ablation(acc: &[[f64; 5]; 3]) -> Outcome {
    let (ce, con, full) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    let (sd_ce, sd_full) = (std_dev(&acc[0]), std_dev(&acc[2]));
    let tol = 0.01 + 1e-12;
    let ordered = full >= con - tol && con >= ce - tol;
    let variance = sd_full <= 1.25 * sd_ce + 1e-12;
    outcome(
        ordered && full >= 0.9 && variance,
        format!(
            "CE {:.2}±{:.2}%, CE+CON {:.2}±{:.2}%, CE+CON+PF {:.2}±{:.2}%",
            100.0 * ce,
            100.0 * sd_ce,
            100.0 * con,
            100.0 * std_dev(&acc[1]),
            100.0 * full,
            100.0 * sd_full
        ),
    )
}

// 6 ─────────────────────────────────────────────────────────────────────────

fn criterion_attention() -> Outcome {
    let mut margin_wins = 0;
    let mut acc_wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let (tr, va) = benchmark_split(BagSpec {
            noise_tile_rate: 0.5,
            seed,
            ..BagSpec::default()
        });
        let mut res = Vec::new();
        for pooling in [Pooling::Attention, Pooling::Mean] {
            let cfg = TrainConfig {
                pooling,
                ..benchmark_config(LossMode::CeConPf, seed)
            };
            let (p, _) = train(&cfg, &tr, &va).unwrap();
            let (d_out, _) = margins_on(&p, &va);
            res.push((mean(&d_out), evaluate(&p, &va).unwrap().accuracy));
        }
        margin_wins += usize::from(res[0].0 > res[1].0);
        acc_wins += usize::from(res[0].1 >= res[1].1);
        rows.push(format!(
            "d_out {:.2}/{:.2} acc {:.2}/{:.2}",
            res[0].0, res[1].0, res[0].1, res[1].1
        ));
    }
    outcome(
        margin_wins >= 4 && acc_wins >= 4,
        format!(
            "attention/mean per seed: {}; margin {margin_wins}/5, accuracy {acc_wins}/5",
            rows.join("; ")
        ),
    )
}

// 8 ─────────────────────────────────────────────────────────────────────────

fn criterion_bo() -> Outcome {
    let start = Instant::now();
    let space = SearchSpace::new(vec![Dimension {
        name: "x".into(),
        lower: 0.0,
        upper: 1.0,
        gaussian_prior: false,
    }])
    .unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let st = bo_optimize(
            |x| (x[0] - 0.37).powi(2),
            space.clone(),
            BoConfig::default(),
            &mut RngState::new(seed),
        )
        .unwrap();
        let (x, _) = st.best_point().unwrap();
        hits += usize::from((x[0] - 0.37).abs() < 0.05);
    }

    let (sf, l, sn) = (0.8, 0.3, 1e-3);
    let mut st = BOState::new(space);
    st.kernel = Kernel {
        length_scales: vec![l],
        signal_var: sf,
        noise_var: sn,
    };
    let (xs, ys) = ([0.25, 0.7], [0.4, -1.1]);
    for (x, y) in xs.iter().zip(&ys) {
        st.observations.push(Observation {
            x: vec![*x],
            value: *y,
            finite: true,
        });
    }
    let k = |a: f64, b: f64| sf * (-0.5 * ((a - b) / l).powi(2)).exp();
    let mut gp_err = 0.0f64;
    for q in [0.0, 0.3, 0.5, 0.93] {
        let (k11, k12, k22) = (k(xs[0], xs[0]) + sn, k(xs[0], xs[1]), k(xs[1], xs[1]) + sn);
        let det = k11 * k22 - k12 * k12;
        let inv = [[k22 / det, -k12 / det], [-k12 / det, k11 / det]];
        let ks = [k(q, xs[0]), k(q, xs[1])];
        let alpha = [
            inv[0][0] * ys[0] + inv[0][1] * ys[1],
            inv[1][0] * ys[0] + inv[1][1] * ys[1],
        ];
        let m = ks[0] * alpha[0] + ks[1] * alpha[1];
        let v = sf
            - (ks[0] * (inv[0][0] * ks[0] + inv[0][1] * ks[1])
                + ks[1] * (inv[1][0] * ks[0] + inv[1][1] * ks[1]));
        let (pm, pv) = gp_posterior(&st, &[q]).unwrap();
        gp_err = gp_err.max((pm - m).abs()).max((pv - v).abs());
    }

    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let ei_err = [
        (0.0, 1.0, 0.0, phi0),
        (2.0, 4.0, 2.0, 2.0 * phi0),
        (1.0, 0.0, 0.5, 0.0),
    ]
    .iter()
    .map(|(m, v, best, want)| (expected_improvement(*m, *v, *best) - want).abs())
    .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        hits >= 9 && gp_err <= 1e-10 && ei_err <= 1e-9 && secs < 60.0,
        format!("quadratic {hits}/10, GP error {gp_err:.1e}, EI error {ei_err:.1e}, {secs:.1} s"),
    )
}

// 9 ─────────────────────────────────────────────────────────────────────────

fn criterion_pf() -> Outcome {
    let v = [0.3, -1.2, 0.5];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let exact = tissue_compat(&v, &v).unwrap() == 1.0
        && tissue_compat(&[1.0, 0.0], &[0.0, 3.0]).unwrap() == 0.5
        && tissue_compat(&[2.0, 0.0], &[-1.0, 0.0]).unwrap() == 0.0
        && fidelity(&[2.0, 0.0], &[1.0, 0.0]).unwrap() == 1.0
        && fidelity(&[1.0, 0.0], &[0.0, 3.0]).unwrap() == 0.0
        && fidelity(&[2.0, 0.0], &[-1.0, 0.0]).unwrap() == 0.0;
    let near = (tissue_compat(&v, &neg).unwrap()).abs() < 1e-15
        && (fidelity(&v, &v).unwrap() - 1.0).abs() < 1e-15;

    let mut rng = RngState::new(9);
    let feats: Vec<Vec<f64>> = (0..12).map(|_| rng.normal_vec(3)).collect();
    let sigma = batch_covariance(&feats).unwrap();
    let beta = 0.4;
    let mut ctx = PerturbationContext {
        grad: vec![0.0; 3],
        sigma: sigma.clone(),
        rng: RngState::new(10),
    };
    let base = [0.1, 0.2, 0.3];
    let deltas: Vec<Vec<f64>> = (0..100_000)
        .map(|_| {
            let p = perturb(&base, &mut ctx, 0.0, beta).unwrap();
            p.iter().zip(&base).map(|(a, b)| a - b).collect()
        })
        .collect();
    let target = sigma.scale(beta * beta);
    let cov_err = covariance(&deltas)
        .unwrap()
        .sub(&target)
        .unwrap()
        .frobenius()
        / target.frobenius();

    let mut in_range = true;
    for _ in 0..10_000 {
        let n = 2 + rng.below(10);
        let d = 1 + rng.below(6);
        let f: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(d)).collect();
        let g: Vec<Vec<f64>> = f
            .iter()
            .map(|x| {
                x.iter()
                    .map(|a| a + rng.normal() * rng.uniform() * 2.0)
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        if let Ok(l) = pf_loss(&f, &labels, &g) {
            in_range &= (0.0..=1.0).contains(&l);
        }
    }
    outcome(
        exact && near && cov_err < 0.05 && in_range,
        format!(
            "boundary values exact: {exact}, covariance error {:.2}%, pf in [0,1]: {in_range}",
            100.0 * cov_err
        ),
    )
}

// 10 ────────────────────────────────────────────────────────────────────────

fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn fisher_oracle(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let weight = |x: u64| choose(r1, x) * choose(r2, c1 - x);
    let observed = weight(a);
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let (mut num, mut den) = (0u128, 0u128);
    for x in lo..=hi {
        let w = weight(x);
        den += w;
        if w <= observed {
            num += w;
        }
    }
    num as f64 / den as f64
}

fn chi2_1_tail_series(x: f64) -> f64 {
    // lower regularized gamma P(1/2, x/2) by its power series
    let h = x / 2.0;
    let mut term = 1.0 / 0.5;
    let mut sum = term;
    let mut k = 0.5;
    for _ in 0..10_000 {
        k += 1.0;
        term *= h / k;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    let lower = sum * (h.ln() * 0.5 - h - 0.5 * std::f64::consts::PI.ln()).exp();
    1.0 - lower
}

fn kendall_brute(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut con, mut dis, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            if dx == 0.0 && dy == 0.0 {
                tx += 1;
                ty += 1;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                con += 1;
            } else {
                dis += 1;
            }
        }
    }
    let n0 = (x.len() * (x.len() - 1) / 2) as i64;
    let den = (((n0 - tx) * (n0 - ty)) as f64).sqrt();
    (den > 0.0).then(|| (con - dis) as f64 / den)
}

fn auc_brute(s: &[f64], l: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn exhaustive_bootstrap(values: &[f64], level: f64) -> (f64, f64) {
    let n = values.len();
    let mut means = Vec::new();
    for code in 0..n.pow(n as u32) {
        let mut c = code;
        let mut s = 0.0;
        for _ in 0..n {
            s += values[c % n];
            c /= n;
        }
        means.push(s / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * means.len() as f64).ceil() as usize).max(1) - 1];
    ((q((1.0 - level) / 2.0)), q((1.0 + level) / 2.0))
}

fn criterion_stats() -> Outcome {
    let mut fisher_err = 0.0f64;
    for a in 0..=30u64 {
        for b in 0..=30 - a {
            for c in 0..=30 - a - b {
                for d in 0..=30 - a - b - c {
                    if a + b + c + d == 0 {
                        continue;
                    }
                    let got = fisher_exact([[a, b], [c, d]]).unwrap();
                    fisher_err = fisher_err.max((got - fisher_oracle(a, b, c, d)).abs());
                }
            }
        }
    }

    let mut mc_err = 0.0f64;
    for b in 0..=40u64 {
        for c in 0..=40u64 {
            if b + c == 0 {
                continue;
            }
            let (chi2, p) = mcnemar_counts(b, c, false).unwrap();
            let want = (b as f64 - c as f64).powi(2) / (b + c) as f64;
            mc_err = mc_err
                .max((chi2 - want).abs())
                .max((p - chi2_1_tail_series(want)).abs());
        }
    }

    let constant = bootstrap_ci(&[0.7; 5], 2000, 0.95, &RngState::new(1)).unwrap() == (0.7, 0.7);
    let mut boot_ok = constant;
    for (vals, level) in [
        ([1.0, 2.0, 3.0], 0.95),
        ([0.0, 1.0, 5.0], 0.8),
        ([2.0, 2.0, 9.0], 0.9),
    ] {
        let got = bootstrap_ci(&vals, 20_000, level, &RngState::new(3)).unwrap();
        let want = exhaustive_bootstrap(&vals, level);
        boot_ok &= (got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12;
    }

    let mut rng = RngState::new(10);
    let mut kendall_err = 0.0f64;
    let mut kendall_undef = true;
    for _ in 0..1000 {
        let n = 2 + rng.below(49);
        let x: Vec<f64> = (0..n).map(|_| rng.below(8) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.below(8) as f64).collect();
        match (kendall_tau(&x, &y), kendall_brute(&x, &y)) {
            (Ok(t), Some(b)) => kendall_err = kendall_err.max((t - b).abs()),
            (Err(_), None) => {}
            _ => kendall_undef = false,
        }
    }
    let mut auc_err = 0.0f64;
    let mut auc_undef = true;
    for _ in 0..1000 {
        let n = 1 + rng.below(30);
        let s: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 2.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        match (roc_auc(&s, &l), auc_brute(&s, &l)) {
            (Ok(a), Some(b)) => auc_err = auc_err.max((a - b).abs()),
            (Err(_), None) => {}
            _ => auc_undef = false,
        }
    }
    let ok = fisher_err <= 1e-12
        && mc_err <= 1e-6
        && boot_ok
        && kendall_err <= 1e-12
        && kendall_undef
        && auc_err <= 1e-12
        && auc_undef;
    outcome(
        ok,
        format!(
            "fisher {fisher_err:.1e}, mcnemar {mc_err:.1e}, bootstrap {}, kendall {kendall_err:.1e}, auc {auc_err:.1e}",
            if boot_ok { "exact" } else { "mismatch" }
        ),
    )
}

// 11 ────────────────────────────────────────────────────────────────────────

fn log_body(path: &Path) -> Vec<u8> {
    let text = std::fs::read_to_string(path).unwrap();
    text.split_once('\n')
        .map(|x| x.1)
        .unwrap_or("")
        .as_bytes()
        .to_vec()
}

fn run_cli(args: &[&str]) -> i32 {
    marginlab::cli::run(std::iter::once("marginlab").chain(args.iter().copied()))
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.json");
    std::fs::write(
        &config,
        r#"{"dataset":{"n_bags":40,"patches_per_bag":8,"n_classes":3,"feature_dim":6},
            "n_train":28,"train":{"n_classes":3,"max_epochs":6,"learning_rate":0.01},"seeds":[0,1]}"#,
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (c, t1, t2, a1, a2) = (
        s(&config),
        s(&root.join("t1")),
        s(&root.join("t2")),
        s(&root.join("a1")),
        s(&root.join("a2")),
    );
    let mut codes = vec![run_cli(&[
        "--config",
        &c,
        "--threads",
        "1",
        "train",
        "--out",
        &t1,
    ])];
    let m1 = s(&root.join("t1/manifest.json"));
    codes.push(run_cli(&[
        "--config",
        &m1,
        "--threads",
        "3",
        "train",
        "--out",
        &t2,
    ]));
    codes.push(run_cli(&[
        "--config",
        &c,
        "--threads",
        "1",
        "ablate",
        "--out",
        &a1,
    ]));
    let m2 = s(&root.join("a1/manifest.json"));
    codes.push(run_cli(&[
        "--config",
        &m2,
        "--threads",
        "4",
        "ablate",
        "--out",
        &a2,
    ]));
    if codes.iter().any(|c| *c != 0) {
        return outcome(false, format!("exit codes {codes:?}"));
    }
    let mut same =
        log_body(&root.join("t1/run_log.ndjson")) == log_body(&root.join("t2/run_log.ndjson"));
    let mut compared = 1;
    same &= std::fs::read(root.join("a1/ablation.csv")).unwrap()
        == std::fs::read(root.join("a2/ablation.csv")).unwrap();
    for mode in LossMode::ALL {
        for seed in [0, 1] {
            let run = format!("runs/{}_seed{seed}/run_log.ndjson", mode.name());
            same &= log_body(&root.join("a1").join(&run)) == log_body(&root.join("a2").join(&run));
            compared += 1;
        }
    }
    outcome(
        same,
        format!("{compared} run logs and the ablation table compared across thread counts"),
    )
}

fn fmt_list(v: &[f64]) -> String {
    format!(
        "[{}]",
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!(
            "{} criterion {id:>2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };

    report(1, "gradient fidelity", criterion_gradients());
    report(2, "closed-form margin oracle", criterion_margin_oracle());
    report(
        3,
        "symmetric-head margin consistency",
        criterion_symmetric_head(),
    );

    let start = Instant::now();
    let mut acc = [[0.0; 5]; 3];
    let mut full = Vec::new();
    let mut vals = Vec::new();
    let mut full_secs = 0.0;
    for (s, seed) in SEEDS.iter().enumerate() {
        let (tr, va) = benchmark_split(BagSpec {
            seed: *seed,
            ..BagSpec::default()
        });
        for (m, mode) in LossMode::ALL.iter().enumerate() {
            let t = Instant::now();
            let (params, _) = train(&benchmark_config(*mode, *seed), &tr, &va).unwrap();
            acc[m][s] = evaluate(&params, &va).unwrap().accuracy;
            if *mode == LossMode::CeConPf {
                full_secs += t.elapsed().as_secs_f64();
                full.push(params);
            }
        }
        vals.push(va);
    }
    eprintln!(
        "benchmark training took {:.0} s",
        start.elapsed().as_secs_f64()
    );
    report(
        4,
        "trained margin alignment",
        criterion_alignment(&full, &vals, full_secs),
    );
    report(
        5,
        "robust/non-robust separation",
        criterion_separation(&full, &vals),
    );
    report(6, "attention-margin link", criterion_attention());
    report(7, "ablation ordering", criterion_ablation(&acc));
    report(8, "Bayesian optimization", criterion_bo());
    report(9, "perturbation and fidelity mechanics", criterion_pf());
    report(10, "statistics oracles", criterion_stats());
    report(11, "end-to-end determinism", criterion_determinism());

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {}/{} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
