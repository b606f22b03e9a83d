//! Built-in behavioural checks run by the `selftest` subcommand.

use serde::Serialize;

use crate::bayesopt::{
    bo_optimize, expected_improvement, gp_posterior, BOState, BoConfig, Dimension, Kernel,
    SearchSpace,
};
use crate::error::Result;
use crate::losses::{
    cross_entropy, fidelity, perturb, pf_loss, structure_tensor, supcon_loss, tissue_compat,
    total_loss, LossMode, LossTerms, LossWeights, PerturbationContext,
};
use crate::margins::{
    estimate_input_margin, feature_margins, kendall_tau, logit_margin, margin_separation_auroc,
    margin_weight, neural_collapse_index, LinearBagModel, PNorm, ProbeConfig,
};
use crate::model::{attention_pool, classify, encode_patch, ModelDims, ModelParams, Pooling};
use crate::numerics::special::erfc;
use crate::numerics::{cholesky_psd, covariance, grad_check, sample_mvn, Matrix, RngState};
use crate::stats::{
    bootstrap_ci, cap_curve, coefficient_of_variation, cohens_d, fisher_exact, levene,
    mcnemar_counts, per_class_metrics, roc_auc,
};
use crate::synthdata::{generate_bags, split_bags, BagSpec, DomainShift};
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: Option<String>,
}

type CheckFn = Box<dyn Fn() -> Result<bool> + Send + Sync>;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn mat_close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.rows() == b.rows()
        && a.cols() == b.cols()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| close(*x, *y, tol))
}

fn scalar_params() -> ModelParams {
    let dims = ModelDims {
        in_dim: 1,
        hidden: 1,
        latent: 1,
        attn_hidden: 1,
        n_classes: 2,
    };
    let mut p = ModelParams::zeros(dims, Pooling::Attention);
    p.enc_w1[(0, 0)] = 1.0;
    p.enc_w2[(0, 0)] = 1.0;
    p
}

fn one_d_space() -> SearchSpace {
    SearchSpace {
        dims: vec![Dimension {
            name: "x".into(),
            lower: 0.0,
            upper: 1.0,
            gaussian_prior: false,
        }],
    }
}

fn gp_state(xs: &[f64], ys: &[f64], kernel: Kernel) -> BOState {
    let mut s = BOState::new(one_d_space());
    s.kernel = kernel;
    for (x, y) in xs.iter().zip(ys) {
        s.observations.push(crate::bayesopt::Observation {
            x: vec![*x],
            value: *y,
            finite: true,
        });
    }
    s
}

fn small_train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 50,
        patience: 50,
        n_classes: 3,
        hidden: 8,
        latent: 6,
        attn_hidden: 4,
        ..TrainConfig::default()
    }
}

fn clean_small_spec(sep: f64, seed: u64) -> BagSpec {
    BagSpec {
        n_classes: 3,
        n_bags: 60,
        patches_per_bag: 8,
        feature_dim: 6,
        class_separation: sep,
        pattern_mix_rate: 0.0,
        noise_tile_rate: 0.0,
        label_noise_rate: 0.0,
        seed,
        ..BagSpec::default()
    }
}

fn checks() -> Vec<(&'static str, CheckFn)> {
    let mut c: Vec<(&'static str, CheckFn)> = Vec::new();
    macro_rules! check {
        ($name:expr, $body:expr) => {
            c.push(($name, Box::new($body)));
        };
    }

    // numerics
    check!("numerics/cholesky identity", || Ok(cholesky_psd(
        &Matrix::identity(3),
        0.0
    )? == Matrix::identity(
        3
    )));
    check!("numerics/cholesky diagonal", || Ok(mat_close(
        &cholesky_psd(&Matrix::diag(&[4.0, 9.0]), 0.0)?,
        &Matrix::diag(&[2.0, 3.0]),
        0.0
    )));
    check!("numerics/cholesky 2x2 reconstruction", || {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]])?;
        let l = cholesky_psd(&m, 0.0)?;
        Ok(l.matmul(&l.transpose())?.sub(&m)?.frobenius() < 1e-12)
    });
    check!("numerics/mvn zero covariance", || {
        let s = sample_mvn(
            &[1.0, -2.0],
            &Matrix::zeros(2, 2),
            50,
            &mut RngState::new(3),
        )?;
        Ok(s.iter().all(|v| v == &vec![1.0, -2.0]))
    });
    check!("numerics/mvn empirical covariance", || {
        let s = sample_mvn(
            &[0.0; 3],
            &Matrix::identity(3),
            100_000,
            &mut RngState::new(4),
        )?;
        let cov = covariance(&s)?;
        Ok(cov.sub(&Matrix::identity(3))?.frobenius() / Matrix::identity(3).frobenius() < 0.05)
    });
    check!("numerics/mvn determinism", || {
        let cov = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 2.0]])?;
        Ok(sample_mvn(&[0.0; 2], &cov, 20, &mut RngState::new(8))?
            == sample_mvn(&[0.0; 2], &cov, 20, &mut RngState::new(8))?)
    });
    check!("numerics/grad_check constant", || Ok(grad_check(
        |_| 3.0,
        &[0.1, 0.2],
        &[0.0, 0.0],
        1e-5
    )? == 0.0));
    check!("numerics/grad_check quadratic", || {
        let x = [0.3, -1.2, 2.0];
        Ok(grad_check(|v| 0.5 * v.iter().map(|a| a * a).sum::<f64>(), &x, &x, 1e-5)? < 1e-8)
    });
    check!("numerics/grad_check linear", || {
        let a = [0.5, -2.0, 1.5];
        Ok(grad_check(
            |v| v.iter().zip(&a).map(|(x, y)| x * y).sum(),
            &[1.0, 2.0, 3.0],
            &a,
            1e-5,
        )? < 1e-10)
    });

    // synthdata
    check!("synthdata/zero corruption rates", || {
        let spec = BagSpec {
            n_bags: 40,
            pattern_mix_rate: 0.0,
            noise_tile_rate: 0.0,
            label_noise_rate: 0.0,
            ..BagSpec::default()
        };
        Ok(generate_bags(&spec)?
            .iter()
            .all(|b| b.noise_mask.iter().all(|m| !m) && b.label == b.true_label))
    });
    check!("synthdata/label noise fraction", || {
        let spec = BagSpec {
            n_bags: 10_000,
            patches_per_bag: 1,
            label_noise_rate: 0.2,
            seed: 11,
            ..BagSpec::default()
        };
        let bags = generate_bags(&spec)?;
        let f = bags.iter().filter(|b| b.label_flipped()).count() as f64 / bags.len() as f64;
        Ok((0.18..=0.22).contains(&f))
    });
    check!("synthdata/identity domain shift", || {
        let spec = BagSpec {
            n_bags: 20,
            seed: 5,
            ..BagSpec::default()
        };
        let shifted = BagSpec {
            domain_shift: Some(DomainShift::identity(spec.feature_dim)),
            ..spec.clone()
        };
        Ok(generate_bags(&spec)? == generate_bags(&shifted)?)
    });

    // model
    check!("model/zero weights give zero latent", || {
        let p = ModelParams::zeros(ModelDims::default(), Pooling::Attention);
        Ok(encode_patch(&[0.7; 16], &p)?.iter().all(|v| *v == 0.0))
    });
    check!("model/scalar encoder at 0", || Ok(encode_patch(
        &[0.0],
        &scalar_params()
    )? == vec![0.0]));
    check!("model/scalar encoder at 1", || Ok(close(
        encode_patch(&[1.0], &scalar_params())?[0],
        1f64.tanh(),
        1e-15
    )));
    check!("model/single patch pooling", || {
        let p = ModelParams::init(
            ModelDims::default(),
            Pooling::Attention,
            &mut RngState::new(1),
        );
        let u = RngState::new(2).normal_vec(16);
        let (w, z) = attention_pool(std::slice::from_ref(&u), &p)?;
        Ok(w == vec![1.0] && z.iter().zip(&u).all(|(a, b)| close(*a, *b, 1e-15)))
    });
    check!("model/identical latents pool uniformly", || {
        let p = ModelParams::init(
            ModelDims::default(),
            Pooling::Attention,
            &mut RngState::new(1),
        );
        let u = RngState::new(2).normal_vec(16);
        let (w, _) = attention_pool(&vec![u; 5], &p)?;
        Ok(w.iter().all(|v| close(*v, 0.2, 1e-15)))
    });
    check!("model/hand-set attention scores", || {
        let mut p = scalar_params();
        p.attn_v[(0, 0)] = 0.5f64.atanh();
        p.attn_w[0] = 2.0;
        let (w, _) = attention_pool(&[vec![1.0], vec![0.0]], &p)?;
        let e = std::f64::consts::E;
        Ok(close(w[0], e / (e + 1.0), 1e-12) && close(w[1], 1.0 / (e + 1.0), 1e-12))
    });
    check!("model/zero head", || {
        let p = ModelParams::zeros(ModelDims::default(), Pooling::Attention);
        Ok(classify(&[0.4; 16], &p)? == vec![0.0; 5])
    });
    check!("model/bias passthrough", || {
        let dims = ModelDims {
            latent: 2,
            n_classes: 3,
            ..ModelDims::default()
        };
        let mut p = ModelParams::zeros(dims, Pooling::Attention);
        p.head_b = vec![1.0, 2.0, 3.0];
        Ok(classify(&[0.3, 0.1], &p)? == vec![1.0, 2.0, 3.0])
    });
    check!("model/identity head", || {
        let dims = ModelDims {
            latent: 2,
            n_classes: 2,
            ..ModelDims::default()
        };
        let mut p = ModelParams::zeros(dims, Pooling::Attention);
        p.head_w = Matrix::identity(2);
        Ok(classify(&[0.5, -0.25], &p)? == vec![0.5, -0.25])
    });

    // margins
    check!("margins/top-2 difference", || Ok(logit_margin(&[
        3.0, 1.0, 0.0
    ])? == (0, 2.0)));
    check!("margins/tie gives zero", || Ok(
        logit_margin(&[1.0, 1.0])? == (0, 0.0)
    ));
    check!("margins/tie at top picks lowest index", || Ok(
        logit_margin(&[-1.0, 4.0, 3.5, 4.0])? == (1, 0.0)
    ));
    check!("margins/feature margin closed form", || {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
        let fm = feature_margins(&[1.0, 0.0], &w, &[0.0, 0.0], PNorm::L2)?;
        Ok(fm.pairwise[&1] == 1.0 && fm.d_feat == 1.0)
    });
    check!("margins/feature margin on boundary", || {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
        Ok(feature_margins(&[0.0, 0.7], &w, &[0.0, 0.0], PNorm::L2)?.d_feat == 0.0)
    });
    check!("margins/feature margin linear in t", || {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
        let mut ok = true;
        for t in [0.25, 1.0, 3.5] {
            ok &= close(
                feature_margins(&[t, 0.0], &w, &[0.0, 0.0], PNorm::L2)?.d_feat,
                t,
                1e-15,
            );
        }
        Ok(ok)
    });
    check!("margins/omega at threshold", || Ok(close(
        margin_weight(0.5, 0.8, 0.5, 0.1)?,
        1.4,
        1e-15
    )));
    check!("margins/omega with gamma 0", || Ok(margin_weight(
        0.93, 0.0, 0.5, 0.1
    )? == 1.0));
    check!("margins/omega scalar value", || Ok(close(
        margin_weight(0.8, 1.0, 0.5, 0.1)?,
        1.0 + 1.0 / (1.0 + 3f64.exp()),
        1e-15
    )));
    check!("margins/input margin on boundary", || {
        let m = LinearBagModel {
            weights: Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?,
            bias: vec![0.0, 0.0],
        };
        let probe = ProbeConfig {
            tol: 1e-6,
            ..ProbeConfig::default()
        };
        Ok(estimate_input_margin(&m, &[vec![0.0, 1.0]], &probe, &mut RngState::new(0))? <= 1e-6)
    });
    check!("margins/input margin matches linear closed form", || {
        let mut rng = RngState::new(4);
        let probe = ProbeConfig {
            direction_budget: 4,
            tol: 1e-7,
            gradient_directions: true,
        };
        let mut ok = true;
        for _ in 0..10 {
            let m = LinearBagModel {
                weights: Matrix::from_vec(4, 12, rng.normal_vec(48))?,
                bias: rng.normal_vec(4),
            };
            let bag: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(4)).collect();
            let exact = m.boundary_distance(&bag)?;
            ok &= close(
                estimate_input_margin(&m, &bag, &probe, &mut rng)?,
                exact,
                probe.tol + 1e-9,
            );
        }
        Ok(ok)
    });
    check!("margins/input margin invariant to head scaling", || {
        let mut rng = RngState::new(6);
        let m = LinearBagModel {
            weights: Matrix::from_vec(3, 8, rng.normal_vec(24))?,
            bias: rng.normal_vec(3),
        };
        let bag: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(4)).collect();
        let scaled = LinearBagModel {
            weights: m.weights.scale(2.0),
            bias: m.bias.iter().map(|b| 2.0 * b).collect(),
        };
        let probe = ProbeConfig {
            tol: 1e-7,
            ..ProbeConfig::default()
        };
        let a = estimate_input_margin(&m, &bag, &probe, &mut RngState::new(1))?;
        let b = estimate_input_margin(&scaled, &bag, &probe, &mut RngState::new(1))?;
        Ok(close(a, b, 2.0 * probe.tol))
    });
    check!("margins/kendall perfect concordance", || Ok(kendall_tau(
        &[1.0, 2.0, 3.0],
        &[1.0, 2.0, 3.0]
    )? == 1.0));
    check!("margins/kendall perfect discordance", || Ok(kendall_tau(
        &[1.0, 2.0, 3.0],
        &[3.0, 2.0, 1.0]
    )? == -1.0));
    check!("margins/kendall one swap", || Ok(close(
        kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0])?,
        4.0 / 6.0,
        1e-15
    )));
    check!("margins/separation perfect", || Ok(
        margin_separation_auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true])? == 1.0
    ));
    check!("margins/separation all ties", || Ok(
        margin_separation_auroc(&[0.3; 4], &[false, true, false, true])? == 0.5
    ));
    check!("margins/separation enumerated pairs", || {
        let d = [0.1, 0.4, 0.35, 0.8];
        // flags (0,1,0,1): robust {0.4, 0.8} beat non-robust {0.1, 0.35} in all 4 pairs
        let a = margin_separation_auroc(&d, &[false, true, false, true])?;
        let b = margin_separation_auroc(&d, &[false, false, true, true])?;
        Ok(a == 1.0 && b == 0.75)
    });
    check!("margins/collapse at class means", || Ok(
        neural_collapse_index(&[vec![0.0], vec![0.0], vec![2.0], vec![2.0]], &[0, 0, 1, 1])? == 0.0
    ));
    check!("margins/collapse hand scatter", || Ok(close(
        neural_collapse_index(
            &[vec![-1.0], vec![1.0], vec![1.0], vec![3.0]],
            &[0, 0, 1, 1]
        )?,
        1.0,
        1e-15
    )));
    check!("margins/collapse scale invariant", || {
        let x = vec![
            vec![0.3, 1.0],
            vec![0.5, 0.7],
            vec![2.0, -1.0],
            vec![2.4, -0.6],
        ];
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|v| v.iter().map(|a| a * 3.7).collect())
            .collect();
        let l = [0, 0, 1, 1];
        Ok(close(
            neural_collapse_index(&x, &l)?,
            neural_collapse_index(&y, &l)?,
            1e-12,
        ))
    });

    // losses
    check!("losses/ce perfect prediction", || Ok(cross_entropy(
        &[vec![1e4, 0.0, 0.0]],
        &[vec![1.0, 0.0, 0.0]]
    )? < 1e-12));
    check!("losses/ce uniform over 5", || Ok(close(
        cross_entropy(&[vec![0.3; 5]], &[vec![0.0, 0.0, 1.0, 0.0, 0.0]])?,
        5f64.ln(),
        1e-14
    )));
    check!("losses/ce two samples", || Ok(close(
        cross_entropy(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0, 0.0], vec![1.0, 0.0]]
        )?,
        1.62652,
        1e-5
    )));
    check!("losses/supcon single class", || {
        let f = vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![-0.5, 0.4]];
        Ok(supcon_loss(&f, &[1, 1, 1], 0.5, false)?.abs() < 1e-15)
    });
    check!("losses/supcon permutation invariant", || {
        let f = vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![-0.5, 0.4]];
        let g = vec![f[2].clone(), f[0].clone(), f[1].clone()];
        Ok(close(
            supcon_loss(&f, &[0, 1, 0], 0.5, false)?,
            supcon_loss(&g, &[0, 0, 1], 0.5, false)?,
            1e-14,
        ))
    });
    check!("losses/supcon orthogonal pair", || Ok(close(
        supcon_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 1.0, false)?,
        (1.0 + (-1f64).exp()).ln(),
        1e-15
    )));
    check!("losses/compat self", || Ok(close(
        tissue_compat(&[0.3, -1.2], &[0.3, -1.2])?,
        1.0,
        1e-12
    )));
    check!("losses/compat antiparallel", || Ok(close(
        tissue_compat(&[0.3, -1.2], &[-0.3, 1.2])?,
        0.0,
        1e-12
    )));
    check!("losses/compat orthogonal", || Ok(tissue_compat(
        &[1.0, 0.0],
        &[0.0, 2.0]
    )? == 0.5));
    check!("losses/fidelity self", || Ok(close(
        fidelity(&[0.3, -1.2], &[0.3, -1.2])?,
        1.0,
        1e-12
    )));
    check!("losses/fidelity orthogonal", || Ok(fidelity(
        &[1.0, 0.0],
        &[0.0, 2.0]
    )? == 0.0));
    check!("losses/fidelity antiparallel", || Ok(close(
        fidelity(&[0.3, -1.2], &[-0.3, 1.2])?,
        0.0,
        1e-12
    )));
    check!("losses/structure tensor basis", || Ok(structure_tensor(
        &[1.0, 0.0, 0.0]
    )? == Matrix::diag(
        &[1.0, 0.0, 0.0]
    )));
    check!("losses/structure tensor trace", || {
        let g = [0.4, -2.0, 1.5];
        Ok(close(
            structure_tensor(&g)?.trace(),
            0.16 + 4.0 + 2.25,
            1e-14,
        ))
    });
    check!("losses/structure tensor 2-d", || Ok(structure_tensor(&[
        1.0, 2.0
    ])?
        == Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]])?));
    check!("losses/perturb identity", || {
        let mut ctx = PerturbationContext {
            grad: vec![0.7, -0.2],
            sigma: Matrix::identity(2),
            rng: RngState::new(0),
        };
        Ok(perturb(&[0.3, 0.4], &mut ctx, 0.0, 0.0)? == vec![0.3, 0.4])
    });
    check!("losses/perturb deterministic branch", || {
        let mut ctx = PerturbationContext {
            grad: vec![1.0, 0.0],
            sigma: Matrix::identity(2),
            rng: RngState::new(0),
        };
        Ok(perturb(&[0.0, 0.0], &mut ctx, 0.5, 0.0)? == vec![0.5, 0.0])
    });
    check!("losses/perturb noise covariance", || {
        let sigma = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]])?;
        let beta = 0.3;
        let mut ctx = PerturbationContext {
            grad: vec![0.0; 2],
            sigma: sigma.clone(),
            rng: RngState::new(5),
        };
        let mut deltas = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            let p = perturb(&[1.0, 2.0], &mut ctx, 0.0, beta)?;
            deltas.push(vec![p[0] - 1.0, p[1] - 2.0]);
        }
        let target = sigma.scale(beta * beta);
        Ok(covariance(&deltas)?.sub(&target)?.frobenius() / target.frobenius() < 0.05)
    });
    check!("losses/pf one class equal features", || {
        let f = vec![vec![0.6, 0.8]; 3];
        Ok(pf_loss(&f, &[1, 1, 1], &f)?.abs() < 1e-15)
    });
    check!("losses/pf ideal geometry", || {
        let f = vec![
            vec![1.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 3.0],
        ];
        Ok(pf_loss(&f, &[0, 0, 1, 1], &f)?.abs() < 1e-15)
    });
    check!("losses/pf two-pair hand value", || {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        Ok(close(pf_loss(&v, &[0, 0], &v)?, 1.0, 1e-15))
    });
    let terms = LossTerms {
        ce: vec![0.4, 0.6],
        con: vec![0.1, 0.2],
        pf: vec![0.3, 0.3],
    };
    let t1 = terms.clone();
    check!("losses/fusion with ce only", move || {
        let w = LossWeights {
            lambda_ce: 1.0,
            lambda_con: 0.0,
            lambda_pf: 0.0,
            ..LossWeights::default()
        };
        Ok(total_loss(&t1, &w, &[1.0, 1.0])? == 1.0)
    });
    check!("losses/fusion of equal parts", || {
        let ones = LossTerms {
            ce: vec![1.0],
            con: vec![1.0],
            pf: vec![1.0],
        };
        Ok(close(
            total_loss(&ones, &LossWeights::default(), &[1.0])?,
            1.0,
            1e-15,
        ))
    });
    check!("losses/fusion linear in omega", move || {
        let w = LossWeights::default();
        Ok(close(
            total_loss(&terms, &w, &[2.0, 2.6])?,
            2.0 * total_loss(&terms, &w, &[1.0, 1.3])?,
            1e-15,
        ))
    });

    // bayesopt
    check!("bayesopt/noise-free interpolation", || {
        let k = Kernel {
            length_scales: vec![0.2],
            signal_var: 1.5,
            noise_var: 0.0,
        };
        let s = gp_state(&[0.1, 0.5, 0.8], &[0.3, -1.0, 0.7], k);
        let mut ok = true;
        for (x, y) in [(0.1, 0.3), (0.5, -1.0), (0.8, 0.7)] {
            let (m, v) = gp_posterior(&s, &[x])?;
            ok &= close(m, y, 1e-8) && v < 1e-8;
        }
        Ok(ok)
    });
    check!("bayesopt/prior far from data", || {
        let k = Kernel {
            length_scales: vec![0.01],
            signal_var: 2.0,
            noise_var: 1e-6,
        };
        let (m, v) = gp_posterior(&gp_state(&[0.0, 0.05], &[1.0, 2.0], k), &[0.9])?;
        Ok(m.abs() < 1e-6 && close(v, 2.0, 1e-6))
    });
    check!("bayesopt/two-point closed form", || {
        let (sf, l, sn) = (1.3, 0.4, 0.01);
        let k = Kernel {
            length_scales: vec![l],
            signal_var: sf,
            noise_var: sn,
        };
        let (x1, x2, y1, y2, q) = (0.2, 0.6, 1.0, -0.5, 0.35);
        let kf = |a: f64, b: f64| sf * (-0.5 * ((a - b) / l).powi(2)).exp();
        let (a, b, d) = (kf(x1, x1) + sn, kf(x1, x2), kf(x2, x2) + sn);
        let det = a * d - b * b;
        let (k1, k2) = (kf(q, x1), kf(q, x2));
        let mean = (k1 * (d * y1 - b * y2) + k2 * (a * y2 - b * y1)) / det;
        let quad = (k1 * (d * k1 - b * k2) + k2 * (a * k2 - b * k1)) / det;
        let (m, v) = gp_posterior(&gp_state(&[x1, x2], &[y1, y2], k), &[q])?;
        Ok(close(m, mean, 1e-10) && close(v, sf - quad, 1e-10))
    });
    check!("bayesopt/ei without uncertainty", || Ok(
        expected_improvement(1.0, 0.0, 0.5) == 0.0
    ));
    check!("bayesopt/ei at the incumbent", || Ok(close(
        expected_improvement(0.0, 1.0, 0.0),
        1.0 / (2.0 * std::f64::consts::PI).sqrt(),
        1e-12
    )));
    check!("bayesopt/ei grows with spread", || {
        let e: Vec<f64> = [0.1, 0.5, 1.0, 2.0]
            .iter()
            .map(|s: &f64| expected_improvement(1.2, s * s, 1.0))
            .collect();
        Ok(e.windows(2).all(|w| w[1] > w[0]))
    });
    check!("bayesopt/quadratic minimizer", || {
        let mut hits = 0;
        for seed in 0..10 {
            let st = bo_optimize(
                |x| (x[0] - 0.37).powi(2),
                one_d_space(),
                BoConfig::default(),
                &mut RngState::new(seed),
            )?;
            if let Some((x, _)) = st.best_point() {
                hits += usize::from((x[0] - 0.37).abs() < 0.05);
            }
        }
        Ok(hits >= 9)
    });
    check!("bayesopt/points within bounds", || {
        let space = SearchSpace::margin_box(false);
        let st = bo_optimize(
            |x| x.iter().sum(),
            space.clone(),
            BoConfig {
                n_init: 5,
                n_iter: 5,
            },
            &mut RngState::new(2),
        )?;
        Ok(st.trace.iter().all(|r| {
            r.point
                .iter()
                .zip(&space.dims)
                .all(|(v, d)| *v >= d.lower && *v <= d.upper)
        }))
    });
    check!("bayesopt/determinism", || {
        let run = || {
            bo_optimize(
                |x| (x[0] - 0.2).powi(2) + x[1],
                SearchSpace::margin_box(false),
                BoConfig {
                    n_init: 5,
                    n_iter: 4,
                },
                &mut RngState::new(7),
            )
        };
        Ok(run()?.observations == run()?.observations)
    });

    // trainer
    check!("trainer/separable data reaches full accuracy", || {
        let spec = clean_small_spec(8.0, 1);
        let (tr, va) = split_bags(generate_bags(&spec)?, 40)?;
        let (_, h) = train(&small_train_cfg(), &tr, &va)?;
        Ok(h.best_val_accuracy == 1.0)
    });
    check!("trainer/ce mode equals unit ce weights", || {
        let (tr, va) = split_bags(generate_bags(&clean_small_spec(3.0, 3))?, 40)?;
        let base = TrainConfig {
            max_epochs: 3,
            ..small_train_cfg()
        };
        let unit = LossWeights {
            lambda_ce: 1.0,
            lambda_con: 0.0,
            lambda_pf: 0.0,
            ..LossWeights::default()
        };
        let a = TrainConfig {
            loss_mode: LossMode::Ce,
            loss_weights: unit,
            ..base.clone()
        };
        let b = TrainConfig {
            loss_mode: LossMode::CeConPf,
            loss_weights: unit,
            ..base
        };
        Ok(train(&a, &tr, &va)?.0 == train(&b, &tr, &va)?.0)
    });
    check!("trainer/same seed same history", || {
        let (tr, va) = split_bags(generate_bags(&clean_small_spec(3.0, 2))?, 40)?;
        let cfg = TrainConfig {
            max_epochs: 3,
            ..small_train_cfg()
        };
        Ok(train(&cfg, &tr, &va)?.1 == train(&cfg, &tr, &va)?.1)
    });
    check!("trainer/perfect classifier", || {
        // mean pooling + identity-like encoder on one-hot patches
        let k = 3;
        let dims = ModelDims {
            in_dim: k,
            hidden: k,
            latent: k,
            attn_hidden: 1,
            n_classes: k,
        };
        let mut p = ModelParams::zeros(dims, Pooling::Mean);
        p.enc_w1 = Matrix::identity(k);
        p.enc_w2 = Matrix::identity(k);
        p.head_w = Matrix::identity(k);
        let bags: Vec<_> = (0..9)
            .map(|i| {
                let mut x = vec![0.0; k];
                x[i % k] = 1.0;
                crate::synthdata::PatchBag {
                    label: i % k,
                    true_label: i % k,
                    noise_mask: vec![false],
                    patches: vec![x],
                }
            })
            .collect();
        let r = evaluate(&p, &bags)?;
        let diagonal = (0..k).all(|i| (0..k).all(|j| (i == j) == (r.confusion[i][j] > 0)));
        Ok(r.accuracy == 1.0 && diagonal)
    });
    check!("trainer/constant predictor on balanced labels", || {
        let spec = BagSpec {
            n_bags: 50,
            patches_per_bag: 2,
            ..BagSpec::default()
        };
        let bags = generate_bags(&spec)?;
        let mut p = ModelParams::zeros(
            ModelDims {
                in_dim: spec.feature_dim,
                ..ModelDims::default()
            },
            Pooling::Mean,
        );
        p.head_b[2] = 1.0;
        let acc = evaluate(&p, &bags)?.accuracy;
        Ok(close(acc, 0.2, 1.0 / bags.len() as f64 + 1e-12))
    });
    check!("trainer/evaluation order invariant", || {
        let bags = generate_bags(&clean_small_spec(3.0, 4))?;
        let p = ModelParams::init(
            small_train_cfg().dims(6),
            Pooling::Attention,
            &mut RngState::new(3),
        );
        let mut rev = bags.clone();
        rev.reverse();
        Ok(evaluate(&p, &bags)?.accuracy == evaluate(&p, &rev)?.accuracy)
    });

    // stats
    check!("stats/bootstrap constant data", || Ok(bootstrap_ci(
        &[2.5; 3],
        500,
        0.95,
        &RngState::new(0)
    )? == (2.5, 2.5)));
    check!("stats/bootstrap exhaustive n=3", || {
        let (lo, hi) = exhaustive_bootstrap_interval(&[1.0, 2.0, 3.0], 0.95);
        Ok(bootstrap_ci(&[1.0, 2.0, 3.0], 20_000, 0.95, &RngState::new(1))? == (lo, hi))
    });
    check!("stats/bootstrap determinism", || {
        let v = [1.0, 4.0, 2.0, 8.0, 5.0];
        Ok(bootstrap_ci(&v, 300, 0.9, &RngState::new(2))?
            == bootstrap_ci(&v, 300, 0.9, &RngState::new(2))?)
    });
    check!("stats/mcnemar symmetric discordance", || Ok(
        mcnemar_counts(4, 4, false)? == (0.0, 1.0)
    ));
    check!("stats/mcnemar statistic", || Ok(close(
        mcnemar_counts(10, 2, false)?.0,
        64.0 / 12.0,
        1e-12
    )));
    check!("stats/mcnemar tail", || {
        let chi2 = 64.0 / 12.0;
        Ok(close(
            mcnemar_counts(10, 2, false)?.1,
            erfc((chi2 / 2.0f64).sqrt()),
            1e-6,
        ))
    });
    check!("stats/fisher balanced table", || Ok(close(
        fisher_exact([[1, 1], [1, 1]])?,
        1.0,
        1e-15
    )));
    check!("stats/fisher extreme table", || Ok(close(
        fisher_exact([[5, 0], [0, 5]])?,
        2.0 / 252.0,
        1e-15
    )));
    check!("stats/fisher transpose symmetry", || Ok(close(
        fisher_exact([[3, 7], [9, 2]])?,
        fisher_exact([[2, 9], [7, 3]])?,
        1e-15
    )));
    check!("stats/cohens d null", || Ok(cohens_d(
        &[1.0, 2.0, 3.0],
        &[3.0, 2.0, 1.0]
    )? == 0.0));
    check!("stats/cohens d antisymmetric", || {
        let (a, b) = ([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        Ok(cohens_d(&a, &b)? == -cohens_d(&b, &a)?)
    });
    check!("stats/cohens d hand value", || Ok(close(
        cohens_d(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0])?,
        -1.0 / (4.0f64 / 3.0).sqrt(),
        1e-15
    )));
    check!("stats/levene identical groups", || {
        let g = vec![1.0, 4.0, 2.0, 8.0];
        Ok(levene(&[g.clone(), g])? == (0.0, 1.0))
    });
    check!("stats/levene scaled copy", || {
        let g = vec![1.0, 4.0, 2.0, 8.0];
        let big: Vec<f64> = g.iter().map(|v| v * 10.0).collect();
        Ok(levene(&[g, big])?.0 > 0.0)
    });
    check!("stats/levene hand groups", || {
        // deviations from medians: (1,0,1) and (5,0,5); W = (N−k)/(k−1) · SSB/SSW
        Ok(close(
            levene(&[vec![0.0, 1.0, 2.0], vec![0.0, 5.0, 10.0]])?.0,
            4.0 * 8.0 / 13.0,
            1e-10,
        ))
    });
    check!("stats/auc perfect", || Ok(roc_auc(
        &[0.1, 0.2, 0.8, 0.9],
        &[false, false, true, true]
    )? == 1.0));
    check!("stats/auc ties", || Ok(roc_auc(
        &[0.3; 4],
        &[false, false, true, true]
    )? == 0.5));
    check!("stats/auc enumerated", || Ok(roc_auc(
        &[0.1, 0.4, 0.35, 0.8],
        &[false, false, true, true]
    )? == 0.75));
    check!("stats/cap perfect ranking", || Ok(close(
        cap_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false])?.accuracy_ratio,
        1.0,
        1e-12
    )));
    check!("stats/cap uninformative scores", || {
        let mut rng = RngState::new(9);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
        Ok(cap_curve(&scores, &labels)?.accuracy_ratio.abs() < 0.1)
    });
    check!("stats/cap curve shape", || {
        let cap = cap_curve(
            &[0.3, 0.9, 0.1, 0.5, 0.5],
            &[false, true, true, false, true],
        )?;
        Ok(*cap.points.last().unwrap() == (1.0, 1.0)
            && cap.points.windows(2).all(|w| w[1].1 >= w[0].1))
    });
    check!("stats/per-class diagonal", || Ok(per_class_metrics(&[
        vec![3, 0],
        vec![0, 4]
    ])?
    .iter()
    .all(|m| m.sensitivity == Some(1.0)
        && m.specificity == Some(1.0)
        && m.ppv == Some(1.0)
        && m.npv == Some(1.0))));
    check!("stats/per-class empty class", || Ok(per_class_metrics(&[
        vec![0, 0],
        vec![2, 4]
    ])?[0]
        .sensitivity
        .is_none()));
    check!("stats/per-class hand counts", || {
        let m = &per_class_metrics(&[vec![8, 2], vec![1, 9]])?[0];
        Ok(m.sensitivity == Some(0.8)
            && m.specificity == Some(0.9)
            && close(m.ppv.unwrap(), 8.0 / 9.0, 1e-15)
            && close(m.npv.unwrap(), 9.0 / 11.0, 1e-15))
    });
    check!("stats/cv constant", || Ok(coefficient_of_variation(&[
        4.0, 4.0, 4.0
    ])? == 0.0));
    check!("stats/cv hand value", || Ok(close(
        coefficient_of_variation(&[90.0, 100.0, 110.0])?,
        10.0,
        1e-12
    )));
    check!("stats/cv scale invariant", || {
        let v = [1.0, 3.0, 4.0, 9.0];
        let s: Vec<f64> = v.iter().map(|x| x * 2.5).collect();
        Ok(close(
            coefficient_of_variation(&v)?,
            coefficient_of_variation(&s)?,
            1e-12,
        ))
    });
    c
}

/// Percentile interval from the exact bootstrap distribution of the mean:
/// all `nⁿ` equally likely resamples, quantiles by the same interpolation rule
/// over a conceptually infinite resample count (inverse CDF).
pub fn exhaustive_bootstrap_interval(values: &[f64], level: f64) -> (f64, f64) {
    let n = values.len();
    let total = n.pow(n as u32);
    let mut means = Vec::with_capacity(total);
    for mut code in 0..total {
        let mut s = 0.0;
        for _ in 0..n {
            s += values[code % n];
            code /= n;
        }
        means.push(s / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let inv_cdf = |q: f64| means[((q * total as f64).ceil() as usize).clamp(1, total) - 1];
    (inv_cdf(alpha / 2.0), inv_cdf(1.0 - alpha / 2.0))
}

/// Run every check; panics inside a check count as failures.
pub fn run_all() -> Vec<CheckOutcome> {
    checks()
        .into_iter()
        .map(|(name, f)| {
            let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(&f));
            let (passed, detail) = match res {
                Ok(Ok(true)) => (true, None),
                Ok(Ok(false)) => (false, Some("value mismatch".to_string())),
                Ok(Err(e)) => (false, Some(e.to_string())),
                Err(_) => (false, Some("panicked".to_string())),
            };
            CheckOutcome {
                name: name.to_string(),
                passed,
                detail,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_interval_for_three_values() {
        assert_eq!(
            exhaustive_bootstrap_interval(&[1.0, 2.0, 3.0], 0.95),
            (1.0, 3.0)
        );
        assert_eq!(
            exhaustive_bootstrap_interval(&[1.0, 2.0, 3.0], 0.5),
            (5.0 / 3.0, 7.0 / 3.0)
        );
    }

    #[test]
    fn all_checks_pass() {
        let failed: Vec<_> = run_all().into_iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}
