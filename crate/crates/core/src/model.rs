//! Patch encoder, attention pooling and linear head.
//!
//! The encoder maps a patch `x` to a latent `u = W₂ tanh(W₁x + b₁) + b₂`.
//! Attention scores are `sᵢ = w_a · tanh(V uᵢ + c)`, normalized with a softmax
//! into weights `aᵢ`; the slide embedding is `z = Σ aᵢ uᵢ` and the logits are
//! `W z + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix, RngState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub in_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub attn_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            in_dim: 16,
            hidden: 32,
            latent: 16,
            attn_hidden: 8,
            n_classes: 5,
        }
    }
}

/// How patch latents are pooled into a slide embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Attention,
    /// Uniform weights `1/N`; the attention parameters are ignored.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub pooling: Pooling,
    pub enc_w1: Matrix,
    pub enc_b1: Vec<f64>,
    pub enc_w2: Matrix,
    pub enc_b2: Vec<f64>,
    pub attn_v: Matrix,
    pub attn_c: Vec<f64>,
    pub attn_w: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, pooling: Pooling) -> Self {
        Self {
            dims,
            pooling,
            enc_w1: Matrix::zeros(dims.hidden, dims.in_dim),
            enc_b1: vec![0.0; dims.hidden],
            enc_w2: Matrix::zeros(dims.latent, dims.hidden),
            enc_b2: vec![0.0; dims.latent],
            attn_v: Matrix::zeros(dims.attn_hidden, dims.latent),
            attn_c: vec![0.0; dims.attn_hidden],
            attn_w: vec![0.0; dims.attn_hidden],
            head_w: Matrix::zeros(dims.n_classes, dims.latent),
            head_b: vec![0.0; dims.n_classes],
        }
    }

    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization for weights and biases.
    pub fn init(dims: ModelDims, pooling: Pooling, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(dims, pooling);
        let mut fill = |m: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in m.iter_mut() {
                *v = rng.uniform_range(-bound, bound);
            }
        };
        fill(p.enc_w1.as_mut_slice(), dims.in_dim);
        fill(&mut p.enc_b1, dims.in_dim);
        fill(p.enc_w2.as_mut_slice(), dims.hidden);
        fill(&mut p.enc_b2, dims.hidden);
        fill(p.attn_v.as_mut_slice(), dims.latent);
        fill(&mut p.attn_c, dims.latent);
        fill(&mut p.attn_w, dims.attn_hidden);
        fill(p.head_w.as_mut_slice(), dims.latent);
        fill(&mut p.head_b, dims.latent);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims, self.pooling)
    }

    fn blocks(&self) -> [&[f64]; 9] {
        [
            self.enc_w1.as_slice(),
            &self.enc_b1,
            self.enc_w2.as_slice(),
            &self.enc_b2,
            self.attn_v.as_slice(),
            &self.attn_c,
            &self.attn_w,
            self.head_w.as_slice(),
            &self.head_b,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.enc_w1.as_mut_slice(),
            &mut self.enc_b1,
            self.enc_w2.as_mut_slice(),
            &mut self.enc_b2,
            self.attn_v.as_mut_slice(),
            &mut self.attn_c,
            &mut self.attn_w,
            self.head_w.as_mut_slice(),
            &mut self.head_b,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// All parameters in a fixed block order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// `self += scale · other` over every parameter.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            axpy(scale, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Head row `w_k`.
    pub fn head_row(&self, k: usize) -> &[f64] {
        self.head_w.row(k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(f)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

/// Forward pass through one bag, with the activations needed for backprop.
#[derive(Debug, Clone)]
pub struct SlideForward {
    pub latents: Vec<Vec<f64>>,
    pub attn_weights: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    attn_hidden: Vec<Vec<f64>>,
}

fn encoder_hidden(x: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    if x.len() != p.dims.in_dim {
        return Err(Error::dim(format!(
            "patch has {} features, encoder expects {}",
            x.len(),
            p.dims.in_dim
        )));
    }
    let mut h = p.enc_w1.matvec(x)?;
    for (hi, bi) in h.iter_mut().zip(&p.enc_b1) {
        *hi = (*hi + bi).tanh();
    }
    Ok(h)
}

fn encoder_latent(h: &[f64], p: &ModelParams) -> Vec<f64> {
    let mut u = p.enc_w2.matvec(h).expect("hidden width matches encoder");
    for (ui, bi) in u.iter_mut().zip(&p.enc_b2) {
        *ui += bi;
    }
    u
}

pub fn encode_patch(x: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    let h = encoder_hidden(x, p)?;
    Ok(encoder_latent(&h, p))
}

fn attention_hidden(u: &[f64], p: &ModelParams) -> Vec<f64> {
    let mut t = p.attn_v.matvec(u).expect("latent width matches attention");
    for (ti, ci) in t.iter_mut().zip(&p.attn_c) {
        *ti = (*ti + ci).tanh();
    }
    t
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Attention weights, pooled embedding and per-patch hidden activations.
type Pooled = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

fn pool(latents: &[Vec<f64>], p: &ModelParams) -> Result<Pooled> {
    if latents.is_empty() {
        return Err(Error::EmptyBag);
    }
    if let Some(bad) = latents.iter().find(|u| u.len() != p.dims.latent) {
        return Err(Error::dim(format!(
            "latent of length {}, expected {}",
            bad.len(),
            p.dims.latent
        )));
    }
    let n = latents.len();
    let (weights, attn_hidden) = match p.pooling {
        Pooling::Attention => {
            let attn_hidden: Vec<Vec<f64>> =
                latents.iter().map(|u| attention_hidden(u, p)).collect();
            let scores: Vec<f64> = attn_hidden.iter().map(|t| dot(&p.attn_w, t)).collect();
            (softmax(&scores), attn_hidden)
        }
        Pooling::Mean => (vec![1.0 / n as f64; n], Vec::new()),
    };
    let mut z = vec![0.0; p.dims.latent];
    for (a, u) in weights.iter().zip(latents) {
        axpy(*a, u, &mut z);
    }
    Ok((weights, z, attn_hidden))
}

/// Attention weights and the pooled embedding.
pub fn attention_pool(latents: &[Vec<f64>], p: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let (w, z, _) = pool(latents, p)?;
    Ok((w, z))
}

pub fn classify(z: &[f64], p: &ModelParams) -> Result<Vec<f64>> {
    if z.len() != p.dims.latent {
        return Err(Error::dim(format!(
            "embedding of length {}, head expects {}",
            z.len(),
            p.dims.latent
        )));
    }
    let mut logits = p.head_w.matvec(z)?;
    for (l, b) in logits.iter_mut().zip(&p.head_b) {
        *l += b;
    }
    Ok(logits)
}

pub fn forward(patches: &[Vec<f64>], p: &ModelParams) -> Result<SlideForward> {
    if patches.is_empty() {
        return Err(Error::EmptyBag);
    }
    let hidden = patches
        .iter()
        .map(|x| encoder_hidden(x, p))
        .collect::<Result<Vec<_>>>()?;
    let latents: Vec<Vec<f64>> = hidden.iter().map(|h| encoder_latent(h, p)).collect();
    let (attn_weights, embedding, attn_hidden) = pool(&latents, p)?;
    let logits = classify(&embedding, p)?;
    Ok(SlideForward {
        latents,
        attn_weights,
        embedding,
        logits,
        hidden,
        attn_hidden,
    })
}

/// Backprop `dL/dlogits` through the head; accumulates head gradients and
/// returns `dL/dz`.
pub fn head_backward(
    p: &ModelParams,
    z: &[f64],
    d_logits: &[f64],
    grad: &mut ModelParams,
) -> Vec<f64> {
    for (k, g) in d_logits.iter().enumerate() {
        axpy(*g, z, grad.head_w.row_mut(k));
        grad.head_b[k] += g;
    }
    p.head_w
        .tmatvec(d_logits)
        .expect("logit width matches head")
}

/// Backprop `dL/dz` through pooling and the encoder, accumulating into `grad`.
pub fn embedding_backward(
    p: &ModelParams,
    fwd: &SlideForward,
    patches: &[Vec<f64>],
    d_z: &[f64],
    grad: &mut ModelParams,
) {
    let n = fwd.latents.len();
    let mut d_latents: Vec<Vec<f64>> = fwd
        .attn_weights
        .iter()
        .map(|a| d_z.iter().map(|g| a * g).collect())
        .collect();

    if p.pooling == Pooling::Attention {
        let d_a: Vec<f64> = fwd.latents.iter().map(|u| dot(d_z, u)).collect();
        let mean_da: f64 = fwd.attn_weights.iter().zip(&d_a).map(|(a, g)| a * g).sum();
        for i in 0..n {
            let d_s = fwd.attn_weights[i] * (d_a[i] - mean_da);
            if d_s == 0.0 {
                continue;
            }
            let t = &fwd.attn_hidden[i];
            axpy(d_s, t, &mut grad.attn_w);
            let d_pre: Vec<f64> = t
                .iter()
                .zip(&p.attn_w)
                .map(|(ti, wi)| d_s * wi * (1.0 - ti * ti))
                .collect();
            for (r, g) in d_pre.iter().enumerate() {
                axpy(*g, &fwd.latents[i], grad.attn_v.row_mut(r));
                grad.attn_c[r] += g;
            }
            let back = p.attn_v.tmatvec(&d_pre).expect("attention width");
            axpy(1.0, &back, &mut d_latents[i]);
        }
    }

    for i in 0..n {
        let du = &d_latents[i];
        let h = &fwd.hidden[i];
        for (r, g) in du.iter().enumerate() {
            axpy(*g, h, grad.enc_w2.row_mut(r));
            grad.enc_b2[r] += g;
        }
        let dh = p.enc_w2.tmatvec(du).expect("latent width");
        for (r, (g, hv)) in dh.iter().zip(h).enumerate() {
            let d_pre = g * (1.0 - hv * hv);
            axpy(d_pre, &patches[i], grad.enc_w1.row_mut(r));
            grad.enc_b1[r] += d_pre;
        }
    }
}

/// `d(logit_k)/dθ` for one bag; used for gradient-guided probing.
pub fn logit_gradient_wrt_patches(
    p: &ModelParams,
    fwd: &SlideForward,
    d_logits: &[f64],
) -> Vec<Vec<f64>> {
    let d_z = p.head_w.tmatvec(d_logits).expect("logit width");
    let n = fwd.latents.len();
    let mut d_latents: Vec<Vec<f64>> = fwd
        .attn_weights
        .iter()
        .map(|a| d_z.iter().map(|g| a * g).collect())
        .collect();
    if p.pooling == Pooling::Attention {
        let d_a: Vec<f64> = fwd.latents.iter().map(|u| dot(&d_z, u)).collect();
        let mean_da: f64 = fwd.attn_weights.iter().zip(&d_a).map(|(a, g)| a * g).sum();
        for i in 0..n {
            let d_s = fwd.attn_weights[i] * (d_a[i] - mean_da);
            let d_pre: Vec<f64> = fwd.attn_hidden[i]
                .iter()
                .zip(&p.attn_w)
                .map(|(ti, wi)| d_s * wi * (1.0 - ti * ti))
                .collect();
            let back = p.attn_v.tmatvec(&d_pre).expect("attention width");
            axpy(1.0, &back, &mut d_latents[i]);
        }
    }
    d_latents
        .iter()
        .zip(&fwd.hidden)
        .map(|(du, h)| {
            let dh = p.enc_w2.tmatvec(du).expect("latent width");
            let d_pre: Vec<f64> = dh
                .iter()
                .zip(h)
                .map(|(g, hv)| g * (1.0 - hv * hv))
                .collect();
            p.enc_w1.tmatvec(&d_pre).expect("hidden width")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

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

    #[test]
    fn zero_weights_give_zero_latent() {
        let p = ModelParams::zeros(ModelDims::default(), Pooling::Attention);
        let u = encode_patch(&[0.7; 16], &p).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_encoder() {
        let p = scalar_params();
        assert_eq!(encode_patch(&[0.0], &p).unwrap(), vec![0.0]);
        let u = encode_patch(&[1.0], &p).unwrap()[0];
        assert!((u - 1f64.tanh()).abs() < 1e-15);
        assert!((u - 0.7616).abs() < 1e-4);
    }

    #[test]
    fn encoder_dimension_mismatch() {
        let p = scalar_params();
        assert!(matches!(
            encode_patch(&[1.0, 2.0], &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pooling_edge_cases() {
        let mut rng = RngState::new(1);
        let p = ModelParams::init(ModelDims::default(), Pooling::Attention, &mut rng);
        let u = rng.normal_vec(16);
        let (w, z) = attention_pool(std::slice::from_ref(&u), &p).unwrap();
        assert_eq!(w, vec![1.0]);
        assert!(z.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-15));

        let (w, _) = attention_pool(&vec![u.clone(); 4], &p).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));

        assert!(matches!(attention_pool(&[], &p), Err(Error::EmptyBag)));
    }

    #[test]
    fn hand_set_scores() {
        // score = w_a · tanh(V u); pick V = atanh(1/2)·1, w_a = 2 so u=1 scores 1, u=0 scores 0.
        let mut p = scalar_params();
        p.attn_v[(0, 0)] = 0.5f64.atanh();
        p.attn_w[0] = 2.0;
        let (w, z) = attention_pool(&[vec![1.0], vec![0.0]], &p).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4);
        assert!((z[0] - w[0]).abs() < 1e-15);
    }

    #[test]
    fn classify_cases() {
        let dims = ModelDims {
            latent: 2,
            n_classes: 3,
            ..ModelDims::default()
        };
        let mut p = ModelParams::zeros(dims, Pooling::Attention);
        assert_eq!(classify(&[0.3, 0.1], &p).unwrap(), vec![0.0; 3]);
        p.head_b = vec![1.0, 2.0, 3.0];
        assert_eq!(classify(&[0.3, 0.1], &p).unwrap(), vec![1.0, 2.0, 3.0]);
        let dims2 = ModelDims {
            latent: 2,
            n_classes: 2,
            ..ModelDims::default()
        };
        let mut q = ModelParams::zeros(dims2, Pooling::Attention);
        q.head_w = Matrix::identity(2);
        assert_eq!(classify(&[0.5, -0.25], &q).unwrap(), vec![0.5, -0.25]);
        assert!(classify(&[0.5], &q).is_err());
    }

    #[test]
    fn forward_invariants() {
        let mut rng = RngState::new(5);
        let p = ModelParams::init(ModelDims::default(), Pooling::Attention, &mut rng);
        let patches: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(16)).collect();
        let f = forward(&patches, &p).unwrap();
        let total: f64 = f.attn_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(f.attn_weights.iter().all(|a| *a >= 0.0));
        for d in 0..16 {
            let lo = f.latents.iter().map(|u| u[d]).fold(f64::INFINITY, f64::min);
            let hi = f
                .latents
                .iter()
                .map(|u| u[d])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(f.embedding[d] >= lo - 1e-12 && f.embedding[d] <= hi + 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = RngState::new(2);
        let p = ModelParams::init(ModelDims::default(), Pooling::Attention, &mut rng);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.n_params());
        assert_eq!(p.with_flat(&flat).unwrap(), p);
    }

    fn check_true_logit_gradient(pooling: Pooling, seed: u64) -> f64 {
        let mut rng = RngState::new(seed);
        let dims = ModelDims::default();
        let p = ModelParams::init(dims, pooling, &mut rng);
        let patches: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(16)).collect();
        let label = 2;
        let fwd = forward(&patches, &p).unwrap();
        let mut grad = p.zeros_like();
        let mut d_logits = vec![0.0; dims.n_classes];
        d_logits[label] = 1.0;
        let d_z = head_backward(&p, &fwd.embedding, &d_logits, &mut grad);
        embedding_backward(&p, &fwd, &patches, &d_z, &mut grad);
        let f = |flat: &[f64]| {
            let q = p.with_flat(flat).unwrap();
            forward(&patches, &q).unwrap().logits[label]
        };
        grad_check(f, &p.to_flat(), &grad.to_flat(), 1e-5).unwrap()
    }

    #[test]
    fn true_logit_gradient_passes_check() {
        for seed in 0..3 {
            assert!(check_true_logit_gradient(Pooling::Attention, seed) < 1e-4);
            assert!(check_true_logit_gradient(Pooling::Mean, seed) < 1e-4);
        }
    }

    #[test]
    fn patch_gradient_matches_finite_difference() {
        let mut rng = RngState::new(8);
        let p = ModelParams::init(ModelDims::default(), Pooling::Attention, &mut rng);
        let patches: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(16)).collect();
        let fwd = forward(&patches, &p).unwrap();
        let mut d_logits = vec![0.0; 5];
        d_logits[1] = 1.0;
        d_logits[3] = -1.0;
        let g = logit_gradient_wrt_patches(&p, &fwd, &d_logits).concat();
        let f = |flat: &[f64]| {
            let bag: Vec<Vec<f64>> = flat.chunks(16).map(|c| c.to_vec()).collect();
            let l = forward(&bag, &p).unwrap().logits;
            l[1] - l[3]
        };
        assert!(grad_check(f, &patches.concat(), &g, 1e-5).unwrap() < 1e-6);
    }
}
