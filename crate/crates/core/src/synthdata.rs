//! Synthetic patch bags standing in for whole-slide images.
//!
//! Each bag is a set of patch feature vectors. Class-specific patches are
//! drawn around a class prototype; the generator can additionally mix in
//! patches of other classes, replace patches with wide class-independent
//! artifact tiles, flip bag labels, and apply a global affine shift.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

/// Artifact tiles have this many times the within-class variance.
pub const ARTIFACT_VARIANCE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub matrix: Matrix,
    pub offset: Vec<f64>,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Matrix::identity(dim),
            offset: vec![0.0; dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.matrix.matvec(x)?;
        for (yi, ti) in y.iter_mut().zip(&self.offset) {
            *yi += ti;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagSpec {
    pub n_classes: usize,
    pub n_bags: usize,
    pub patches_per_bag: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub pattern_mix_rate: f64,
    pub noise_tile_rate: f64,
    pub label_noise_rate: f64,
    pub domain_shift: Option<DomainShift>,
    pub seed: u64,
}

impl Default for BagSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_bags: 350,
            patches_per_bag: 64,
            feature_dim: 16,
            class_separation: 3.0,
            pattern_mix_rate: 0.1,
            noise_tile_rate: 0.2,
            label_noise_rate: 0.05,
            domain_shift: None,
            seed: 0,
        }
    }
}

impl BagSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 1 {
            return Err(Error::Spec("feature_dim must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Spec("n_classes must be at least 2".into()));
        }
        if self.patches_per_bag < 1 {
            return Err(Error::Spec("patches_per_bag must be at least 1".into()));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::Spec(
                "class_separation must be finite and >= 0".into(),
            ));
        }
        for (name, r) in [
            ("pattern_mix_rate", self.pattern_mix_rate),
            ("noise_tile_rate", self.noise_tile_rate),
            ("label_noise_rate", self.label_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Spec(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if let Some(shift) = &self.domain_shift {
            let d = self.feature_dim;
            if shift.matrix.rows() != d || shift.matrix.cols() != d || shift.offset.len() != d {
                return Err(Error::Spec(
                    "domain shift dimensions differ from feature_dim".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchBag {
    pub label: usize,
    pub true_label: usize,
    pub noise_mask: Vec<bool>,
    pub patches: Vec<Vec<f64>>,
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn label_flipped(&self) -> bool {
        self.label != self.true_label
    }
}

/// Class prototypes with all pairwise distances equal to `separation`.
///
/// Uses scaled simplex vertices `e_k − 1/K` when `dim ≥ K`. Lower dimensions
/// cannot host an equidistant set, so prototypes are spread on a circle (or a
/// line when `dim = 1`) with the nearest pair `separation` apart.
pub fn class_prototypes(n_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let k = n_classes as f64;
    if dim >= n_classes {
        let scale = separation / std::f64::consts::SQRT_2;
        return (0..n_classes)
            .map(|c| {
                let mut p = vec![0.0; dim];
                for (i, v) in p.iter_mut().enumerate().take(n_classes) {
                    *v = scale * (if i == c { 1.0 } else { 0.0 } - 1.0 / k);
                }
                p
            })
            .collect();
    }
    if dim == 1 {
        let mid = (k - 1.0) / 2.0;
        return (0..n_classes)
            .map(|c| vec![separation * (c as f64 - mid)])
            .collect();
    }
    let step = 2.0 * std::f64::consts::PI / k;
    let radius = separation / (2.0 * (step / 2.0).sin());
    (0..n_classes)
        .map(|c| {
            let mut p = vec![0.0; dim];
            p[0] = radius * (step * c as f64).cos();
            p[1] = radius * (step * c as f64).sin();
            p
        })
        .collect()
}

pub fn generate_bags(spec: &BagSpec) -> Result<Vec<PatchBag>> {
    spec.validate()?;
    let prototypes = class_prototypes(spec.n_classes, spec.feature_dim, spec.class_separation);
    let base = RngState::new(spec.seed);

    let mut labels: Vec<usize> = (0..spec.n_bags).map(|i| i % spec.n_classes).collect();
    let mut order_rng = base.derive(u64::MAX);
    order_rng.shuffle(&mut labels);

    labels
        .par_iter()
        .enumerate()
        .map(|(i, &true_label)| {
            let mut rng = base.derive(i as u64);
            generate_one(spec, &prototypes, true_label, &mut rng)
        })
        .collect()
}

fn generate_one(
    spec: &BagSpec,
    prototypes: &[Vec<f64>],
    true_label: usize,
    rng: &mut RngState,
) -> Result<PatchBag> {
    let d = spec.feature_dim;
    let k = spec.n_classes;
    let artifact_sd = ARTIFACT_VARIANCE.sqrt();
    let mut patches = Vec::with_capacity(spec.patches_per_bag);
    let mut noise_mask = Vec::with_capacity(spec.patches_per_bag);
    for _ in 0..spec.patches_per_bag {
        let is_noise = rng.uniform() < spec.noise_tile_rate;
        let mix = rng.uniform() < spec.pattern_mix_rate;
        let other = other_class(true_label, k, rng);
        let mut x = rng.normal_vec(d);
        if is_noise {
            x.iter_mut().for_each(|v| *v *= artifact_sd);
        } else {
            let proto = if mix {
                &prototypes[other]
            } else {
                &prototypes[true_label]
            };
            for (xi, pi) in x.iter_mut().zip(proto) {
                *xi += pi;
            }
        }
        if let Some(shift) = &spec.domain_shift {
            x = shift.apply(&x)?;
        }
        patches.push(x);
        noise_mask.push(is_noise);
    }
    let flip = rng.uniform() < spec.label_noise_rate;
    let other = other_class(true_label, k, rng);
    let label = if flip { other } else { true_label };
    Ok(PatchBag {
        label,
        true_label,
        noise_mask,
        patches,
    })
}

/// Uniform draw over the classes other than `c`.
fn other_class(c: usize, k: usize, rng: &mut RngState) -> usize {
    let r = rng.below(k - 1);
    if r >= c {
        r + 1
    } else {
        r
    }
}

/// Bag-level split: the first `n_train` bags train, the rest validate.
pub fn split_bags(
    mut bags: Vec<PatchBag>,
    n_train: usize,
) -> Result<(Vec<PatchBag>, Vec<PatchBag>)> {
    if n_train == 0 || n_train >= bags.len() {
        return Err(Error::Spec(format!(
            "cannot split {} bags with {n_train} for training",
            bags.len()
        )));
    }
    let val = bags.split_off(n_train);
    Ok((bags, val))
}

pub fn write_ndjson<W: Write>(mut w: W, bags: &[PatchBag]) -> Result<()> {
    for bag in bags {
        serde_json::to_writer(&mut w, bag)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<PatchBag>> {
    let mut bags = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        bags.push(serde_json::from_str(&line)?);
    }
    Ok(bags)
}

pub fn save_dataset(path: &Path, bags: &[PatchBag]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ndjson(f, bags)
}

pub fn load_dataset(path: &Path) -> Result<Vec<PatchBag>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ndjson(f)
}

/// Nearest-prototype classifier on the mean-pooled bag; used as a
/// separability oracle.
pub fn nearest_prototype_accuracy(bags: &[PatchBag], prototypes: &[Vec<f64>]) -> f64 {
    if bags.is_empty() {
        return 0.0;
    }
    let correct = bags
        .iter()
        .filter(|bag| {
            let d = bag.patches[0].len();
            let mut mean = vec![0.0; d];
            for p in &bag.patches {
                crate::numerics::axpy(1.0 / bag.len() as f64, p, &mut mean);
            }
            let pred = prototypes
                .iter()
                .enumerate()
                .map(|(c, proto)| {
                    let dist: f64 = proto
                        .iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (c, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            pred == bag.label
        })
        .count();
    correct as f64 / bags.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_spec() -> BagSpec {
        BagSpec {
            n_bags: 40,
            patches_per_bag: 8,
            pattern_mix_rate: 0.0,
            noise_tile_rate: 0.0,
            label_noise_rate: 0.0,
            seed: 3,
            ..BagSpec::default()
        }
    }

    #[test]
    fn zero_rates_give_clean_bags() {
        let bags = generate_bags(&clean_spec()).unwrap();
        assert_eq!(bags.len(), 40);
        for b in &bags {
            assert!(b.noise_mask.iter().all(|m| !m));
            assert_eq!(b.label, b.true_label);
            assert_eq!(b.len(), 8);
        }
    }

    #[test]
    fn labels_balanced() {
        let spec = BagSpec {
            n_bags: 53,
            ..clean_spec()
        };
        let bags = generate_bags(&spec).unwrap();
        let mut counts = vec![0usize; spec.n_classes];
        for b in &bags {
            counts[b.true_label] += 1;
        }
        let min = *counts.iter().min().unwrap();
        let max = *counts.iter().max().unwrap();
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn label_noise_fraction() {
        let spec = BagSpec {
            n_bags: 10_000,
            patches_per_bag: 1,
            feature_dim: 2,
            label_noise_rate: 0.2,
            ..clean_spec()
        };
        let bags = generate_bags(&spec).unwrap();
        let flipped = bags.iter().filter(|b| b.label_flipped()).count() as f64 / 1e4;
        assert!((0.18..=0.22).contains(&flipped), "{flipped}");
    }

    #[test]
    fn identity_shift_is_noop() {
        let spec = clean_spec();
        let shifted = BagSpec {
            domain_shift: Some(DomainShift::identity(spec.feature_dim)),
            ..spec.clone()
        };
        assert_eq!(
            generate_bags(&spec).unwrap(),
            generate_bags(&shifted).unwrap()
        );
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let spec = BagSpec {
            noise_tile_rate: 0.3,
            label_noise_rate: 0.1,
            ..clean_spec()
        };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| generate_bags(&spec)).unwrap();
        let b = four.install(|| generate_bags(&spec)).unwrap();
        let mut sa = Vec::new();
        let mut sb = Vec::new();
        write_ndjson(&mut sa, &a).unwrap();
        write_ndjson(&mut sb, &b).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn invalid_specs() {
        let bad_dim = BagSpec {
            feature_dim: 0,
            ..clean_spec()
        };
        assert!(matches!(generate_bags(&bad_dim), Err(Error::Spec(_))));
        let bad_rate = BagSpec {
            noise_tile_rate: 1.5,
            ..clean_spec()
        };
        assert!(generate_bags(&bad_rate).is_err());
    }

    #[test]
    fn prototypes_equidistant() {
        let p = class_prototypes(5, 16, 3.0);
        for i in 0..5 {
            for j in (i + 1)..5 {
                let d: f64 = p[i]
                    .iter()
                    .zip(&p[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn well_separated_clean_data_is_oracle_separable() {
        let spec = BagSpec {
            class_separation: 10.0,
            n_bags: 100,
            ..clean_spec()
        };
        let bags = generate_bags(&spec).unwrap();
        let protos = class_prototypes(spec.n_classes, spec.feature_dim, spec.class_separation);
        assert_eq!(nearest_prototype_accuracy(&bags, &protos), 1.0);
    }

    #[test]
    fn artifact_tiles_hurt_mean_pooling() {
        let rates = [0.0, 0.4, 0.8];
        let mut acc = [0.0; 3];
        for seed in 0..5 {
            for (r, rate) in rates.iter().enumerate() {
                let spec = BagSpec {
                    n_bags: 200,
                    patches_per_bag: 4,
                    class_separation: 1.5,
                    noise_tile_rate: *rate,
                    seed,
                    ..clean_spec()
                };
                let bags = generate_bags(&spec).unwrap();
                let protos = class_prototypes(5, 16, 1.5);
                acc[r] += nearest_prototype_accuracy(&bags, &protos) / 5.0;
            }
        }
        assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
    }

    #[test]
    fn ndjson_round_trip() {
        let bags = generate_bags(&clean_spec()).unwrap();
        let mut buf = Vec::new();
        write_ndjson(&mut buf, &bags).unwrap();
        let back = read_ndjson(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(bags, back);
    }
}
