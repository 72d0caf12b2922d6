//! Synthetic benchmark with known semantic and nuisance factors.
//!
//! ```text
//! a_c ~ U(0,1)^k                      per class
//! s   = M_s (a_y - 1/2) + σ_s ε       semantic factor, p dims
//! n   ~ N(0, I_q)                     nuisance factor, independent of y
//! x   = tanh(G [s; γ n]) + σ_x ε      observation, d dims
//! ```
//! `M_s` has entries N(0, 12/k) so every semantic coordinate of a class mean
//! has unit variance across classes; `G` has entries N(0, 1/(p+q)).

use serde::{Deserialize, Serialize};

use super::{BundleParts, DatasetBundle};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub attr_dim: usize,
    pub semantic_dim: usize,
    pub nuisance_dim: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    /// σ_s
    pub semantic_noise: f64,
    /// γ, the weight of the nuisance block inside the mixing.
    pub nuisance_gain: f64,
    /// σ_x
    pub observation_noise: f64,
    /// Fraction of each seen class used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seen_classes: 8,
            unseen_classes: 2,
            attr_dim: 6,
            semantic_dim: 4,
            nuisance_dim: 4,
            feature_dim: 32,
            samples_per_class: 100,
            semantic_noise: 0.1,
            nuisance_gain: 1.0,
            observation_noise: 0.05,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seen_classes == 0 || self.unseen_classes == 0 {
            return bad("need at least one seen and one unseen class".into());
        }
        if self.attr_dim == 0 || self.semantic_dim == 0 || self.nuisance_dim == 0 {
            return bad("attribute, semantic and nuisance dims must be positive".into());
        }
        if self.feature_dim < self.semantic_dim + self.nuisance_dim {
            return bad(format!(
                "feature_dim {} is below semantic_dim + nuisance_dim = {}",
                self.feature_dim,
                self.semantic_dim + self.nuisance_dim
            ));
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2".into());
        }
        let noise_ok = |v: f64| v.is_finite() && v >= 0.0;
        if !noise_ok(self.semantic_noise) || !noise_ok(self.observation_noise) || !noise_ok(self.nuisance_gain) {
            return bad("noise scales must be finite and nonnegative".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must be in (0, 1)", self.train_fraction));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }
}

/// Per-sample factors behind the observations, row-aligned with the features.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[N × p]`
    pub semantic: Tensor<f32>,
    /// `[N × q]`
    pub nuisance: Tensor<f32>,
    /// `[p × k]`
    pub semantic_map: Tensor<f64>,
    /// `[d × (p+q)]`
    pub mixing: Tensor<f64>,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).expect("shape")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetBundle, GroundTruth)> {
    spec.validate()?;
    let (c, k, p, q, d) = (
        spec.num_classes(),
        spec.attr_dim,
        spec.semantic_dim,
        spec.nuisance_dim,
        spec.feature_dim,
    );
    let mut structure = Rng::new(spec.seed, "synthetic/structure");
    let mut samples = Rng::new(spec.seed, "synthetic/samples");
    let mut split = Rng::new(spec.seed, "synthetic/split");

    let attributes = Tensor::matrix(c, k, (0..c * k).map(|_| structure.uniform()).collect())?;
    let m_s = gaussian(&mut structure, p, k, (12.0 / k as f64).sqrt());
    let mixing = gaussian(&mut structure, d, p + q, (1.0 / (p + q) as f64).sqrt());
    let mut classes: Vec<i64> = (0..c as i64).collect();
    structure.shuffle(&mut classes);
    let (seen, unseen) = classes.split_at(spec.seen_classes);
    let mut seen = seen.to_vec();
    let mut unseen = unseen.to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();

    let n = c * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut sem = Vec::with_capacity(n * p);
    let mut nui = Vec::with_capacity(n * q);
    let mut labels = Vec::with_capacity(n);
    let mut latent = vec![0.0; p + q];
    for class in 0..c {
        let a = attributes.row(class);
        for _ in 0..spec.samples_per_class {
            for (i, slot) in latent[..p].iter_mut().enumerate() {
                let mean: f64 = m_s.row(i).iter().zip(a).map(|(m, av)| m * (av - 0.5)).sum();
                *slot = mean + spec.semantic_noise * samples.normal();
            }
            for slot in &mut latent[p..] {
                *slot = samples.normal();
            }
            sem.extend(latent[..p].iter().map(|&v| v as f32));
            nui.extend(latent[p..].iter().map(|&v| v as f32));
            for r in 0..d {
                let row = mixing.row(r);
                let pre: f64 = row[..p].iter().zip(&latent[..p]).map(|(g, v)| g * v).sum::<f64>()
                    + spec.nuisance_gain * row[p..].iter().zip(&latent[p..]).map(|(g, v)| g * v).sum::<f64>();
                features.push((pre.tanh() + spec.observation_noise * samples.normal()) as f32);
            }
            labels.push(class as i64);
        }
    }

    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    let mut test_unseen = Vec::new();
    let n_train = ((spec.samples_per_class as f64 * spec.train_fraction).round() as usize)
        .clamp(1, spec.samples_per_class - 1);
    for class in 0..c as i64 {
        let first = class as usize * spec.samples_per_class;
        let mut rows: Vec<i64> = (first..first + spec.samples_per_class).map(|i| i as i64).collect();
        if seen.contains(&class) {
            split.shuffle(&mut rows);
            let (tr, te) = rows.split_at(n_train);
            train.extend_from_slice(tr);
            test_seen.extend_from_slice(te);
        } else {
            test_unseen.extend(rows);
        }
    }
    train.sort_unstable();
    test_seen.sort_unstable();

    let bundle = DatasetBundle::new(BundleParts {
        features: Some(Tensor::matrix(n, d, features)?),
        labels,
        attributes: Some(attributes.cast()),
        seen_classes: seen,
        unseen_classes: unseen,
        train_seen_idx: train,
        test_seen_idx: test_seen,
        test_unseen_idx: test_unseen,
    })?;
    let truth = GroundTruth {
        semantic: Tensor::matrix(n, p, sem)?,
        nuisance: Tensor::matrix(n, q, nui)?,
        semantic_map: m_s,
        mixing,
    };
    Ok((bundle, truth))
}
