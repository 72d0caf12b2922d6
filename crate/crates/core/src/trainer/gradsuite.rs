//! Finite-difference verification of every training loss term in `f64`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::losses::{dis_term, overall1_terms, tc_term, Streams};
use crate::data::Batch;
use crate::error::Result;
use crate::networks::{ArchConfig, Ctx, ModelState, Net, Noise};
use crate::objectives::{permutation_pair, Reduction};
use crate::tensor::{grad_check, AdamConfig, GradCheckReport, Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub batch: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub latent_dim: usize,
    pub hs_dim: usize,
    pub hn_dim: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    pub dis_hidden: Vec<usize>,
    /// Largest finite-difference step.
    pub eps: f64,
    pub tolerance: f64,
    pub streams: Streams,
    pub reduction: Reduction,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            batch: 8,
            classes: 3,
            feature_dim: 16,
            attr_dim: 6,
            latent_dim: 4,
            hs_dim: 4,
            hn_dim: 4,
            hidden: 8,
            dis_hidden: vec![8],
            eps: 1e-4,
            tolerance: 1e-6,
            streams: Streams::Both,
            reduction: Reduction::BatchMean,
        }
    }
}

/// Result for one loss term at one seed.
#[derive(Clone, Debug, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

pub const TERMS: [&str; 5] = ["loss_cvae", "loss_rec", "loss_rel", "tc", "loss_dis"];

/// Checks the cVAE, reconstruction, relation, TC and discriminator losses on a
/// random model and batch drawn from `seed`. Noise, dropout masks and
/// permutations are frozen so each loss is a pure function of the weights.
///
/// The discriminator loss sees a detached `h`, so it is checked against the
/// discriminator's parameters only; every other term is checked against all
/// parameters.
pub fn gradient_suite(seed: u64, cfg: &GradSuiteConfig) -> Result<Vec<TermCheck>> {
    let arch = ArchConfig {
        feature_dim: cfg.feature_dim,
        attr_dim: cfg.attr_dim,
        latent_dim: cfg.latent_dim,
        hs_dim: cfg.hs_dim,
        hn_dim: cfg.hn_dim,
        cvae_hidden: cfg.hidden,
        decoder_hidden: cfg.hidden,
        relation_hidden: cfg.hidden,
        dis_hidden: cfg.dis_hidden.clone(),
        ..ArchConfig::default()
    };
    let state = ModelState::<f64>::init(&arch, AdamConfig::default(), &mut Rng::new(seed, "init"))?;

    let mut rng = Rng::new(seed, "gradcheck/data");
    let (b, k) = (cfg.batch, cfg.attr_dim);
    let attrs = Tensor::matrix(cfg.classes, k, (0..cfg.classes * k).map(|_| rng.uniform()).collect())?;
    let y: Vec<i64> = (0..b).map(|_| rng.below(cfg.classes) as i64).collect();
    let mut y_unique = y.clone();
    y_unique.sort_unstable();
    y_unique.dedup();
    let rows = |ids: &[i64]| attrs.select_rows(&ids.iter().map(|&c| c as usize).collect::<Vec<_>>());
    let batch = Batch {
        indices: (0..b).collect(),
        x: Tensor::matrix(b, cfg.feature_dim, (0..b * cfg.feature_dim).map(|_| rng.normal()).collect())?,
        a: rows(&y),
        a_unique: rows(&y_unique),
        y,
        y_unique,
    };
    let noise = Tensor::matrix(b, cfg.latent_dim, (0..b * cfg.latent_dim).map(|_| rng.normal()).collect())?;
    let perms: Vec<_> = (0..cfg.streams.count())
        .map(|_| permutation_pair(b, &mut rng))
        .collect();
    let dropout = Rng::new(seed, "gradcheck/dropout");

    let mut out = Vec::new();
    for term in TERMS {
        let subset: BTreeMap<String, Tensor<f64>> = state
            .params
            .iter()
            .filter(|(name, _)| term != "loss_dis" || Net::of_param(name) == Some(Net::Discriminator))
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        let loss = |g: &mut Graph<f64>, checked: &BTreeMap<String, Var>| -> Result<Var> {
            let mut vars = checked.clone();
            for (name, t) in &state.params {
                if !vars.contains_key(name) {
                    vars.insert(name.clone(), g.constant(t.clone()));
                }
            }
            let mut drop = dropout.clone();
            let mut ctx = Ctx::new(g, &vars, &arch).training(&mut drop);
            let terms = overall1_terms(
                &mut ctx,
                &batch,
                Noise::Fixed(noise.clone()),
                1.0,
                1.0,
                cfg.streams,
                cfg.reduction,
            )?;
            match term {
                "loss_cvae" => Ok(terms.cvae),
                "loss_rec" => Ok(terms.rec),
                "loss_rel" => Ok(terms.rel),
                "tc" => tc_term(&mut ctx, &terms.latents),
                _ => dis_term(&mut ctx, &terms.latents, &perms),
            }
        };
        let report = grad_check(&subset, cfg.eps, cfg.tolerance, loss)?;
        out.push(TermCheck { term, seed, report });
    }
    Ok(out)
}
