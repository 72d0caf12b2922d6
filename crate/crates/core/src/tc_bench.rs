//! Density-ratio total-correlation estimate on Gaussians with a known answer.
//!
//! `h_s ~ N(0, I_l)` and `h_n = ρ·[h_s]_{:m} + √(1−ρ²)·v` pair coordinate `i`
//! of each half with correlation `ρ`, so the joint correlation matrix has
//! cross-block `ρ·I` and `TC = −½ log det Σ = −(min(l,m)/2)·log(1−ρ²)`. The
//! discriminator is trained on joint batches against their permuted copies,
//! then the estimate is averaged over a fresh held-out sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ArchConfig, Ctx, ModelState, Net};
use crate::objectives::{discriminator_loss, permute_batch, tc_estimate};
use crate::tensor::{AdamConfig, Graph, Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcBenchConfig {
    pub rho: f64,
    pub hs_dim: usize,
    pub hn_dim: usize,
    pub dis_hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TcBenchConfig {
    fn default() -> Self {
        TcBenchConfig {
            rho: 0.5,
            hs_dim: 4,
            hn_dim: 4,
            dis_hidden: vec![64, 64],
            steps: 3000,
            batch: 512,
            lr: 1e-3,
            eval_samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcBenchResult {
    pub rho: f64,
    pub analytic: f64,
    pub estimate: f64,
    /// `|estimate − analytic| / analytic`, or `None` when the analytic TC is 0.
    pub rel_err: Option<f64>,
}

pub fn analytic_tc(rho: f64, hs_dim: usize, hn_dim: usize) -> f64 {
    -0.5 * hs_dim.min(hn_dim) as f64 * (1.0 - rho * rho).ln()
}

/// `n` joint samples `[h_s | h_n]`.
pub fn correlated_gaussian(n: usize, rho: f64, hs_dim: usize, hn_dim: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let w = hs_dim + hn_dim;
    let c = (1.0 - rho * rho).sqrt();
    let mut data = Vec::with_capacity(n * w);
    for _ in 0..n {
        let u: Vec<f64> = (0..hs_dim).map(|_| rng.normal()).collect();
        data.extend(u.iter().map(|&v| v as f32));
        for j in 0..hn_dim {
            let v = rng.normal();
            let x = if j < hs_dim { rho * u[j] + c * v } else { v };
            data.push(x as f32);
        }
    }
    Tensor::matrix(n, w, data)
}

pub fn run_tc_bench(cfg: &TcBenchConfig) -> Result<TcBenchResult> {
    if !(0.0..1.0).contains(&cfg.rho.abs()) {
        return Err(Error::Config(format!("rho {} must satisfy |rho| < 1", cfg.rho)));
    }
    if cfg.batch < 2 || cfg.eval_samples == 0 {
        return Err(Error::Config("tc bench needs batch ≥ 2 and eval_samples ≥ 1".into()));
    }
    // Only the discriminator is used; the other networks are minimal.
    let arch = ArchConfig {
        feature_dim: 1,
        attr_dim: 1,
        latent_dim: 1,
        hs_dim: cfg.hs_dim,
        hn_dim: cfg.hn_dim,
        cvae_hidden: 1,
        decoder_hidden: 1,
        relation_hidden: 1,
        dis_hidden: cfg.dis_hidden.clone(),
        ..ArchConfig::default()
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = ModelState::<f32>::init(&arch, adam, &mut Rng::new(cfg.seed, "init"))?;
    let mut data_rng = Rng::new(cfg.seed, "tc/data");
    let mut perm_rng = Rng::new(cfg.seed, "tc/permute");
    let (l, m) = (cfg.hs_dim, cfg.hn_dim);

    for _ in 0..cfg.steps {
        let h = correlated_gaussian(cfg.batch, cfg.rho, l, m, &mut data_rng)?;
        let h_perm = permute_batch(&h.slice_cols(0, l), &h.slice_cols(l, l + m), &mut perm_rng)?;
        let mut g = Graph::new();
        let vars = state.bind(&mut g, |n| n == Net::Discriminator);
        let (hv, pv) = (g.constant(h), g.constant(h_perm));
        let loss = discriminator_loss(&mut Ctx::new(&mut g, &vars, &arch), hv, pv)?;
        g.backward(loss)?;
        let grads = state.collect_grads(&g, &vars, |n| n == Net::Discriminator);
        state.opt_dis.step(&mut state.params, &grads)?;
    }

    let mut eval_rng = Rng::new(cfg.seed, "tc/eval");
    let mut sum = 0.0;
    let mut left = cfg.eval_samples;
    while left > 0 {
        let n = left.min(4096);
        let h = correlated_gaussian(n, cfg.rho, l, m, &mut eval_rng)?;
        let mut g = Graph::new();
        let vars: BTreeMap<_, _> = state.bind(&mut g, |_| false);
        let hv = g.constant(h);
        let tc = tc_estimate(&mut Ctx::new(&mut g, &vars, &arch), hv)?;
        sum += g.value(tc).item().as_f64() * n as f64;
        left -= n;
    }
    let estimate = sum / cfg.eval_samples as f64;
    let analytic = analytic_tc(cfg.rho, l, m);
    Ok(TcBenchResult {
        rho: cfg.rho,
        analytic,
        estimate,
        rel_err: (analytic > 0.0).then(|| (estimate - analytic).abs() / analytic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `log det` by Gaussian elimination, independent of the closed form.
    fn log_det(mut a: Vec<Vec<f64>>) -> f64 {
        let n = a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let p = a[i][i];
            acc += p.ln();
            for r in i + 1..n {
                let f = a[r][i] / p;
                for c in i..n {
                    a[r][c] -= f * a[i][c];
                }
            }
        }
        acc
    }

    #[test]
    fn closed_form_matches_log_det() {
        for rho in [0.0, 0.3, 0.5, 0.8] {
            let mut corr = vec![vec![0.0; 8]; 8];
            for i in 0..8 {
                corr[i][i] = 1.0;
            }
            for i in 0..4 {
                corr[i][i + 4] = rho;
                corr[i + 4][i] = rho;
            }
            let want = -0.5 * log_det(corr);
            assert!((analytic_tc(rho, 4, 4) - want).abs() < 1e-12);
        }
        assert!((analytic_tc(0.5, 4, 4) - 0.575_364_144_903_562_1).abs() < 1e-12);
    }

    #[test]
    fn sampler_has_the_requested_correlation() {
        let h = correlated_gaussian(20_000, 0.8, 4, 4, &mut Rng::new(3, "t")).unwrap();
        for i in 0..4 {
            let r: f64 = (0..h.rows())
                .map(|t| f64::from(h.get(t, i)) * f64::from(h.get(t, i + 4)))
                .sum::<f64>()
                / h.rows() as f64;
            assert!((r - 0.8).abs() < 0.03, "{r}");
        }
    }

    #[test]
    fn short_bench_runs() {
        let r = run_tc_bench(&TcBenchConfig {
            steps: 20,
            batch: 64,
            eval_samples: 500,
            ..TcBenchConfig::default()
        })
        .unwrap();
        assert!(r.estimate.is_finite());
        assert!(run_tc_bench(&TcBenchConfig {
            rho: 1.0,
            ..TcBenchConfig::default()
        })
        .is_err());
    }
}
