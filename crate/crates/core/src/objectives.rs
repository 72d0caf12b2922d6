//! Loss terms, compatibility targets, the batch permutation and the warm-up
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{reparameterize, Ctx, Noise};
use crate::tensor::{Axis, Graph, Rng, Scalar, Tensor, Var};

/// How per-sample loss sums are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide by the batch size so loss weights do not depend on it.
    #[default]
    BatchMean,
    /// Plain sums over the batch.
    Sum,
}

impl Reduction {
    fn apply<S: Scalar>(self, g: &mut Graph<S>, total: Var, batch: usize) -> Result<Var> {
        match self {
            Reduction::BatchMean => g.scale(total, 1.0 / batch as f64),
            Reduction::Sum => Ok(total),
        }
    }
}

/// λ1 (relation), λ2 (TC), λ3 (discriminator), the final KL weight and the
/// warm-up horizon shared by the KL and TC terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub relation: f64,
    pub tc: f64,
    pub dis: f64,
    pub kl: f64,
    pub warmup_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            relation: 1.0,
            tc: 1.0,
            dis: 1.0,
            kl: 1.0,
            warmup_epochs: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("relation", self.relation),
            ("tc", self.tc),
            ("dis", self.dis),
            ("kl", self.kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn kl_at(&self, epoch: usize) -> f64 {
        warmup_weight(epoch, self.warmup_epochs, self.kl)
    }

    pub fn tc_at(&self, epoch: usize) -> f64 {
        warmup_weight(epoch, self.warmup_epochs, self.tc)
    }
}

/// Linear ramp `min(epoch / horizon, 1) · final`. A zero horizon disables the
/// ramp.
pub fn warmup_weight(epoch: usize, horizon: usize, final_weight: f64) -> f64 {
    if horizon == 0 {
        return final_weight;
    }
    (epoch as f64 / horizon as f64).min(1.0) * final_weight
}

/// `[B×N_c]` matrix with entry `(t, c) = 1` iff `labels_batch[t] == labels_unique[c]`.
pub fn compatibility_matrix<S: Scalar>(labels_batch: &[i64], labels_unique: &[i64]) -> Result<Tensor<S>> {
    if labels_batch.is_empty() || labels_unique.is_empty() {
        return Err(Error::Data("compatibility matrix needs non-empty label lists".into()));
    }
    let mut data = Vec::with_capacity(labels_batch.len() * labels_unique.len());
    for &y in labels_batch {
        if !labels_unique.contains(&y) {
            return Err(Error::Data(format!(
                "batch label {y} has no attribute row in the unique set"
            )));
        }
        data.extend(labels_unique.iter().map(|&u| if u == y { S::one() } else { S::zero() }));
    }
    Tensor::matrix(labels_batch.len(), labels_unique.len(), data)
}

/// Squared error between relation scores and the compatibility target,
/// summed over all pairs.
pub fn relation_loss<S: Scalar>(g: &mut Graph<S>, scores: Var, target: Var, red: Reduction) -> Result<Var> {
    let diff = g.sub(scores, target)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq, Axis::All)?;
    let b = g.shape(scores)[0];
    red.apply(g, total, b)
}

/// `Σ_t ‖x_t − x̄_t‖²`.
pub fn reconstruction_loss<S: Scalar>(g: &mut Graph<S>, x: Var, xbar: Var, red: Reduction) -> Result<Var> {
    let diff = g.sub(x, xbar)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq, Axis::All)?;
    let b = g.value(x).rows();
    red.apply(g, total, b)
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ_j (μ² + σ² − log σ² − 1)` per
/// sample.
pub fn kl_gaussian<S: Scalar>(g: &mut Graph<S>, mu: Var, sigma: Var, red: Reduction) -> Result<Var> {
    if g.value(sigma).data().iter().any(|&s| s <= S::zero()) {
        return Err(Error::non_finite("kl_gaussian: sigma must be strictly positive"));
    }
    let mu2 = g.square(mu)?;
    let s2 = g.square(sigma)?;
    let log_s = g.log(sigma)?;
    let log_s2 = g.scale(log_s, 2.0)?;
    let t = g.add(mu2, s2)?;
    let t = g.sub(t, log_s2)?;
    let t = g.affine(t, 1.0, -1.0)?;
    let total = g.sum(t, Axis::All)?;
    let half = g.scale(total, 0.5)?;
    let b = g.value(mu).rows();
    red.apply(g, half, b)
}

/// Pieces of the cVAE objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct CvaeOutput {
    /// `recon + kl_weight · kl`
    pub loss: Var,
    pub recon: Var,
    pub kl: Var,
    pub xhat: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Negative evidence lower bound of the cVAE with a unit-variance Gaussian
/// likelihood (squared error) and a standard normal prior.
pub fn cvae_loss<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    x: Var,
    a: Var,
    noise: Noise<'_, S>,
    kl_weight: f64,
    red: Reduction,
) -> Result<CvaeOutput> {
    let (mu, sigma) = ctx.cvae_encode(x, a)?;
    let z = reparameterize(ctx.g, mu, sigma, noise)?;
    let xhat = ctx.generate(z, a)?;
    let recon = reconstruction_loss(ctx.g, x, xhat, red)?;
    let kl = kl_gaussian(ctx.g, mu, sigma, red)?;
    let weighted = ctx.g.scale(kl, kl_weight)?;
    let loss = ctx.g.add(recon, weighted)?;
    Ok(CvaeOutput {
        loss,
        recon,
        kl,
        xhat,
        mu,
        sigma,
    })
}

/// Two independent uniform permutations `(B′, B″)` of `0..b`.
pub fn permutation_pair(b: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let first = rng.permutation(b);
    let second = rng.permutation(b);
    (first, second)
}

/// `h̃_t = [h_s[B′(t)], h_n[B″(t)]]`: pairs every semantic row with an
/// unrelated nuisance row so `h̃` samples the product of the marginals.
pub fn permute_batch<S: Scalar>(hs: &Tensor<S>, hn: &Tensor<S>, rng: &mut Rng) -> Result<Tensor<S>> {
    let (p1, p2) = permutation_pair(hs.rows(), rng);
    apply_permutation(hs, hn, &p1, &p2)
}

pub fn apply_permutation<S: Scalar>(hs: &Tensor<S>, hn: &Tensor<S>, p1: &[usize], p2: &[usize]) -> Result<Tensor<S>> {
    if hs.rows() != hn.rows() || p1.len() != hs.rows() || p2.len() != hs.rows() {
        return Err(Error::Shape {
            op: "permute_batch",
            lhs: hs.shape().to_vec(),
            rhs: hn.shape().to_vec(),
        });
    }
    Tensor::concat_cols(&hs.select_rows(p1), &hn.select_rows(p2))
}

/// `log Dis(h) − log(1 − Dis(h))`, the per-sample log density ratio `[B×1]`.
pub fn log_density_ratio<S: Scalar>(ctx: &mut Ctx<'_, S>, h: Var) -> Result<Var> {
    let p = ctx.discriminate(h)?;
    let log_p = ctx.g.log(p)?;
    let q = ctx.g.affine(p, -1.0, 1.0)?;
    let log_q = ctx.g.log(q)?;
    ctx.g.sub(log_p, log_q)
}

/// Total-correlation estimate `mean_t log(Dis(h_t) / (1 − Dis(h_t)))`.
///
/// Bind the discriminator untracked for this term: its gradient should only
/// reach the producers of `h`.
pub fn tc_estimate<S: Scalar>(ctx: &mut Ctx<'_, S>, h: Var) -> Result<Var> {
    let r = log_density_ratio(ctx, h)?;
    ctx.g.mean(r, Axis::All)
}

/// `−mean log Dis(h) − mean log(1 − Dis(h̃))`: joint samples are labelled 1,
/// permuted samples 0.
pub fn discriminator_loss<S: Scalar>(ctx: &mut Ctx<'_, S>, h: Var, h_perm: Var) -> Result<Var> {
    let p = ctx.discriminate(h)?;
    let lp = ctx.g.log(p)?;
    let lp = ctx.g.mean(lp, Axis::All)?;
    let q = ctx.discriminate(h_perm)?;
    let one_minus = ctx.g.affine(q, -1.0, 1.0)?;
    let lq = ctx.g.log(one_minus)?;
    let lq = ctx.g.mean(lq, Axis::All)?;
    let s = ctx.g.add(lp, lq)?;
    ctx.g.scale(s, -1.0)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::networks::{ArchConfig, ModelState};
    use crate::tensor::AdamConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn compatibility_definition() {
        let t: Tensor<f64> = compatibility_matrix(&[1, 2, 1], &[1, 2]).unwrap();
        assert_eq!(t, Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]).unwrap());
        let one: Tensor<f64> = compatibility_matrix(&[7], &[7]).unwrap();
        assert_eq!(one.data(), &[1.0]);
        assert!(matches!(
            compatibility_matrix::<f64>(&[3], &[1, 2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn compatibility_column_equivariance() {
        let a: Tensor<f64> = compatibility_matrix(&[4, 9, 4, 2], &[2, 4, 9]).unwrap();
        let b: Tensor<f64> = compatibility_matrix(&[4, 9, 4, 2], &[9, 2, 4]).unwrap();
        let perm = [2usize, 0, 1];
        for r in 0..4 {
            for (c, &pc) in perm.iter().enumerate() {
                assert_eq!(b.get(r, c), a.get(r, pc));
            }
        }
    }

    fn scalar_of(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn relation_loss_cases() {
        let target = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let zero = scalar_of(|g| {
            let s = g.constant(target.clone());
            let t = g.constant(target.clone());
            relation_loss(g, s, t, Reduction::Sum)
        });
        assert_eq!(zero, 0.0);
        let half = scalar_of(|g| {
            let s = g.constant(Tensor::full(&[2, 2], 0.5));
            let t = g.constant(target.clone());
            relation_loss(g, s, t, Reduction::Sum)
        });
        assert_eq!(half, 1.0);
        let mean = scalar_of(|g| {
            let s = g.constant(Tensor::full(&[2, 2], 0.5));
            let t = g.constant(target.clone());
            relation_loss(g, s, t, Reduction::BatchMean)
        });
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn reconstruction_cases() {
        let x = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let same = scalar_of(|g| {
            let a = g.constant(x.clone());
            let b = g.constant(x.clone());
            reconstruction_loss(g, a, b, Reduction::BatchMean)
        });
        assert_eq!(same, 0.0);
        let one = scalar_of(|g| {
            let a = g.constant(x.clone());
            let b = g.constant(Tensor::zeros(&[1, 2]));
            reconstruction_loss(g, a, b, Reduction::BatchMean)
        });
        assert_eq!(one, 1.0);
    }

    #[test]
    fn kl_closed_form_cases() {
        let kl = |mu: f64, sigma: f64| {
            scalar_of(|g| {
                let m = g.constant(Tensor::full(&[1, 1], mu));
                let s = g.constant(Tensor::full(&[1, 1], sigma));
                kl_gaussian(g, m, s, Reduction::BatchMean)
            })
        };
        assert_eq!(kl(0.0, 1.0), 0.0);
        assert_abs_diff_eq!(kl(1.0, 1.0), 0.5, epsilon = 1e-15);
        assert!(kl(-0.3, 0.2) > 0.0);
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::zeros(&[1, 1]));
        let s = g.constant(Tensor::zeros(&[1, 1]));
        assert!(kl_gaussian(&mut g, m, s, Reduction::Sum).is_err());
    }

    #[test]
    fn warmup_ramp() {
        assert_eq!(warmup_weight(0, 10, 2.0), 0.0);
        assert_eq!(warmup_weight(5, 10, 2.0), 1.0);
        assert_eq!(warmup_weight(10, 10, 2.0), 2.0);
        assert_eq!(warmup_weight(40, 10, 2.0), 2.0);
        let w: Vec<f64> = (0..15).map(|e| warmup_weight(e, 10, 3.0)).collect();
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn permutation_single_row_is_identity() {
        let hs = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let hn = Tensor::<f64>::from_rows(&[&[3.0]]).unwrap();
        let mut rng = Rng::new(0, "permute");
        let p = permute_batch(&hs, &hn, &mut rng).unwrap();
        assert_eq!(p, Tensor::concat_cols(&hs, &hn).unwrap());
    }

    #[test]
    fn permutation_golden_seed_42() {
        // captured from the first implementation; guards the stream layout
        let mut rng = Rng::new(42, "permute");
        let (p1, p2) = permutation_pair(4, &mut rng);
        assert_eq!((p1, p2), (GOLDEN_P1.to_vec(), GOLDEN_P2.to_vec()));
    }
    const GOLDEN_P1: [usize; 4] = [2, 1, 0, 3];
    const GOLDEN_P2: [usize; 4] = [2, 0, 1, 3];

    fn tiny() -> (ArchConfig, ModelState<f64>) {
        let arch = ArchConfig {
            feature_dim: 5,
            attr_dim: 3,
            latent_dim: 2,
            hs_dim: 2,
            hn_dim: 2,
            cvae_hidden: 6,
            decoder_hidden: 6,
            relation_hidden: 6,
            ..ArchConfig::default()
        };
        let st = ModelState::init(&arch, AdamConfig::default(), &mut Rng::new(1, "init")).unwrap();
        (arch, st)
    }

    fn zero_dis(st: &mut ModelState<f64>) {
        for (k, t) in st.params.iter_mut() {
            if k.starts_with("dis.") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    #[test]
    fn tc_and_discriminator_at_chance() {
        let (arch, mut st) = tiny();
        zero_dis(&mut st);
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let h = g.constant(Tensor::full(&[3, 4], 0.7));
        let hp = g.constant(Tensor::full(&[3, 4], -0.2));
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let tc = tc_estimate(&mut ctx, h).unwrap();
        let dl = discriminator_loss(&mut ctx, h, hp).unwrap();
        assert_eq!(g.value(tc).item(), 0.0);
        assert_abs_diff_eq!(g.value(dl).item(), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn tc_with_confident_stub() {
        // bias = logit(0.9) with zero weights → Dis ≡ 0.9
        let (arch, mut st) = tiny();
        zero_dis(&mut st);
        st.params.insert("dis.fc1.b".into(), Tensor::full(&[1, 1], 9f64.ln()));
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let h = g.constant(Tensor::full(&[2, 4], 1.0));
        let tc = tc_estimate(&mut Ctx::new(&mut g, &vars, &arch), h).unwrap();
        assert_abs_diff_eq!(g.value(tc).item(), 9f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(9f64.ln(), 2.1972245773, epsilon = 1e-9);
    }

    #[test]
    fn perfect_discriminator_hits_clamp_floor() {
        let (arch, mut st) = tiny();
        zero_dis(&mut st);
        // logit = 100·(h_0): +∞-ish on h, −∞-ish on h̃
        let mut w = Tensor::zeros(&[4, 1]);
        w.data_mut()[0] = 100.0;
        st.params.insert("dis.fc1.w".into(), w);
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let h = g.constant(Tensor::full(&[2, 4], 1.0));
        let hp = g.constant(Tensor::full(&[2, 4], -1.0));
        let dl = discriminator_loss(&mut Ctx::new(&mut g, &vars, &arch), h, hp).unwrap();
        let expected = -2.0 * (1.0 - crate::networks::PROB_EPS).ln();
        assert_abs_diff_eq!(g.value(dl).item(), expected, epsilon = 1e-12);
        assert!(g.value(dl).item() < 1e-5);
    }

    #[test]
    fn tc_gradient_skips_discriminator_and_dis_loss_skips_rest() {
        let (arch, st) = tiny();
        let mut rng = Rng::new(3, "x");
        let x = Tensor::matrix(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();

        let mut g = Graph::new();
        let vars = st.bind(&mut g, |n| n != crate::networks::Net::Discriminator);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let lat = ctx.encode_disentangle(xv).unwrap();
        let tc = tc_estimate(&mut ctx, lat.h).unwrap();
        g.backward(tc).unwrap();
        assert!(vars.iter().filter(|(k, _)| k.starts_with("dis.")).all(|(_, &v)| g.grad(v).is_none()));
        assert!(g.grad(vars["e.fc1.w"]).is_some());

        let mut g = Graph::new();
        let vars: BTreeMap<_, _> = st.bind(&mut g, |n| n == crate::networks::Net::Discriminator);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let lat = ctx.encode_disentangle(xv).unwrap();
        let hp = ctx.g.constant(Tensor::zeros(&[4, 4]));
        let dl = discriminator_loss(&mut ctx, lat.h, hp).unwrap();
        g.backward(dl).unwrap();
        for (k, &v) in &vars {
            assert_eq!(g.grad(v).is_some(), k.starts_with("dis."), "{k}");
        }
    }

    #[test]
    fn cvae_loss_zero_with_perfect_decoder_and_no_kl() {
        // P(z, a) = LeakyReLU(ReLU([z;a]·W1)·W2): route a → hidden → x via identities,
        // with x chosen non-negative so both activations are exact.
        let arch = ArchConfig {
            feature_dim: 3,
            attr_dim: 3,
            latent_dim: 2,
            hs_dim: 1,
            hn_dim: 1,
            cvae_hidden: 3,
            decoder_hidden: 3,
            relation_hidden: 3,
            dropout: 0.0,
            ..ArchConfig::default()
        };
        let mut st = ModelState::<f64>::init(&arch, AdamConfig::default(), &mut Rng::new(0, "init")).unwrap();
        let mut w1 = Tensor::zeros(&[5, 3]);
        for i in 0..3 {
            w1.data_mut()[(2 + i) * 3 + i] = 1.0;
        }
        let mut w2 = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w2.data_mut()[i * 3 + i] = 1.0;
        }
        st.params.insert("p.fc1.w".into(), w1);
        st.params.insert("p.fc2.w".into(), w2);
        let x = Tensor::from_rows(&[&[0.2, 0.0, 1.5], &[0.7, 0.1, 0.3]]).unwrap();
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| true);
        let xv = g.constant(x.clone());
        let av = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let out = cvae_loss(&mut ctx, xv, av, Noise::Fixed(Tensor::zeros(&[2, 2])), 0.0, Reduction::BatchMean).unwrap();
        assert_eq!(g.value(out.loss).item(), 0.0);
        assert_eq!(g.value(out.xhat), &x);
    }

    fn sorted_rows(t: &Tensor<f64>) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        rows
    }

    proptest::proptest! {
        #[test]
        fn permutation_preserves_each_half(b in 1usize..30, l in 1usize..5, m in 1usize..5, seed in 0u64..1000) {
            let mut rng = Rng::new(seed, "perm");
            let hs = Tensor::matrix(b, l, (0..b * l).map(|_| rng.normal()).collect()).unwrap();
            let hn = Tensor::matrix(b, m, (0..b * m).map(|_| rng.normal()).collect()).unwrap();
            let p = permute_batch(&hs, &hn, &mut rng).unwrap();
            proptest::prop_assert_eq!(p.shape(), &[b, l + m]);
            proptest::prop_assert_eq!(sorted_rows(&p.slice_cols(0, l)), sorted_rows(&hs));
            proptest::prop_assert_eq!(sorted_rows(&p.slice_cols(l, l + m)), sorted_rows(&hn));
        }
    }
}
