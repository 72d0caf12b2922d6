//! The six networks and the parameter store they share.
//!
//! | net | layers |
//! |-----|--------|
//! | `Q` cVAE encoder | trunk `FC-LeakyReLU-FC-Dropout-LeakyReLU-FC` over `[x; a]`, mean head `FC`, scale head `FC-Dropout-Softplus` |
//! | `P` cVAE decoder | `FC-ReLU-Dropout-FC-LeakyReLU` over `[z; a]` |
//! | `E` disentangling encoder | `FC-LeakyReLU-Dropout` to `l + m` units, split into `[h_s | h_n]` |
//! | `D` disentangling decoder | `FC-LeakyReLU-Dropout-FC` back to `d` |
//! | `R` relation net | `FC-ReLU-FC-Sigmoid` over `[h_s; a]` |
//! | `Dis` discriminator | `FC-Sigmoid` over `h` (optional LeakyReLU hidden layers) |
//!
//! Weights are stored `[fan_in × fan_out]` so a layer is `x·W + b`. They are
//! drawn He-uniform, `U(±gain·√(3/fan_in))` with the LeakyReLU gain
//! `√(2/(1+slope²))`; biases start at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Axis, Graph, Rng, Scalar, Tensor, Var};

/// Lower/upper clamp applied to sigmoid outputs before any log or ratio.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Visual feature dimension `d`; 0 means "take it from the dataset".
    pub feature_dim: usize,
    /// Attribute dimension `k`; 0 means "take it from the dataset".
    pub attr_dim: usize,
    /// cVAE latent dimension `z`.
    pub latent_dim: usize,
    /// Semantic-consistent part `l`.
    pub hs_dim: usize,
    /// Semantic-unrelated part `m`.
    pub hn_dim: usize,
    pub cvae_hidden: usize,
    pub decoder_hidden: usize,
    pub relation_hidden: usize,
    /// Hidden widths of the discriminator; empty is a single FC layer.
    pub dis_hidden: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            feature_dim: 0,
            attr_dim: 0,
            latent_dim: 32,
            hs_dim: 64,
            hn_dim: 64,
            cvae_hidden: 2048,
            decoder_hidden: 2048,
            relation_hidden: 2048,
            dis_hidden: Vec::new(),
            dropout: 0.2,
            leaky_slope: 0.2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("attr_dim", self.attr_dim),
            ("latent_dim", self.latent_dim),
            ("hs_dim", self.hs_dim),
            ("hn_dim", self.hn_dim),
            ("cvae_hidden", self.cvae_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("relation_hidden", self.relation_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.dis_hidden.contains(&0) {
            return Err(Error::Config("dis_hidden widths must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::Config("leaky_slope must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Fills unset data dimensions, rejecting explicit values that disagree.
    pub fn resolve_data_dims(&mut self, feature_dim: usize, attr_dim: usize) -> Result<()> {
        for (slot, actual, name) in [
            (&mut self.feature_dim, feature_dim, "feature_dim"),
            (&mut self.attr_dim, attr_dim, "attr_dim"),
        ] {
            if *slot == 0 {
                *slot = actual;
            } else if *slot != actual {
                return Err(Error::Config(format!(
                    "{name} is {} but the dataset has {actual}",
                    *slot
                )));
            }
        }
        Ok(())
    }

    pub fn h_dim(&self) -> usize {
        self.hs_dim + self.hn_dim
    }
}

/// Network identity; parameter names are prefixed with [`Net::prefix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Net {
    CvaeEncoder,
    CvaeDecoder,
    DisentangleEncoder,
    DisentangleDecoder,
    Relation,
    Discriminator,
}

impl Net {
    pub const ALL: [Net; 6] = [
        Net::CvaeEncoder,
        Net::CvaeDecoder,
        Net::DisentangleEncoder,
        Net::DisentangleDecoder,
        Net::Relation,
        Net::Discriminator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::CvaeEncoder => "q",
            Net::CvaeDecoder => "p",
            Net::DisentangleEncoder => "e",
            Net::DisentangleDecoder => "d",
            Net::Relation => "r",
            Net::Discriminator => "dis",
        }
    }

    /// The network owning parameter `name`.
    pub fn of_param(name: &str) -> Option<Net> {
        let prefix = name.split('.').next()?;
        Net::ALL.into_iter().find(|n| n.prefix() == prefix)
    }

    pub fn layers(self, arch: &ArchConfig) -> Vec<LayerSpec> {
        let a = arch;
        let spec = |layer: &str, fan_in, fan_out| LayerSpec {
            name: format!("{}.{layer}", self.prefix()),
            fan_in,
            fan_out,
        };
        match self {
            Net::CvaeEncoder => vec![
                spec("fc1", a.feature_dim + a.attr_dim, a.cvae_hidden),
                spec("fc2", a.cvae_hidden, a.cvae_hidden),
                spec("fc3", a.cvae_hidden, a.cvae_hidden),
                spec("mu", a.cvae_hidden, a.latent_dim),
                spec("sigma", a.cvae_hidden, a.latent_dim),
            ],
            Net::CvaeDecoder => vec![
                spec("fc1", a.latent_dim + a.attr_dim, a.cvae_hidden),
                spec("fc2", a.cvae_hidden, a.feature_dim),
            ],
            Net::DisentangleEncoder => vec![spec("fc1", a.feature_dim, a.h_dim())],
            Net::DisentangleDecoder => vec![
                spec("fc1", a.h_dim(), a.decoder_hidden),
                spec("fc2", a.decoder_hidden, a.feature_dim),
            ],
            Net::Relation => vec![
                spec("fc1", a.hs_dim + a.attr_dim, a.relation_hidden),
                spec("fc2", a.relation_hidden, 1),
            ],
            Net::Discriminator => {
                let mut widths = vec![a.h_dim()];
                widths.extend(&a.dis_hidden);
                widths.push(1);
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| spec(&format!("fc{}", i + 1), w[0], w[1]))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpec {
    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }
}

/// Every trainable array plus the two optimizers: `main` updates
/// `Q, P, E, D, R` and `dis` updates the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub arch: ArchConfig,
    pub params: BTreeMap<String, Tensor<S>>,
    pub opt_main: AdamState<S>,
    pub opt_dis: AdamState<S>,
}

impl<S: Scalar> ModelState<S> {
    /// Draws fresh weights from `rng` (networks in [`Net::ALL`] order, layers
    /// in declaration order, row-major within a weight).
    pub fn init(arch: &ArchConfig, adam: AdamConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let gain = (2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope)).sqrt();
        let mut params = BTreeMap::new();
        for net in Net::ALL {
            for layer in net.layers(arch) {
                let bound = gain * (3.0 / layer.fan_in as f64).sqrt();
                let w: Vec<S> = (0..layer.fan_in * layer.fan_out)
                    .map(|_| S::of(rng.uniform_in(-bound, bound)))
                    .collect();
                params.insert(layer.weight(), Tensor::matrix(layer.fan_in, layer.fan_out, w)?);
                params.insert(layer.bias(), Tensor::zeros(&[1, layer.fan_out]));
            }
        }
        let is_dis = |k: &String| Net::of_param(k) == Some(Net::Discriminator);
        let opt_main = AdamState::new(adam, params.iter().filter(|(k, _)| !is_dis(k)));
        let opt_dis = AdamState::new(adam, params.iter().filter(|(k, _)| is_dis(k)));
        Ok(ModelState {
            arch: arch.clone(),
            params,
            opt_main,
            opt_dis,
        })
    }

    /// The same model in another precision; optimizer moments are cast too.
    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        let cast_opt = |o: &AdamState<S>| AdamState {
            config: o.config,
            step: o.step,
            moments: o
                .moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), (m.cast(), v.cast())))
                .collect(),
        };
        ModelState {
            arch: self.arch.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            opt_main: cast_opt(&self.opt_main),
            opt_dis: cast_opt(&self.opt_dis),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Puts every parameter on `g`, tracked where `trainable(net)` holds.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(Net) -> bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| {
                let tracked = Net::of_param(k).is_some_and(&trainable);
                (k.clone(), g.leaf(t.clone(), tracked))
            })
            .collect()
    }

    /// Gradients of the tracked parameters of `nets` after a backward pass.
    /// Parameters the loss does not reach get a zero gradient.
    pub fn collect_grads(
        &self,
        g: &Graph<S>,
        vars: &BTreeMap<String, Var>,
        nets: impl Fn(Net) -> bool,
    ) -> BTreeMap<String, Tensor<S>> {
        vars.iter()
            .filter(|(k, _)| Net::of_param(k).is_some_and(&nets))
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.params[k].shape()));
                (k.clone(), grad)
            })
            .collect()
    }

    /// Parameters of one network.
    pub fn net_params(&self, net: Net) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params
            .iter()
            .filter(move |(k, _)| Net::of_param(k) == Some(net))
    }
}

/// Forward-pass context: the tape, the bound parameters and the dropout
/// source. `dropout_rng = None` is evaluation mode.
pub struct Ctx<'a, S> {
    pub g: &'a mut Graph<S>,
    pub vars: &'a BTreeMap<String, Var>,
    pub arch: &'a ArchConfig,
    pub dropout_rng: Option<&'a mut Rng>,
}

/// Output of the disentangling encoder.
#[derive(Clone, Copy, Debug)]
pub struct Latent {
    pub h: Var,
    pub hs: Var,
    pub hn: Var,
}

/// Source of the standard-normal draws in the reparameterization.
pub enum Noise<'a, S> {
    Sample(&'a mut Rng),
    Fixed(Tensor<S>),
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(g: &'a mut Graph<S>, vars: &'a BTreeMap<String, Var>, arch: &'a ArchConfig) -> Self {
        Ctx {
            g,
            vars,
            arch,
            dropout_rng: None,
        }
    }

    pub fn training(mut self, rng: &'a mut Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    /// `x·W + b` for layer `name` (e.g. `"e.fc1"`).
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_bias(y, b)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.arch.dropout;
        self.g.dropout(x, rate, self.dropout_rng.as_deref_mut())
    }

    fn leaky(&mut self, x: Var) -> Result<Var> {
        self.g.leaky_relu(x, self.arch.leaky_slope)
    }

    fn check_cols(&self, x: Var, cols: usize, op: &'static str) -> Result<()> {
        let s = self.g.shape(x);
        if s.len() != 2 || s[1] != cols {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![cols],
            });
        }
        Ok(())
    }

    /// `E_ψ(x) = [h_s, h_n]`.
    pub fn encode_disentangle(&mut self, x: Var) -> Result<Latent> {
        self.check_cols(x, self.arch.feature_dim, "encode_disentangle")?;
        let h = self.linear("e.fc1", x)?;
        let h = self.leaky(h)?;
        let h = self.dropout(h)?;
        let l = self.arch.hs_dim;
        let hs = self.g.slice_cols(h, 0..l)?;
        let hn = self.g.slice_cols(h, l..self.arch.h_dim())?;
        Ok(Latent { h, hs, hn })
    }

    /// `D_ω(h) → x̄`.
    pub fn decode_disentangle(&mut self, h: Var) -> Result<Var> {
        self.check_cols(h, self.arch.h_dim(), "decode_disentangle")?;
        let y = self.linear("d.fc1", h)?;
        let y = self.leaky(y)?;
        let y = self.dropout(y)?;
        self.linear("d.fc2", y)
    }

    /// `Q_φ(x, a) → (μ, σ)`, σ strictly positive through the softplus.
    pub fn cvae_encode(&mut self, x: Var, a: Var) -> Result<(Var, Var)> {
        self.check_cols(x, self.arch.feature_dim, "cvae_encode")?;
        self.check_cols(a, self.arch.attr_dim, "cvae_encode")?;
        let xa = self.g.concat_cols(x, a)?;
        let t = self.linear("q.fc1", xa)?;
        let t = self.leaky(t)?;
        let t = self.linear("q.fc2", t)?;
        let t = self.dropout(t)?;
        let t = self.leaky(t)?;
        let t = self.linear("q.fc3", t)?;
        let mu = self.linear("q.mu", t)?;
        let s = self.linear("q.sigma", t)?;
        let s = self.dropout(s)?;
        let sigma = self.g.softplus(s)?;
        Ok((mu, sigma))
    }

    /// `P_θ(z, a) → x̂`.
    pub fn generate(&mut self, z: Var, a: Var) -> Result<Var> {
        self.check_cols(z, self.arch.latent_dim, "generate")?;
        self.check_cols(a, self.arch.attr_dim, "generate")?;
        let za = self.g.concat_cols(z, a)?;
        let y = self.linear("p.fc1", za)?;
        let y = self.g.relu(y)?;
        let y = self.dropout(y)?;
        let y = self.linear("p.fc2", y)?;
        self.leaky(y)
    }

    /// Scores every `(h_s[t], a_set[c])` pair: `[B×l], [N_c×k] → [B×N_c]`.
    pub fn relate(&mut self, hs: Var, a_set: Var) -> Result<Var> {
        self.check_cols(hs, self.arch.hs_dim, "relate")?;
        self.check_cols(a_set, self.arch.attr_dim, "relate")?;
        let b = self.g.shape(hs)[0];
        let nc = self.g.shape(a_set)[0];
        let rows: Vec<usize> = (0..b).flat_map(|t| std::iter::repeat_n(t, nc)).collect();
        let cols: Vec<usize> = (0..b).flat_map(|_| 0..nc).collect();
        let hs_rep = self.g.gather_rows(hs, &rows)?;
        let a_rep = self.g.gather_rows(a_set, &cols)?;
        let pairs = self.g.concat_cols(hs_rep, a_rep)?;
        let y = self.linear("r.fc1", pairs)?;
        let y = self.g.relu(y)?;
        let y = self.linear("r.fc2", y)?;
        let y = self.g.sigmoid(y)?;
        let y = self.g.clamp(y, PROB_EPS, 1.0 - PROB_EPS)?;
        self.g.reshape(y, &[b, nc])
    }

    /// `Dis(h) ∈ [ε, 1-ε]`, shape `[B×1]`.
    pub fn discriminate(&mut self, h: Var) -> Result<Var> {
        self.check_cols(h, self.arch.h_dim(), "discriminate")?;
        let n_layers = self.arch.dis_hidden.len() + 1;
        let mut y = h;
        for i in 1..=n_layers {
            y = self.linear(&format!("dis.fc{i}"), y)?;
            if i < n_layers {
                y = self.leaky(y)?;
            }
        }
        let y = self.g.sigmoid(y)?;
        self.g.clamp(y, PROB_EPS, 1.0 - PROB_EPS)
    }
}

/// `z = μ + σ ⊙ ε`. The noise enters as a constant, so gradients reach `μ`
/// and `σ` only.
pub fn reparameterize<S: Scalar>(g: &mut Graph<S>, mu: Var, sigma: Var, noise: Noise<'_, S>) -> Result<Var> {
    if g.shape(mu) != g.shape(sigma) {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: g.shape(mu).to_vec(),
            rhs: g.shape(sigma).to_vec(),
        });
    }
    if g.value(sigma).data().iter().any(|&s| s <= S::zero()) {
        return Err(Error::non_finite("reparameterize: sigma must be strictly positive"));
    }
    let shape = g.shape(mu).to_vec();
    let eps = match noise {
        Noise::Sample(rng) => {
            let n = g.value(mu).numel();
            Tensor::new(shape, (0..n).map(|_| S::of(rng.normal())).collect())?
        }
        Noise::Fixed(t) => {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "reparameterize",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            t
        }
    };
    let e = g.constant(eps);
    let se = g.mul(sigma, e)?;
    g.add(mu, se)
}

/// Mean over rows; used for centroids.
pub fn row_mean<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let m = g.mean(v, Axis::Rows)?;
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            feature_dim: 16,
            attr_dim: 6,
            latent_dim: 4,
            hs_dim: 3,
            hn_dim: 3,
            cvae_hidden: 8,
            decoder_hidden: 8,
            relation_hidden: 8,
            ..ArchConfig::default()
        }
    }

    fn state(arch: &ArchConfig, seed: u64) -> ModelState<f64> {
        ModelState::init(arch, AdamConfig::default(), &mut Rng::new(seed, "init")).unwrap()
    }

    fn randn(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let arch = ArchConfig {
            feature_dim: 128,
            attr_dim: 16,
            latent_dim: 32,
            hs_dim: 64,
            hn_dim: 64,
            ..ArchConfig::default()
        };
        let st = ModelState::<f32>::init(&arch, AdamConfig::default(), &mut Rng::new(0, "init")).unwrap();
        let fc = |i: usize, o: usize| i * o + o;
        let h = 2048;
        let expected = fc(128 + 16, h) + fc(h, h) + fc(h, h) + fc(h, 32) + fc(h, 32) // Q
            + fc(32 + 16, h) + fc(h, 128) // P
            + fc(128, 128) // E
            + fc(128, h) + fc(h, 128) // D
            + fc(64 + 16, h) + fc(h, 1) // R
            + fc(128, 1); // Dis
        assert_eq!(st.param_count(), expected);
        assert_eq!(expected, 9_894_466);
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = small_arch();
        assert_eq!(state(&arch, 4).params, state(&arch, 4).params);
        assert_ne!(state(&arch, 4).params, state(&arch, 5).params);
    }

    #[test]
    fn unequal_split_is_allowed() {
        let arch = ArchConfig {
            hs_dim: 2,
            hn_dim: 5,
            ..small_arch()
        };
        let st = state(&arch, 1);
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let x = g.constant(Tensor::zeros(&[4, 16]));
        let lat = Ctx::new(&mut g, &vars, &arch).encode_disentangle(x).unwrap();
        assert_eq!(g.shape(lat.hs), &[4, 2]);
        assert_eq!(g.shape(lat.hn), &[4, 5]);
    }

    #[test]
    fn invalid_dims_are_config_errors() {
        let arch = ArchConfig {
            hs_dim: 0,
            ..small_arch()
        };
        let r = ModelState::<f32>::init(&arch, AdamConfig::default(), &mut Rng::new(0, "init"));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn encoder_shapes_and_zero_weights() {
        let arch = small_arch();
        let mut st = state(&arch, 2);
        for (k, t) in st.params.iter_mut() {
            if k.starts_with("e.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| true);
        let x = g.constant(randn(&mut Rng::new(3, "x"), 4, 16));
        let lat = Ctx::new(&mut g, &vars, &arch).encode_disentangle(x).unwrap();
        assert_eq!(g.shape(lat.hs), &[4, 3]);
        assert_eq!(g.shape(lat.hn), &[4, 3]);
        assert!(g.value(lat.h).data().iter().all(|&v| v == 0.0));
        let both = Tensor::concat_cols(g.value(lat.hs), g.value(lat.hn)).unwrap();
        assert_eq!(&both, g.value(lat.h));
    }

    #[test]
    fn feature_dim_mismatch_is_a_shape_error() {
        let arch = small_arch();
        let st = state(&arch, 2);
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| true);
        let x = g.constant(Tensor::zeros(&[4, 15]));
        let r = Ctx::new(&mut g, &vars, &arch).encode_disentangle(x);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_pair_reconstructs_exactly() {
        // E = identity into the first d of l+m ≥ d units, D = identity back;
        // positive inputs keep the LeakyReLU linear and the hidden width is d.
        let d = 4;
        let arch = ArchConfig {
            feature_dim: d,
            hs_dim: 3,
            hn_dim: 3,
            decoder_hidden: d,
            dropout: 0.0,
            ..small_arch()
        };
        let mut st = state(&arch, 0);
        let eye = |r: usize, c: usize| {
            let mut t = Tensor::<f64>::zeros(&[r, c]);
            for i in 0..r.min(c) {
                t.data_mut()[i * c + i] = 1.0;
            }
            t
        };
        st.params.insert("e.fc1.w".into(), eye(d, 6));
        st.params.insert("d.fc1.w".into(), eye(6, d));
        st.params.insert("d.fc2.w".into(), eye(d, d));
        for k in ["e.fc1.b", "d.fc1.b", "d.fc2.b"] {
            let shape = st.params[k].shape().to_vec();
            st.params.insert(k.into(), Tensor::zeros(&shape));
        }
        let mut rng = Rng::new(6, "x");
        let x = randn(&mut rng, 5, d).map(|v| v.abs() + 0.1);
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let lat = ctx.encode_disentangle(xv).unwrap();
        let xbar = ctx.decode_disentangle(lat.h).unwrap();
        assert!(g.value(xbar).max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::<f64>::new();
        let mu = g.param(Tensor::from_rows(&[&[0.5, -1.0]]).unwrap());
        let sigma = g.param(Tensor::from_rows(&[&[2.0, 0.25]]).unwrap());
        let z0 = reparameterize(&mut g, mu, sigma, Noise::Fixed(Tensor::zeros(&[1, 2]))).unwrap();
        assert_eq!(g.value(z0), g.value(mu));

        let eps = Tensor::from_rows(&[&[0.3, -1.7]]).unwrap();
        let z = reparameterize(&mut g, mu, sigma, Noise::Fixed(eps.clone())).unwrap();
        let s = g.sum(z, Axis::All).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(sigma).unwrap(), &eps);
        assert!(g.grad(mu).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let mu = g.param(Tensor::zeros(&[1, 2]));
        let bad = g.param(Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let r = reparameterize(&mut g, mu, bad, Noise::Fixed(Tensor::zeros(&[1, 2])));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let n = 100_000;
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(&[n, 1]));
        let sigma = g.constant(Tensor::full(&[n, 1], 1.0));
        let mut rng = Rng::new(12, "noise");
        let z = reparameterize(&mut g, mu, sigma, Noise::Sample(&mut rng)).unwrap();
        let zs = g.value(z).data();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn relate_and_discriminate_ranges() {
        let arch = small_arch();
        let st = state(&arch, 3);
        let mut rng = Rng::new(1, "x");
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let hs = g.constant(randn(&mut rng, 2, 3));
        let a = g.constant(randn(&mut rng, 3, 6));
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let s = ctx.relate(hs, a).unwrap();
        assert_eq!(g.shape(s), &[2, 3]);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));

        let mut zeroed = st.clone();
        for (k, t) in zeroed.params.iter_mut() {
            if k.starts_with("dis.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut g = Graph::new();
        let vars = zeroed.bind(&mut g, |_| false);
        let h = g.constant(randn(&mut rng, 5, 6));
        let p = Ctx::new(&mut g, &vars, &arch).discriminate(h).unwrap();
        assert_eq!(g.shape(p), &[5, 1]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relate_matches_pairwise_scoring() {
        let arch = small_arch();
        let st = state(&arch, 8);
        let mut rng = Rng::new(2, "x");
        let hs = randn(&mut rng, 3, 3);
        let a = randn(&mut rng, 2, 6);
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let (hv, av) = (g.constant(hs.clone()), g.constant(a.clone()));
        let grid = Ctx::new(&mut g, &vars, &arch).relate(hv, av).unwrap();
        let grid = g.value(grid).clone();
        for t in 0..3 {
            for c in 0..2 {
                let mut g1 = Graph::new();
                let vars = st.bind(&mut g1, |_| false);
                let h1 = g1.constant(hs.select_rows(&[t]));
                let a1 = g1.constant(a.select_rows(&[c]));
                let s = Ctx::new(&mut g1, &vars, &arch).relate(h1, a1).unwrap();
                assert_eq!(g1.value(s).item(), grid.get(t, c));
            }
        }
    }

    #[test]
    fn sigma_head_is_positive_and_eval_is_deterministic() {
        let arch = small_arch();
        let st = state(&arch, 9);
        let mut rng = Rng::new(0, "x");
        let x = randn(&mut rng, 6, 16).map(|v| v * 50.0);
        let a = randn(&mut rng, 6, 6);
        let run = || {
            let mut g = Graph::new();
            let vars = st.bind(&mut g, |_| false);
            let (xv, av) = (g.constant(x.clone()), g.constant(a.clone()));
            let (_, s) = Ctx::new(&mut g, &vars, &arch).cvae_encode(xv, av).unwrap();
            g.value(s).clone()
        };
        let s1 = run();
        assert!(s1.data().iter().all(|&v| v > 0.0));
        assert_eq!(s1, run());
    }

    #[test]
    fn generate_then_encode_shapes() {
        let arch = small_arch();
        let st = state(&arch, 10);
        let mut rng = Rng::new(0, "x");
        let mut g = Graph::new();
        let vars = st.bind(&mut g, |_| false);
        let z = g.constant(randn(&mut rng, 5, 4));
        let a = g.constant(randn(&mut rng, 5, 6));
        let mut ctx = Ctx::new(&mut g, &vars, &arch);
        let xhat = ctx.generate(z, a).unwrap();
        let lat = ctx.encode_disentangle(xhat).unwrap();
        assert_eq!(g.shape(xhat), &[5, 16]);
        assert_eq!(g.shape(lat.h), &[5, 6]);
    }
}
