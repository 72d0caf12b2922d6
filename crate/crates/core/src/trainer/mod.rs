//! Alternating optimization, training logs, checkpoints and unseen-class
//! synthesis.
//!
//! Every outer iteration does
//!
//! ```text
//! (a) repeat n_dis times on a batch from the inner stream:
//!       h, h̄ ← E(x), E(P(z, a))
//!       update Dis on λ3 · L_dis(h, permuted h)          W fixed
//!       update W on L_cVAE + L_rec + λ1 · L_hs            Dis untouched
//! (b) on the next batch of the epoch:
//!       update W on L_cVAE + L_rec + λ1 · L_hs + λ2 · TC  Dis frozen
//! ```
//!
//! Both phases reuse one forward pass per batch: the discriminator sees a
//! detached copy of `h`, so summing `λ3 · L_dis` and the W objective before
//! the backward pass yields exactly the two separate gradients. An epoch is
//! one pass of the (b) iterator over the training split; phase (a) draws from
//! its own endless shuffled iterator.

mod checkpoint;
mod gradsuite;
mod losses;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, DatasetBundle};
use crate::error::{Error, Result};
use crate::networks::{ArchConfig, Ctx, ModelState, Net, Noise};
use crate::objectives::{permutation_pair, LossWeights, Reduction};
use crate::par::{map_range, Exec};
use crate::tensor::{AdamConfig, Graph, Rng, Scalar, Tensor};

pub use checkpoint::{load_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradsuite::{gradient_suite, GradSuiteConfig, TermCheck};
pub use losses::{dis_term, overall1_terms, overall2, tc_term, Streams, Terms};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Discriminator steps per outer iteration.
    pub n_dis: usize,
    /// Update W after every discriminator step (`true`) or once after the
    /// last one.
    pub w_update_in_dis_loop: bool,
    pub streams: Streams,
    /// Synthesized samples per unseen class.
    pub n_syn: usize,
    pub reduction: Reduction,
    pub seed: u64,
    /// Store wall-clock seconds in the log. Off, logs and checkpoints of equal
    /// runs are bitwise identical.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 50,
            n_dis: 1,
            w_update_in_dis_loop: true,
            streams: Streams::Both,
            n_syn: 300,
            reduction: Reduction::BatchMean,
            seed: 0,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_dis == 0 {
            return Err(Error::Config("n_dis must be at least 1".into()));
        }
        if self.n_syn == 0 {
            return Err(Error::Config("n_syn must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("adam.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Ablations that switch off parts of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// λ1 = 0.
    NoRn,
    /// λ2 = λ3 = 0.
    NoTc,
    /// λ1 = λ2 = λ3 = 0.
    CvaeOnly,
}

impl Ablation {
    pub fn apply(self, w: &mut LossWeights) {
        match self {
            Ablation::NoRn => w.relation = 0.0,
            Ablation::NoTc => {
                w.tc = 0.0;
                w.dis = 0.0;
            }
            Ablation::CvaeOnly => {
                w.relation = 0.0;
                w.tc = 0.0;
                w.dis = 0.0;
            }
        }
    }
}

/// One row of the training log. Losses are means over the epoch's steps:
/// discriminator loss over phase (a), the rest over phase (b).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cvae: f64,
    pub loss_rec: f64,
    pub loss_rel: f64,
    pub tc: f64,
    pub loss_dis: f64,
    pub kl_w: f64,
    pub tc_w: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// The log with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord { seconds: 0.0, ..r.clone() })
                .collect(),
        }
    }
}

/// Which update just happened, for [`Trainer::set_observer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Phase (a) discriminator update.
    Discriminator,
    /// Phase (a) W update.
    InnerMain,
    /// Phase (b) W update.
    OuterMain,
}

pub type Observer = Box<dyn FnMut(Phase, &ModelState<f32>)>;

/// Per-run random streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct Streamset {
    pub noise: Rng,
    pub dropout: Rng,
    pub permute: Rng,
}

/// Values of the phase (b) terms on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cvae: f64,
    pub rec: f64,
    pub rel: f64,
    pub tc: f64,
    pub overall1: f64,
    pub overall2: f64,
    pub tc_weight: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: ModelState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub log: TrainLog,
    pub(crate) rngs: Streamset,
    pub(crate) outer: BatchIterator,
    pub(crate) inner: BatchIterator,
    observer: Option<Observer>,
}

impl Trainer {
    /// Fresh model for `bundle`; data dimensions left at 0 in the config are
    /// taken from the dataset.
    pub fn new(mut config: TrainConfig, bundle: &DatasetBundle) -> Result<Self> {
        config
            .arch
            .resolve_data_dims(bundle.feature_dim(), bundle.attr_dim())?;
        config.validate()?;
        let seed = config.seed;
        let state = ModelState::init(&config.arch, config.adam, &mut Rng::new(seed, "init"))?;
        let pool = bundle.train_seen_idx().to_vec();
        let b = config.batch_size;
        Ok(Trainer {
            outer: BatchIterator::new(pool.clone(), b, Rng::new(seed, "batches/outer"))?,
            inner: BatchIterator::new(pool, b, Rng::new(seed, "batches/inner"))?,
            rngs: Streamset {
                noise: Rng::new(seed, "noise"),
                dropout: Rng::new(seed, "dropout"),
                permute: Rng::new(seed, "permute"),
            },
            config,
            state,
            epoch: 0,
            log: TrainLog::default(),
            observer: None,
        })
    }

    /// Called with the model right after every parameter update.
    pub fn set_observer(&mut self, f: Observer) {
        self.observer = Some(f);
    }

    fn notify(&mut self, phase: Phase) {
        if let Some(f) = self.observer.as_mut() {
            f(phase, &self.state);
        }
    }

    fn check_split(&self, bundle: &DatasetBundle) -> Result<()> {
        let probe = BatchIterator::new(bundle.train_seen_idx().to_vec(), self.config.batch_size, Rng::new(0, ""))?;
        if !self.outer.same_pool(&probe) {
            return Err(Error::Config(
                "the dataset's training split differs from the one this run was started on".into(),
            ));
        }
        let (d, k) = (bundle.feature_dim(), bundle.attr_dim());
        if d != self.config.arch.feature_dim || k != self.config.arch.attr_dim {
            return Err(Error::Config(format!(
                "model expects d={}, k={} but the dataset has d={d}, k={k}",
                self.config.arch.feature_dim, self.config.arch.attr_dim
            )));
        }
        Ok(())
    }

    /// Phase (a): one discriminator update, followed by a W update when
    /// `update_main`. Returns the discriminator loss.
    pub fn inner_step(&mut self, bundle: &DatasetBundle, idx: &[usize], update_main: bool) -> Result<f64> {
        let cfg = &self.config;
        let w = &cfg.weights;
        let batch = bundle.batch::<f32>(idx);
        let mut g = Graph::new();
        let vars = self.state.bind(&mut g, |_| true);
        let Streamset { noise, dropout, permute } = &mut self.rngs;
        let mut ctx = Ctx::new(&mut g, &vars, &cfg.arch).training(dropout);
        let terms = overall1_terms(
            &mut ctx,
            &batch,
            Noise::Sample(noise),
            w.relation,
            w.kl_at(self.epoch),
            cfg.streams,
            cfg.reduction,
        )?;
        let perms: Vec<_> = (0..terms.latents.len())
            .map(|_| permutation_pair(idx.len(), permute))
            .collect();
        let dis = dis_term(&mut ctx, &terms.latents, &perms)?;
        let dis_value = g.value(dis).item().as_f64();
        let mut total = g.scale(dis, w.dis)?;
        if update_main {
            total = g.add(total, terms.overall1)?;
        }
        g.backward(total)?;

        let grads = self.state.collect_grads(&g, &vars, |n| n == Net::Discriminator);
        self.state.opt_dis.step(&mut self.state.params, &grads)?;
        self.notify(Phase::Discriminator);
        if update_main {
            let grads = self.state.collect_grads(&g, &vars, |n| n != Net::Discriminator);
            self.state.opt_main.step(&mut self.state.params, &grads)?;
            self.notify(Phase::InnerMain);
        }
        Ok(dis_value)
    }

    /// Phase (b): W update on `overall1 + λ2_eff · TC` with the discriminator
    /// bound as constants.
    pub fn outer_step(&mut self, bundle: &DatasetBundle, idx: &[usize]) -> Result<StepLosses> {
        let cfg = &self.config;
        let batch = bundle.batch::<f32>(idx);
        let mut g = Graph::new();
        let vars = self.state.bind(&mut g, |n| n != Net::Discriminator);
        let tc_weight = cfg.weights.tc_at(self.epoch);
        let Streamset { noise, dropout, .. } = &mut self.rngs;
        let mut ctx = Ctx::new(&mut g, &vars, &cfg.arch).training(dropout);
        let terms = overall1_terms(
            &mut ctx,
            &batch,
            Noise::Sample(noise),
            cfg.weights.relation,
            cfg.weights.kl_at(self.epoch),
            cfg.streams,
            cfg.reduction,
        )?;
        let tc = tc_term(&mut ctx, &terms.latents)?;
        let total = overall2(&mut g, terms.overall1, tc, tc_weight)?;
        let losses = read_losses(&g, &terms, tc, total, tc_weight);
        g.backward(total)?;
        let grads = self.state.collect_grads(&g, &vars, |n| n != Net::Discriminator);
        self.state.opt_main.step(&mut self.state.params, &grads)?;
        self.notify(Phase::OuterMain);
        Ok(losses)
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(&mut self, bundle: &DatasetBundle) -> Result<EpochRecord> {
        self.check_split(bundle)?;
        let start = Instant::now();
        let mut sums = StepLosses::default();
        let (mut dis_sum, mut n_outer, mut n_inner) = (0.0, 0usize, 0usize);
        self.outer.start_epoch();
        while let Some(idx_b) = self.outer.next_in_epoch() {
            for step in 0..self.config.n_dis {
                let idx_a = self.inner.next_cycling();
                let update_main = self.config.w_update_in_dis_loop || step + 1 == self.config.n_dis;
                dis_sum += self.inner_step(bundle, &idx_a, update_main)?;
                n_inner += 1;
            }
            let l = self.outer_step(bundle, &idx_b)?;
            sums.cvae += l.cvae;
            sums.rec += l.rec;
            sums.rel += l.rel;
            sums.tc += l.tc;
            n_outer += 1;
        }
        let n = n_outer as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            loss_cvae: sums.cvae / n,
            loss_rec: sums.rec / n,
            loss_rel: sums.rel / n,
            tc: sums.tc / n,
            loss_dis: dis_sum / n_inner as f64,
            kl_w: self.config.weights.kl_at(self.epoch),
            tc_w: self.config.weights.tc_at(self.epoch),
            seconds: if self.config.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {} cvae {:.4} rec {:.4} rel {:.4} tc {:.4} dis {:.4} ({:.1}s)",
            record.epoch,
            record.loss_cvae,
            record.loss_rec,
            record.loss_rel,
            record.tc,
            record.loss_dis,
            record.seconds
        );
        self.epoch += 1;
        self.log.records.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self, bundle: &DatasetBundle) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(bundle)?;
        }
        Ok(())
    }
}

fn read_losses<S: Scalar>(g: &Graph<S>, t: &Terms, tc: crate::Var, total: crate::Var, tc_weight: f64) -> StepLosses {
    let v = |x| g.value(x).item().as_f64();
    StepLosses {
        cvae: v(t.cvae),
        rec: v(t.rec),
        rel: v(t.rel),
        tc: v(tc),
        overall1: v(t.overall1),
        overall2: v(total),
        tc_weight,
    }
}

/// Phase (b) losses on `idx` without updating anything. Noise and dropout
/// come from fresh streams seeded with `seed`, so repeated calls agree.
pub fn step_losses<S: Scalar>(
    state: &ModelState<S>,
    config: &TrainConfig,
    bundle: &DatasetBundle,
    idx: &[usize],
    epoch: usize,
    seed: u64,
) -> Result<StepLosses> {
    let batch = bundle.batch::<S>(idx);
    let mut g = Graph::new();
    let vars = state.bind(&mut g, |n| n != Net::Discriminator);
    let mut noise = Rng::new(seed, "noise");
    let mut dropout = Rng::new(seed, "dropout");
    let mut ctx = Ctx::new(&mut g, &vars, &state.arch).training(&mut dropout);
    let w = &config.weights;
    let terms = overall1_terms(
        &mut ctx,
        &batch,
        Noise::Sample(&mut noise),
        w.relation,
        w.kl_at(epoch),
        config.streams,
        config.reduction,
    )?;
    let tc = tc_term(&mut ctx, &terms.latents)?;
    let tc_weight = w.tc_at(epoch);
    let total = overall2(&mut g, terms.overall1, tc, tc_weight)?;
    Ok(read_losses(&g, &terms, tc, total, tc_weight))
}

/// Trains a fresh model on `bundle` for `config.epochs` epochs.
pub fn train(bundle: &DatasetBundle, config: TrainConfig) -> Result<(ModelState<f32>, TrainLog)> {
    let mut t = Trainer::new(config, bundle)?;
    t.fit(bundle)?;
    Ok((t.state, t.log))
}

/// Rows per evaluation block; blocks are independent units of parallel work.
const ENCODE_BLOCK: usize = 256;

/// `E_ψ(x)` in evaluation mode, `[N × (l+m)]`.
pub fn encode<S: Scalar>(state: &ModelState<S>, x: &Tensor<S>, exec: Exec) -> Result<Tensor<S>> {
    let n = x.rows();
    let blocks = n.div_ceil(ENCODE_BLOCK);
    let parts = map_range(exec, blocks, |b| -> Result<Tensor<S>> {
        let rows: Vec<usize> = (b * ENCODE_BLOCK..((b + 1) * ENCODE_BLOCK).min(n)).collect();
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars = state.bind(&mut g, |_| false);
        let xv = g.constant(x.select_rows(&rows));
        let mut ctx = Ctx::new(&mut g, &vars, &state.arch);
        let lat = ctx.encode_disentangle(xv)?;
        Ok(g.value(lat.h).clone())
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<S>> = parts.iter().collect();
    Tensor::vstack(&refs)
}

/// Synthesized samples for a set of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized<S> {
    /// Generated features `x̂`, `[(C·n) × d]`.
    pub x: Tensor<S>,
    /// Their encodings `[h̄_s | h̄_n]`, `[(C·n) × (l+m)]`.
    pub h: Tensor<S>,
    /// Class of each row: `n` copies of each class, in input order.
    pub labels: Vec<i64>,
}

impl<S: Scalar> Synthesized<S> {
    /// The `h̄_s` columns.
    pub fn hs(&self, hs_dim: usize) -> Tensor<S> {
        self.h.slice_cols(0, hs_dim)
    }
}

/// Draws `n` standard-normal `z` per class, generates `x̂ = P(z, a_c)` and
/// encodes it, all in evaluation mode. Class `c` uses its own stream
/// `synthesize/<c>`, so the output does not depend on worker count.
pub fn synthesize<S: Scalar>(
    state: &ModelState<S>,
    attrs: &Tensor<S>,
    classes: &[i64],
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Synthesized<S>> {
    if attrs.rows() != classes.len() {
        return Err(Error::Shape {
            op: "synthesize",
            lhs: attrs.shape().to_vec(),
            rhs: vec![classes.len()],
        });
    }
    let zdim = state.arch.latent_dim;
    let parts = map_range(exec, classes.len(), |c| -> Result<(Tensor<S>, Tensor<S>)> {
        let mut rng = Rng::new(seed, &format!("synthesize/{}", classes[c]));
        let z = Tensor::matrix(n, zdim, (0..n * zdim).map(|_| S::of(rng.normal())).collect())?;
        let a = attrs.select_rows(&vec![c; n]);
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars = state.bind(&mut g, |_| false);
        let (zv, av) = (g.constant(z), g.constant(a));
        let mut ctx = Ctx::new(&mut g, &vars, &state.arch);
        let xhat = ctx.generate(zv, av)?;
        let lat = ctx.encode_disentangle(xhat)?;
        Ok((g.value(xhat).clone(), g.value(lat.h).clone()))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let xs: Vec<&Tensor<S>> = parts.iter().map(|p| &p.0).collect();
    let hs: Vec<&Tensor<S>> = parts.iter().map(|p| &p.1).collect();
    Ok(Synthesized {
        x: Tensor::vstack(&xs)?,
        h: Tensor::vstack(&hs)?,
        labels: classes.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect(),
    })
}

/// `h̄_s` for unseen classes and their labels.
pub fn synthesize_unseen<S: Scalar>(
    state: &ModelState<S>,
    attrs_unseen: &Tensor<S>,
    classes: &[i64],
    n_syn: usize,
    seed: u64,
) -> Result<(Tensor<S>, Vec<i64>)> {
    let s = synthesize(state, attrs_unseen, classes, n_syn, seed, Exec::auto())?;
    Ok((s.hs(state.arch.hs_dim), s.labels))
}
