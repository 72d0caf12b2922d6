//! Generalized zero-shot metrics, the softmax classifier, retrieval mAP and
//! confusion matrices.
//!
//! Accuracies are macro averages of per-class top-1 accuracy, in percent.
//! U is measured on unseen test samples and S on seen test samples, both
//! classified over all classes; H is their harmonic mean. T1 classifies
//! unseen test samples over the unseen classes only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::networks::ModelState;
use crate::par::{map_range, Exec};
use crate::tensor::{AdamConfig, AdamState, Axis, Graph, Rng, Tensor};
use crate::trainer::{encode, synthesize};

/// `2·U·S / (U + S)`, and 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s <= 0.0 {
        return 0.0;
    }
    2.0 * u * s / (u + s)
}

/// Mean over `classes` of the within-class accuracy, in percent. Classes with
/// no samples in `truth` are left out with a warning.
pub fn per_class_top1(preds: &[i64], truth: &[i64], classes: &[i64]) -> Result<f64> {
    Ok(per_class_accuracies(preds, truth, classes)?.1)
}

/// Per-class accuracies (percent, `None` for empty classes) and their mean.
pub fn per_class_accuracies(preds: &[i64], truth: &[i64], classes: &[i64]) -> Result<(Vec<Option<f64>>, f64)> {
    if preds.len() != truth.len() {
        return Err(Error::Shape {
            op: "per_class_top1",
            lhs: vec![preds.len()],
            rhs: vec![truth.len()],
        });
    }
    let pos: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut hits = vec![0usize; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (&p, &t) in preds.iter().zip(truth) {
        let i = *pos
            .get(&t)
            .ok_or_else(|| Error::Data(format!("label {t} is not in the evaluated class set")))?;
        counts[i] += 1;
        hits[i] += usize::from(p == t);
    }
    let accs: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .zip(classes)
        .map(|((&h, &n), c)| {
            if n == 0 {
                log::warn!("class {c} has no test samples and is left out of the average");
                None
            } else {
                Some(100.0 * h as f64 / n as f64)
            }
        })
        .collect();
    let present: Vec<f64> = accs.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((accs, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
        }
    }
}

/// Linear softmax classifier `r → |classes|`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    /// Ascending; column `j` of the logits scores `classes[j]`.
    pub classes: Vec<i64>,
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl SoftmaxClassifier {
    /// Minimizes mean cross-entropy with Adam from zero weights, shuffling
    /// the samples every epoch with `rng`.
    pub fn train(
        reps: &Tensor<f32>,
        labels: &[i64],
        classes: &[i64],
        cfg: &ClassifierConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut classes = classes.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if reps.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_classifier",
                lhs: reps.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let col: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut present = vec![false; classes.len()];
        let mut targets = Vec::with_capacity(labels.len());
        for &y in labels {
            let j = *col
                .get(&y)
                .ok_or_else(|| Error::Config(format!("training label {y} is not a classifier class")))?;
            present[j] = true;
            targets.push(j);
        }
        if let Some(j) = present.iter().position(|&p| !p) {
            return Err(Error::Config(format!("class {} has no training samples", classes[j])));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::Config("classifier batch_size and epochs must be positive".into()));
        }

        let (r, c) = (reps.cols(), classes.len());
        let mut params = BTreeMap::from([
            ("w".to_string(), Tensor::<f32>::zeros(&[r, c])),
            ("b".to_string(), Tensor::<f32>::zeros(&[1, c])),
        ]);
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::new(adam, params.iter());
        let mut order: Vec<usize> = (0..labels.len()).collect();
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let mut onehot = vec![0.0f32; chunk.len() * c];
                for (t, &i) in chunk.iter().enumerate() {
                    onehot[t * c + targets[i]] = 1.0;
                }
                let mut g = Graph::new();
                let w = g.param(params["w"].clone());
                let b = g.param(params["b"].clone());
                let x = g.constant(reps.select_rows(chunk));
                let y = g.constant(Tensor::matrix(chunk.len(), c, onehot)?);
                let logits = g.matmul(x, w)?;
                let logits = g.add_bias(logits, b)?;
                let ls = g.log_softmax(logits)?;
                let picked = g.mul(ls, y)?;
                let total = g.sum(picked, Axis::All)?;
                let loss = g.scale(total, -1.0 / chunk.len() as f64)?;
                g.backward(loss)?;
                let grads = BTreeMap::from([
                    ("w".to_string(), g.grad(w).cloned().expect("tracked")),
                    ("b".to_string(), g.grad(b).cloned().expect("tracked")),
                ]);
                opt.step(&mut params, &grads)?;
            }
        }
        Ok(SoftmaxClassifier {
            classes,
            w: params.remove("w").expect("present"),
            b: params.remove("b").expect("present"),
        })
    }

    pub fn logits(&self, reps: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(reps.clone());
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let l = g.matmul(x, w)?;
        let l = g.add_bias(l, b)?;
        Ok(g.value(l).clone())
    }

    pub fn predict(&self, reps: &Tensor<f32>) -> Result<Vec<i64>> {
        let logits = self.logits(reps)?;
        Ok(argmax_rows(&logits)
            .into_iter()
            .map(|j| self.classes[j])
            .collect())
    }
}

/// Column of the largest entry of each row; ties go to the lowest column.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Which features the classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Semantic-consistent part `h_s`.
    Hs,
    /// Semantic-unrelated part `h_n`.
    Hn,
    /// The whole disentangler output `[h_s | h_n]`.
    H,
    /// Raw features `x` and generated `x̂`, skipping the disentangler.
    X,
}

impl Representation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hs" => Ok(Representation::Hs),
            "hn" => Ok(Representation::Hn),
            "h" => Ok(Representation::H),
            "x" => Ok(Representation::X),
            _ => Err(Error::Config(format!("unknown representation {s}, expected hs, hn, h or x"))),
        }
    }

    fn select(self, h: &Tensor<f32>, x: &Tensor<f32>, hs_dim: usize) -> Tensor<f32> {
        match self {
            Representation::Hs => h.slice_cols(0, hs_dim),
            Representation::Hn => h.slice_cols(hs_dim, h.cols()),
            Representation::H => h.clone(),
            Representation::X => x.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub classifier: ClassifierConfig,
    /// Retrieval truncation ratios.
    pub ratios: Vec<f64>,
    /// Seeds synthesis and classifier shuffling.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            classifier: ClassifierConfig::default(),
            ratios: vec![1.0, 0.5, 0.25],
            seed: 0,
        }
    }
}

/// Confusion counts: row = true class, column = predicted class, both in
/// `classes` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<i64>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[i64], truth: &[i64], preds: &[i64]) -> Result<Self> {
        let pos: BTreeMap<i64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
        for (t, p) in truth.iter().zip(preds) {
            let (Some(&i), Some(&j)) = (pos.get(t), pos.get(p)) else {
                return Err(Error::Data(format!("confusion pair ({t}, {p}) outside the class list")));
            };
            counts[i][j] += 1;
        }
        Ok(ConfusionMatrix {
            classes: classes.to_vec(),
            counts,
        })
    }

    /// Rows scaled to percentages; empty rows stay zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    fn write_rows<W: Write, T: ToString>(&self, w: W, rows: &[Vec<T>]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["class".to_string()];
        header.extend(self.classes.iter().map(|c| c.to_string()));
        out.write_record(&header)?;
        for (c, row) in self.classes.iter().zip(rows) {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_counts_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_rows(w, &self.counts)
    }

    pub fn write_percent_csv<W: Write>(&self, w: W) -> Result<()> {
        let pct: Vec<Vec<String>> = self
            .row_percentages()
            .iter()
            .map(|r| r.iter().map(|v| format!("{v:.2}")).collect())
            .collect();
        self.write_rows(w, &pct)
    }

    /// Writes `<stem>_counts.csv` and `<stem>_percent.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (suffix, percent) in [("counts", false), ("percent", true)] {
            let path = dir.join(format!("{stem}_{suffix}.csv"));
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let f = std::io::BufWriter::new(f);
            if percent {
                self.write_percent_csv(f)?;
            } else {
                self.write_counts_csv(f)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: i64,
    pub unseen: bool,
    /// Percent; `None` when the class has no test samples.
    pub top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GZSLReport {
    pub representation: Representation,
    #[serde(rename = "U")]
    pub unseen: f64,
    #[serde(rename = "S")]
    pub seen: f64,
    #[serde(rename = "H")]
    pub harmonic: f64,
    #[serde(rename = "T1")]
    pub zsl_top1: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Ratio (as written in the config) → mAP in [0, 1].
    pub retrieval_map: BTreeMap<String, f64>,
    /// Unseen test samples over all classes.
    pub confusion: ConfusionMatrix,
}

/// Representations of every split plus the synthesized unseen samples.
struct Encoded {
    train: Tensor<f32>,
    test_seen: Tensor<f32>,
    test_unseen: Tensor<f32>,
    synth: Tensor<f32>,
    synth_labels: Vec<i64>,
}

fn encode_splits(
    state: &ModelState<f32>,
    bundle: &DatasetBundle,
    rep: Representation,
    n_syn: usize,
    seed: u64,
    exec: Exec,
) -> Result<Encoded> {
    let hs_dim = state.arch.hs_dim;
    let split = |idx: &[usize]| -> Result<Tensor<f32>> {
        let x = bundle.rows::<f32>(idx);
        let h = if rep == Representation::X {
            x.clone()
        } else {
            encode(state, &x, exec)?
        };
        Ok(rep.select(&h, &x, hs_dim))
    };
    let unseen = bundle.unseen_classes().to_vec();
    let mut sorted_unseen = unseen.clone();
    sorted_unseen.sort_unstable();
    let attrs = bundle.class_attributes::<f32>(&sorted_unseen);
    let syn = synthesize(state, &attrs, &sorted_unseen, n_syn, seed, exec)?;
    Ok(Encoded {
        train: split(bundle.train_seen_idx())?,
        test_seen: split(bundle.test_seen_idx())?,
        test_unseen: split(bundle.test_unseen_idx())?,
        synth: rep.select(&syn.h, &syn.x, hs_dim),
        synth_labels: syn.labels,
    })
}

/// Full GZSL evaluation of a trained model with one representation.
pub fn evaluate_gzsl(
    state: &ModelState<f32>,
    bundle: &DatasetBundle,
    n_syn: usize,
    cfg: &EvalConfig,
    rep: Representation,
) -> Result<GZSLReport> {
    evaluate_gzsl_with(state, bundle, n_syn, cfg, rep, Exec::auto())
}

pub fn evaluate_gzsl_with(
    state: &ModelState<f32>,
    bundle: &DatasetBundle,
    n_syn: usize,
    cfg: &EvalConfig,
    rep: Representation,
    exec: Exec,
) -> Result<GZSLReport> {
    let enc = encode_splits(state, bundle, rep, n_syn, cfg.seed, exec)?;
    let all = bundle.all_classes();
    let mut seen = bundle.seen_classes().to_vec();
    seen.sort_unstable();
    let mut unseen = bundle.unseen_classes().to_vec();
    unseen.sort_unstable();

    let reps = Tensor::vstack(&[&enc.train, &enc.synth])?;
    let mut labels = bundle.labels_of(bundle.train_seen_idx());
    labels.extend_from_slice(&enc.synth_labels);
    let gzsl = SoftmaxClassifier::train(
        &reps,
        &labels,
        &all,
        &cfg.classifier,
        &mut Rng::new(cfg.seed, "classifier/gzsl"),
    )?;
    let truth_u = bundle.labels_of(bundle.test_unseen_idx());
    let truth_s = bundle.labels_of(bundle.test_seen_idx());
    let pred_u = gzsl.predict(&enc.test_unseen)?;
    let (acc_u, u) = per_class_accuracies(&pred_u, &truth_u, &unseen)?;
    let (acc_s, s) = if truth_s.is_empty() {
        (vec![None; seen.len()], 0.0)
    } else {
        per_class_accuracies(&gzsl.predict(&enc.test_seen)?, &truth_s, &seen)?
    };

    let zsl = SoftmaxClassifier::train(
        &enc.synth,
        &enc.synth_labels,
        &unseen,
        &cfg.classifier,
        &mut Rng::new(cfg.seed, "classifier/zsl"),
    )?;
    let t1 = per_class_top1(&zsl.predict(&enc.test_unseen)?, &truth_u, &unseen)?;

    let per_class = seen
        .iter()
        .zip(&acc_s)
        .map(|(&c, &a)| ClassAccuracy {
            class: c,
            unseen: false,
            top1: a,
        })
        .chain(unseen.iter().zip(&acc_u).map(|(&c, &a)| ClassAccuracy {
            class: c,
            unseen: true,
            top1: a,
        }))
        .collect();

    let queries = class_centroids(&enc.synth, &enc.synth_labels, &unseen)?;
    let retrieval = retrieval_map(&queries, &unseen, &enc.test_unseen, &truth_u, &cfg.ratios, exec)?;

    Ok(GZSLReport {
        representation: rep,
        unseen: u,
        seen: s,
        harmonic: harmonic_mean(u, s),
        zsl_top1: t1,
        per_class,
        retrieval_map: retrieval,
        confusion: ConfusionMatrix::new(&all, &truth_u, &pred_u)?,
    })
}

/// Mean row of each class, in `classes` order.
pub fn class_centroids(reps: &Tensor<f32>, labels: &[i64], classes: &[i64]) -> Result<Tensor<f32>> {
    let r = reps.cols();
    let mut out = Vec::with_capacity(classes.len() * r);
    for &c in classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            return Err(Error::Data(format!("class {c} has no samples to average")));
        }
        let mut acc = vec![0.0f64; r];
        for &i in &rows {
            for (a, &v) in acc.iter_mut().zip(reps.row(i)) {
                *a += f64::from(v);
            }
        }
        out.extend(acc.iter().map(|&a| (a / rows.len() as f64) as f32));
    }
    Tensor::matrix(classes.len(), r, out)
}

/// Truncated average precision of one ranked relevance list:
/// `K = ceil(ratio · n_relevant)` and `AP = Σ_{hits at rank i ≤ K} precision@i / K`.
pub fn truncated_ap(ranked_relevance: &[bool], ratio: f64) -> f64 {
    let n_rel = ranked_relevance.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return 0.0;
    }
    let k = ((ratio * n_rel as f64).ceil() as usize).clamp(1, n_rel);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / k as f64
}

/// Ranks the gallery by ascending Euclidean distance to each class query
/// (ties by ascending gallery index) and returns, per ratio, the mean
/// truncated AP over `classes`.
pub fn retrieval_map(
    queries: &Tensor<f32>,
    classes: &[i64],
    gallery: &Tensor<f32>,
    gallery_labels: &[i64],
    ratios: &[f64],
    exec: Exec,
) -> Result<BTreeMap<String, f64>> {
    if queries.cols() != gallery.cols() || queries.rows() != classes.len() {
        return Err(Error::Shape {
            op: "retrieval_map",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("retrieval ratio {r} outside (0, 1]")));
    }
    let per_class: Vec<Vec<f64>> = map_range(exec, classes.len(), |c| {
        let q = queries.row(c);
        let mut ranked: Vec<(f64, usize)> = (0..gallery.rows())
            .map(|i| {
                let d: f64 = gallery
                    .row(i)
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum();
                (d.sqrt(), i)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = ranked.iter().map(|&(_, i)| gallery_labels[i] == classes[c]).collect();
        ratios.iter().map(|&r| truncated_ap(&relevance, r)).collect()
    });
    Ok(ratios
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let mean = per_class.iter().map(|aps| aps[j]).sum::<f64>() / classes.len().max(1) as f64;
            (format!("{r}"), mean)
        })
        .collect())
}

/// Retrieval only: synthesized centroids of each unseen class queried
/// against the real unseen test samples.
pub fn evaluate_retrieval(
    state: &ModelState<f32>,
    bundle: &DatasetBundle,
    n_syn: usize,
    ratios: &[f64],
    rep: Representation,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let exec = Exec::auto();
    let enc = encode_splits(state, bundle, rep, n_syn, seed, exec)?;
    let mut unseen = bundle.unseen_classes().to_vec();
    unseen.sort_unstable();
    let queries = class_centroids(&enc.synth, &enc.synth_labels, &unseen)?;
    let truth = bundle.labels_of(bundle.test_unseen_idx());
    retrieval_map(&queries, &unseen, &enc.test_unseen, &truth, ratios, exec)
}
