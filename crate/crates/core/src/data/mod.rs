//! Datasets: the validated bundle, its JSON manifest, batching and the
//! synthetic benchmark.

mod batch;
pub mod sdtensor;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use batch::{Batch, BatchIterator};
pub use sdtensor::{read_sdtensor, write_sdtensor, TensorData, TensorMap};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

/// Features, labels, class attributes and the seen/unseen split.
///
/// Immutable once built: every constructor runs [`DatasetBundle::validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    features: Tensor<f32>,
    labels: Vec<i64>,
    attributes: Tensor<f32>,
    seen_classes: Vec<i64>,
    unseen_classes: Vec<i64>,
    train_seen_idx: Vec<usize>,
    test_seen_idx: Vec<usize>,
    test_unseen_idx: Vec<usize>,
}

/// Raw parts of a bundle, before validation.
#[derive(Clone, Debug, Default)]
pub struct BundleParts {
    pub features: Option<Tensor<f32>>,
    pub labels: Vec<i64>,
    pub attributes: Option<Tensor<f32>>,
    pub seen_classes: Vec<i64>,
    pub unseen_classes: Vec<i64>,
    pub train_seen_idx: Vec<i64>,
    pub test_seen_idx: Vec<i64>,
    pub test_unseen_idx: Vec<i64>,
}

fn violation(rule: &'static str, detail: impl Into<String>) -> Error {
    Error::Validation {
        rule,
        detail: detail.into(),
    }
}

fn indices(rule_name: &str, n: usize, raw: &[i64]) -> Result<Vec<usize>> {
    raw.iter()
        .map(|&i| {
            usize::try_from(i)
                .ok()
                .filter(|&i| i < n)
                .ok_or_else(|| violation("index-range", format!("{rule_name} index {i} outside 0..{n}")))
        })
        .collect()
}

impl DatasetBundle {
    pub fn new(parts: BundleParts) -> Result<Self> {
        let features = parts
            .features
            .ok_or_else(|| violation("features-matrix", "missing features"))?;
        let attributes = parts
            .attributes
            .ok_or_else(|| violation("attributes-matrix", "missing attributes"))?;
        if features.shape().len() != 2 {
            return Err(violation("features-matrix", format!("features have shape {:?}", features.shape())));
        }
        if attributes.shape().len() != 2 {
            return Err(violation(
                "attributes-matrix",
                format!("attributes have shape {:?}", attributes.shape()),
            ));
        }
        let n = features.rows();
        let bundle = DatasetBundle {
            train_seen_idx: indices("train_seen_idx", n, &parts.train_seen_idx)?,
            test_seen_idx: indices("test_seen_idx", n, &parts.test_seen_idx)?,
            test_unseen_idx: indices("test_unseen_idx", n, &parts.test_unseen_idx)?,
            features,
            labels: parts.labels,
            attributes,
            seen_classes: parts.seen_classes,
            unseen_classes: parts.unseen_classes,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks every structural rule; errors name the rule that failed.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        let c = self.attributes.rows();
        if self.labels.len() != n {
            return Err(violation(
                "labels-length",
                format!("{} labels for {n} feature rows", self.labels.len()),
            ));
        }
        if !self.features.all_finite() {
            return Err(violation("features-finite", "features contain NaN or infinity"));
        }
        if !self.attributes.all_finite() {
            return Err(violation("attributes-finite", "attributes contain NaN or infinity"));
        }
        let seen: BTreeSet<i64> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<i64> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return Err(violation("class-ids-unique", "a class id is listed twice"));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(violation("classes-nonempty", "both seen and unseen class sets must be nonempty"));
        }
        if let Some(id) = seen.intersection(&unseen).next() {
            return Err(violation("seen-unseen-disjoint", format!("class {id} is both seen and unseen")));
        }
        let row_of = |id: i64| usize::try_from(id).ok().filter(|&r| r < c);
        for &id in seen.iter().chain(&unseen).chain(&self.labels) {
            if row_of(id).is_none() {
                return Err(violation(
                    "attribute-row-exists",
                    format!("class {id} has no row in the {c}-row attribute table"),
                ));
            }
        }
        let check = |rule: &'static str, idx: &[usize], set: &BTreeSet<i64>| -> Result<()> {
            match idx.iter().find(|&&i| !set.contains(&self.labels[i])) {
                Some(&i) => Err(violation(rule, format!("sample {i} has label {}", self.labels[i]))),
                None => Ok(()),
            }
        };
        check("train-label-seen", &self.train_seen_idx, &seen)?;
        check("test-seen-label-seen", &self.test_seen_idx, &seen)?;
        check("test-unseen-label-unseen", &self.test_unseen_idx, &unseen)?;
        if self.train_seen_idx.is_empty() {
            return Err(violation("train-nonempty", "no training samples"));
        }
        let mut used = vec![false; n];
        for &i in self
            .train_seen_idx
            .iter()
            .chain(&self.test_seen_idx)
            .chain(&self.test_unseen_idx)
        {
            if std::mem::replace(&mut used[i], true) {
                return Err(violation("split-disjoint", format!("sample {i} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn attributes(&self) -> &Tensor<f32> {
        &self.attributes
    }

    pub fn seen_classes(&self) -> &[i64] {
        &self.seen_classes
    }

    pub fn unseen_classes(&self) -> &[i64] {
        &self.unseen_classes
    }

    /// Seen then unseen class ids, each sorted ascending.
    pub fn all_classes(&self) -> Vec<i64> {
        let mut s = self.seen_classes.clone();
        s.sort_unstable();
        let mut u = self.unseen_classes.clone();
        u.sort_unstable();
        s.extend(u);
        s
    }

    pub fn train_seen_idx(&self) -> &[usize] {
        &self.train_seen_idx
    }

    pub fn test_seen_idx(&self) -> &[usize] {
        &self.test_seen_idx
    }

    pub fn test_unseen_idx(&self) -> &[usize] {
        &self.test_unseen_idx
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.cols()
    }

    /// Attribute rows for `classes`, in that order.
    pub fn class_attributes<S: Scalar>(&self, classes: &[i64]) -> Tensor<S> {
        let rows: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
        self.attributes.select_rows(&rows).cast()
    }

    pub fn rows<S: Scalar>(&self, idx: &[usize]) -> Tensor<S> {
        self.features.select_rows(idx).cast()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<i64> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Location of one tensor: an SDTensor file (relative to the manifest) and an
/// entry name inside it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub path: String,
    pub entry: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub features: TensorRef,
    pub labels: TensorRef,
    pub attributes: TensorRef,
    pub seen_classes: Vec<i64>,
    pub unseen_classes: Vec<i64>,
    pub train_seen_idx: Vec<i64>,
    pub test_seen_idx: Vec<i64>,
    pub test_unseen_idx: Vec<i64>,
}

pub const DATA_FILE: &str = "data.sdt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads a manifest and the tensors it references, then validates the bundle.
pub fn load_bundle(manifest_path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut files: BTreeMap<PathBuf, TensorMap> = BTreeMap::new();
    let mut fetch = |r: &TensorRef| -> Result<TensorData> {
        let path = base.join(&r.path);
        if !files.contains_key(&path) {
            let map = read_sdtensor(&path)?;
            files.insert(path.clone(), map);
        }
        files[&path]
            .get(&r.entry)
            .cloned()
            .ok_or_else(|| Error::Data(format!("{}: no entry named {}", path.display(), r.entry)))
    };
    let float = |t: TensorData, what: &str| {
        t.to_float::<f32>()
            .ok_or_else(|| Error::Data(format!("{what} must be a float tensor")))
    };
    let features = float(fetch(&manifest.features)?, "features")?;
    let attributes = float(fetch(&manifest.attributes)?, "attributes")?;
    let labels = fetch(&manifest.labels)?
        .as_i64()
        .ok_or_else(|| Error::Data("labels must be an i64 tensor".into()))?
        .to_vec();

    DatasetBundle::new(BundleParts {
        features: Some(features),
        labels,
        attributes: Some(attributes),
        seen_classes: manifest.seen_classes,
        unseen_classes: manifest.unseen_classes,
        train_seen_idx: manifest.train_seen_idx,
        test_seen_idx: manifest.test_seen_idx,
        test_unseen_idx: manifest.test_unseen_idx,
    })
}

/// Writes `data.sdt` and `manifest.json` into `dir`; returns the manifest path.
pub fn write_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut map = TensorMap::new();
    map.insert("features".into(), TensorData::F32(bundle.features.clone()));
    map.insert("labels".into(), TensorData::from_i64(bundle.labels.clone()));
    map.insert("attributes".into(), TensorData::F32(bundle.attributes.clone()));
    write_sdtensor(dir.join(DATA_FILE), &map)?;

    let entry = |name: &str| TensorRef {
        path: DATA_FILE.into(),
        entry: name.into(),
    };
    let to_i64 = |v: &[usize]| v.iter().map(|&i| i as i64).collect();
    let manifest = Manifest {
        features: entry("features"),
        labels: entry("labels"),
        attributes: entry("attributes"),
        seen_classes: bundle.seen_classes.clone(),
        unseen_classes: bundle.unseen_classes.clone(),
        train_seen_idx: to_i64(&bundle.train_seen_idx),
        test_seen_idx: to_i64(&bundle.test_seen_idx),
        test_unseen_idx: to_i64(&bundle.test_unseen_idx),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
