//! Embedding spaces, labels, correspondences and anchor sets on disk.
//!
//! Rows are matched across files by sample id, never by position.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{npy, seeded_rng};

/// An `N x d` matrix of representations with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    pub name: String,
    pub data: DMatrix<f64>,
    pub sample_ids: Vec<String>,
}

impl EmbeddingSpace {
    pub fn new(
        name: impl Into<String>,
        data: DMatrix<f64>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let space = EmbeddingSpace {
            name: name.into(),
            data,
            sample_ids,
        };
        space.validate()?;
        Ok(space)
    }

    /// Builds a space with positional ids `row_0, row_1, ...`.
    pub fn with_positional_ids(name: impl Into<String>, data: DMatrix<f64>) -> Result<Self> {
        let ids = positional_ids(data.nrows());
        Self::new(name, data, ids)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.nrows() == 0 || self.data.ncols() == 0 {
            return Err(Error::invalid(format!(
                "space '{}' is empty ({}x{})",
                self.name,
                self.data.nrows(),
                self.data.ncols()
            )));
        }
        check_finite(&self.data)?;
        if self.sample_ids.len() != self.data.nrows() {
            return Err(Error::invalid(format!(
                "space '{}' has {} rows but {} sample ids",
                self.name,
                self.data.nrows(),
                self.sample_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.sample_ids.len());
        for id in &self.sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate sample id '{id}' in space '{}'",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn rows(&self, rows: &[usize]) -> DMatrix<f64> {
        self.data.select_rows(rows)
    }
}

pub(crate) fn positional_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("row_{i}")).collect()
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// `emb.npy` -> `emb.ids.txt`
pub fn ids_sidecar(path: &Path) -> PathBuf {
    path.with_extension("ids.txt")
}

/// `labels.csv` -> `labels.classes.json`
pub fn classes_sidecar(path: &Path) -> PathBuf {
    path.with_extension("classes.json")
}

pub fn load_space(path: &Path) -> Result<EmbeddingSpace> {
    let data = npy::read_matrix(path)?;
    check_finite(&data)?;
    let sidecar = ids_sidecar(path);
    let ids = if sidecar.exists() {
        read_ids(&sidecar)?
    } else {
        positional_ids(data.nrows())
    };
    if ids.len() != data.nrows() {
        return Err(Error::invalid(format!(
            "{} lists {} ids but the array has {} rows",
            sidecar.display(),
            ids.len(),
            data.nrows()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingSpace::new(name, data, ids)
}

pub fn save_space(space: &EmbeddingSpace, path: &Path) -> Result<()> {
    space.validate()?;
    npy::write_matrix(path, &space.data)?;
    write_ids(&ids_sidecar(path), &space.sample_ids)
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect())
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::with_capacity(ids.len() * 8);
    for id in ids {
        if id.contains('\n') {
            return Err(Error::invalid(format!(
                "sample id {id:?} contains a newline"
            )));
        }
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Class labels keyed by sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    sample_id: String,
    label: usize,
}

impl LabelSet {
    pub fn new(
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let set = LabelSet {
            sample_ids,
            labels,
            class_names,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::invalid("a label set needs at least 2 classes"));
        }
        if self.sample_ids.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} sample ids but {} labels",
                self.sample_ids.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Labels of the given rows of `space`, looked up by sample id.
    pub fn for_rows(&self, space: &EmbeddingSpace, rows: &[usize]) -> Result<Vec<usize>> {
        let by_id: HashMap<&str, usize> = self
            .sample_ids
            .iter()
            .map(String::as_str)
            .zip(self.labels.iter().copied())
            .collect();
        rows.iter()
            .map(|&r| {
                let id = space.sample_ids.get(r).ok_or_else(|| {
                    Error::invalid(format!("row {r} out of range for space '{}'", space.name))
                })?;
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("no label for sample '{id}'")))
            })
            .collect()
    }

    /// All rows of `space` that carry a label, in row order.
    pub fn labeled_rows(&self, space: &EmbeddingSpace) -> Vec<usize> {
        let ids: HashSet<&str> = self.sample_ids.iter().map(String::as_str).collect();
        (0..space.len())
            .filter(|&r| ids.contains(space.sample_ids[r].as_str()))
            .collect()
    }
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let headers = reader.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "sample_id" || &headers[1] != "label" {
        return Err(Error::parse(path, "expected header 'sample_id,label'"));
    }
    let mut sample_ids = Vec::new();
    let mut labels = Vec::new();
    for record in reader.deserialize::<LabelRecord>() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        sample_ids.push(record.sample_id);
        labels.push(record.label);
    }
    let sidecar = classes_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let class_names: Vec<String> =
        serde_json::from_str(&text).map_err(|e| Error::parse(&sidecar, e))?;
    LabelSet::new(sample_ids, labels, class_names)
}

pub fn save_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    labels.validate()?;
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    for (id, &label) in labels.sample_ids.iter().zip(&labels.labels) {
        writer
            .serialize(LabelRecord {
                sample_id: id.clone(),
                label,
            })
            .map_err(|e| Error::parse(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = classes_sidecar(path);
    let json = serde_json::to_string_pretty(&labels.class_names).expect("strings serialize");
    fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
}

/// Pairs of sample ids asserting that two rows express the same concept.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Correspondence {
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrespondenceRecord {
    source_id: String,
    target_id: String,
}

impl Correspondence {
    /// Every sample id present in both spaces, in source row order.
    pub fn shared_ids(source: &EmbeddingSpace, target: &EmbeddingSpace) -> Self {
        let target_ids: HashSet<&str> = target.sample_ids.iter().map(String::as_str).collect();
        let pairs = source
            .sample_ids
            .iter()
            .filter(|id| target_ids.contains(id.as_str()))
            .map(|id| (id.clone(), id.clone()))
            .collect();
        Correspondence { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keeps only pairs whose source id is in `ids`.
    pub fn restrict_source(&self, ids: &HashSet<&str>) -> Self {
        Correspondence {
            pairs: self
                .pairs
                .iter()
                .filter(|(s, _)| ids.contains(s.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Resolves ids to `(source_row, target_row)` pairs.
    pub fn resolve(
        &self,
        source: &EmbeddingSpace,
        target: &EmbeddingSpace,
    ) -> Result<Vec<(usize, usize)>> {
        let src = source.id_index();
        let tgt = target.id_index();
        let mut seen = HashSet::with_capacity(self.pairs.len());
        self.pairs
            .iter()
            .map(|(s, t)| {
                let si = *src.get(s.as_str()).ok_or_else(|| {
                    Error::invalid(format!("source id '{s}' not in space '{}'", source.name))
                })?;
                let ti = *tgt.get(t.as_str()).ok_or_else(|| {
                    Error::invalid(format!("target id '{t}' not in space '{}'", target.name))
                })?;
                if !seen.insert(si) {
                    return Err(Error::invalid(format!("source id '{s}' appears twice")));
                }
                Ok((si, ti))
            })
            .collect()
    }
}

pub fn load_correspondence(path: &Path) -> Result<Correspondence> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let headers = reader.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "source_id" || &headers[1] != "target_id" {
        return Err(Error::parse(path, "expected header 'source_id,target_id'"));
    }
    let pairs = reader
        .deserialize::<CorrespondenceRecord>()
        .map(|r| {
            r.map(|r| (r.source_id, r.target_id))
                .map_err(|e| Error::parse(path, e))
        })
        .collect::<Result<_>>()?;
    Ok(Correspondence { pairs })
}

pub fn save_correspondence(corr: &Correspondence, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    if corr.pairs.is_empty() {
        writer
            .write_record(["source_id", "target_id"])
            .map_err(|e| Error::parse(path, e))?;
    }
    for (s, t) in &corr.pairs {
        writer
            .serialize(CorrespondenceRecord {
                source_id: s.clone(),
                target_id: t.clone(),
            })
            .map_err(|e| Error::parse(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Row-index pairs tying anchors in a source space to anchors in a target space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub source_space: String,
    pub target_space: String,
    pub pairs: Vec<(usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn source_rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn target_rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Uses every pair of the correspondence as an anchor.
    pub fn from_correspondence(
        source: &EmbeddingSpace,
        target: &EmbeddingSpace,
        corr: &Correspondence,
    ) -> Result<Self> {
        let set = AnchorSet {
            source_space: source.name.clone(),
            target_space: target.name.clone(),
            pairs: corr.resolve(source, target)?,
        };
        set.validate(source, target)?;
        Ok(set)
    }

    pub fn validate(&self, source: &EmbeddingSpace, target: &EmbeddingSpace) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("anchor set is empty"));
        }
        let mut seen = HashSet::with_capacity(self.pairs.len());
        for &(s, t) in &self.pairs {
            if s >= source.len() || t >= target.len() {
                return Err(Error::invalid(format!(
                    "anchor pair ({s}, {t}) out of range for spaces of {} and {} rows",
                    source.len(),
                    target.len()
                )));
            }
            if !seen.insert(s) {
                return Err(Error::invalid(format!("source row {s} is anchored twice")));
            }
        }
        Ok(())
    }

    /// Anchor pairs as sample ids, for writing back out as a correspondence.
    pub fn to_correspondence(
        &self,
        source: &EmbeddingSpace,
        target: &EmbeddingSpace,
    ) -> Correspondence {
        Correspondence {
            pairs: self
                .pairs
                .iter()
                .map(|&(s, t)| (source.sample_ids[s].clone(), target.sample_ids[t].clone()))
                .collect(),
        }
    }
}

/// Draws `k` correspondence pairs uniformly without replacement.
pub fn sample_anchors(
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    correspondence: &Correspondence,
    k: usize,
    seed: u64,
) -> Result<AnchorSet> {
    if k == 0 {
        return Err(Error::invalid("anchor count must be at least 1"));
    }
    let available = correspondence.resolve(source, target)?;
    if k > available.len() {
        return Err(Error::invalid(format!(
            "requested {k} anchors but only {} correspondences are available",
            available.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let pairs = index::sample(&mut rng, available.len(), k)
        .into_iter()
        .map(|i| available[i])
        .collect();
    Ok(AnchorSet {
        source_space: source.name.clone(),
        target_space: target.name.clone(),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// JSON index of a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetManifest {
    pub spaces: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub labels: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
    #[serde(default)]
    pub split: BTreeMap<String, Split>,
    /// Optional group tag per space (e.g. "general", "medical").
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, String>,
    /// Optional prompt bank index (see `zeroshot::PromptBankIndex`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
}

impl DatasetManifest {
    /// Reads a manifest and resolves its paths against the manifest directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        manifest.spaces.values_mut().for_each(resolve);
        manifest.labels.values_mut().for_each(resolve);
        if let Some(p) = manifest.anchors.as_mut() {
            resolve(p);
        }
        if let Some(p) = manifest.prompts.as_mut() {
            resolve(p);
        }
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        let files = self
            .spaces
            .values()
            .chain(self.labels.values())
            .chain(self.anchors.iter())
            .chain(self.prompts.iter());
        for file in files {
            if !file.exists() {
                return Err(Error::invalid(format!(
                    "manifest references missing file {}",
                    file.display()
                )));
            }
        }
        for (name, split) in &self.split {
            if !self.spaces.contains_key(name) {
                return Err(Error::invalid(format!(
                    "split given for unknown space '{name}'"
                )));
            }
            let train: HashSet<usize> = split.train.iter().copied().collect();
            if let Some(r) = split.test.iter().find(|r| train.contains(r)) {
                return Err(Error::invalid(format!(
                    "row {r} of space '{name}' is in both train and test splits"
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest with paths made relative to `path`'s directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let rel = |p: &PathBuf| {
            p.strip_prefix(base)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| p.clone())
        };
        let out = DatasetManifest {
            spaces: self
                .spaces
                .iter()
                .map(|(k, v)| (k.clone(), rel(v)))
                .collect(),
            labels: self
                .labels
                .iter()
                .map(|(k, v)| (k.clone(), rel(v)))
                .collect(),
            anchors: self.anchors.as_ref().map(rel),
            split: self.split.clone(),
            groups: self.groups.clone(),
            prompts: self.prompts.as_ref().map(rel),
        };
        let json = serde_json::to_string_pretty(&out).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A manifest with every referenced file loaded and validated.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spaces: BTreeMap<String, EmbeddingSpace>,
    pub labels: BTreeMap<String, LabelSet>,
    pub correspondence: Option<Correspondence>,
    pub split: BTreeMap<String, Split>,
    pub groups: BTreeMap<String, String>,
    pub prompts: Option<PathBuf>,
}

impl Dataset {
    pub fn open(manifest: &DatasetManifest) -> Result<Self> {
        let mut spaces = BTreeMap::new();
        for (name, path) in &manifest.spaces {
            let mut space = load_space(path)?;
            space.name = name.clone();
            spaces.insert(name.clone(), space);
        }
        let labels = manifest
            .labels
            .iter()
            .map(|(task, path)| Ok((task.clone(), load_labels(path)?)))
            .collect::<Result<_>>()?;
        let correspondence = manifest
            .anchors
            .as_deref()
            .map(load_correspondence)
            .transpose()?;
        for (name, split) in &manifest.split {
            let n = spaces[name].len();
            if let Some(r) = split.train.iter().chain(&split.test).find(|&&r| r >= n) {
                return Err(Error::invalid(format!(
                    "split row {r} out of range for space '{name}'"
                )));
            }
        }
        Ok(Dataset {
            spaces,
            labels,
            correspondence,
            split: manifest.split.clone(),
            groups: manifest.groups.clone(),
            prompts: manifest.prompts.clone(),
        })
    }
}
