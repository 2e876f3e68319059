//! Experiment runner: anchor sweeps, domain-group matrices and zero-shot
//! benchmarks, reported as a long-format CSV plus aggregated JSON.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{summarize, MetricSummary};
use crate::stitching::{
    stitch_evaluate, train_probe, upper_bound_evaluate, LinearProbe, ProbeParams, UPPER_BOUND,
};
use crate::store::{
    sample_anchors, Correspondence, Dataset, DatasetManifest, EmbeddingSpace, LabelSet,
};
use crate::synthetic::{
    gen_groups, gen_multimodal_view, gen_prompt_bank, gen_synthetic, GroupConfig, SyntheticConfig,
};
use crate::transform::{fit_alignment, AffineFitOptions, FitOptions, TransformKind};
use crate::zeroshot::{
    load_prompt_bank, zero_shot_multimodal, zero_shot_unimodal, ClassPromptBank,
};

pub const MULTIMODAL: &str = "multimodal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    AnchorSweep,
    GroupMatrix,
    ZeroShot,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::AnchorSweep => "anchor_sweep",
            Experiment::GroupMatrix => "group_matrix",
            Experiment::ZeroShot => "zero_shot",
        })
    }
}

/// Synthetic image space, text space, prompts and a multimodal baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalConfig {
    #[serde(flatten)]
    pub pair: SyntheticConfig,
    #[serde(default = "default_prompts_per_class")]
    pub prompts_per_class: usize,
    #[serde(default = "default_prompt_noise")]
    pub prompt_noise: f64,
    #[serde(default = "default_multimodal_noise")]
    pub multimodal_noise: f64,
}

fn default_prompts_per_class() -> usize {
    10
}

fn default_prompt_noise() -> f64 {
    0.5
}

fn default_multimodal_noise() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSource {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    /// Label task to evaluate; defaults to the first in the manifest.
    #[serde(default)]
    pub task: Option<String>,
    /// Zero-shot only: the space the prompts live in.
    #[serde(default)]
    pub text_space: Option<String>,
    /// Zero-shot only: an image space that already shares the text space.
    #[serde(default)]
    pub multimodal_space: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Groups(GroupConfig),
    CrossModal(CrossModalConfig),
    Manifest(ManifestSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: Experiment,
    pub data: DataSource,
    /// Naive is always evaluated as a baseline, whether listed or not.
    #[serde(default = "default_kinds")]
    pub kinds: Vec<TransformKind>,
    pub anchor_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Anchor sweep only: ordered `[source, target]` space pairs. Empty
    /// means every ordered pair of distinct spaces.
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
    /// Leading fraction of rows used for probe training and anchor
    /// sampling when the data has no explicit split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub probe: ProbeParams,
    #[serde(default)]
    pub affine: AffineFitOptions,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Also write `sweep.svg` (anchor sweeps only).
    #[serde(default)]
    pub plot: bool,
}

fn default_kinds() -> Vec<TransformKind> {
    TransformKind::ALL.to_vec()
}

fn default_train_fraction() -> f64 {
    0.8
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let DataSource::Manifest(m) = &mut cfg.data {
            if m.path.is_relative() {
                m.path = base.join(&m.path);
            }
        }
        if let Some(out) = cfg.output.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_counts.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("anchor_counts and seeds must not be empty"));
        }
        if let Some(k) = self.anchor_counts.iter().find(|&&k| k < 2) {
            return Err(Error::invalid(format!(
                "anchor count {k} is below the minimum of 2"
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(
                "train_fraction must lie strictly between 0 and 1",
            ));
        }
        match (self.experiment, &self.data) {
            (Experiment::ZeroShot, DataSource::CrossModal(_)) => Ok(()),
            (Experiment::ZeroShot, DataSource::Manifest(m)) if m.text_space.is_some() => Ok(()),
            (Experiment::ZeroShot, _) => Err(Error::invalid(
                "zero_shot needs cross_modal data or a manifest with text_space",
            )),
            (_, DataSource::CrossModal(_)) => {
                Err(Error::invalid("cross_modal data is only for zero_shot"))
            }
            _ => Ok(()),
        }
    }

    /// Configured kinds in order, deduplicated, with Naive appended if absent.
    pub fn methods(&self) -> Vec<TransformKind> {
        let mut out: Vec<TransformKind> = Vec::new();
        for &k in self
            .kinds
            .iter()
            .chain(std::iter::once(&TransformKind::Naive))
        {
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }
}

/// One evaluated configuration; failed runs carry an error instead of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub source_space: String,
    pub source_group: String,
    pub target_space: String,
    pub target_group: String,
    pub method: String,
    pub anchor_count: usize,
    pub seed: Option<u64>,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const CSV_HEADER: [&str; 11] = [
    "experiment",
    "source_space",
    "source_group",
    "target_space",
    "target_group",
    "method",
    "anchor_count",
    "seed",
    "auroc",
    "accuracy",
    "status",
];

/// Shortest round-trip decimal form, used for every metric written or printed.
pub fn format_metric(v: f64) -> String {
    format!("{v}")
}

impl RunRecord {
    fn csv_fields(&self, experiment: &str) -> [String; 11] {
        let opt = |v: Option<f64>| v.map(format_metric).unwrap_or_default();
        [
            experiment.to_string(),
            self.source_space.clone(),
            self.source_group.clone(),
            self.target_space.clone(),
            self.target_group.clone(),
            self.method.clone(),
            self.anchor_count.to_string(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            opt(self.auroc),
            opt(self.accuracy),
            match &self.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {e}"),
            },
        ]
    }

    fn ok(&self) -> Option<(f64, f64)> {
        self.auroc.zip(self.accuracy)
    }
}

pub fn write_csv(path: &Path, experiment: &str, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(CSV_HEADER)
        .map_err(|e| Error::parse(path, e))?;
    for r in records {
        w.write_record(r.csv_fields(experiment))
            .map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aggregate over seeds (and over space pairs sharing the same groups).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub source_group: String,
    pub target_group: String,
    pub method: String,
    pub anchor_count: usize,
    pub auroc: Option<MetricSummary>,
    pub accuracy: Option<MetricSummary>,
    pub failed: usize,
    /// Mean baseline of the cell's target spaces (probe upper bound, or the
    /// multimodal encoder for zero-shot).
    pub reference_auroc: Option<f64>,
    pub reference_accuracy: Option<f64>,
}

/// One source-group/target-group entry of the domain matrix (AUROC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub source_group: String,
    pub target_group: String,
    pub method: String,
    pub anchor_count: usize,
    /// Mean upper bound over the source group's spaces.
    pub sub: f64,
    /// Mean upper bound over the target group's spaces.
    pub tub: f64,
    /// Over seeds, each seed averaged over pairs of distinct spaces.
    pub alignment: Option<MetricSummary>,
    /// `(alignment - sub) / sub * 100`
    pub delta_pct: Option<f64>,
    /// Each space stitched onto itself (same-group rows only).
    pub self_alignment: Option<MetricSummary>,
    pub self_delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub experiment: Experiment,
    pub baselines: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_rows: Vec<GroupRow>,
    #[serde(skip)]
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn cell(
        &self,
        source_group: &str,
        target_group: &str,
        method: &str,
        anchor_count: usize,
    ) -> Option<&CellSummary> {
        self.cells.iter().find(|c| {
            c.source_group == source_group
                && c.target_group == target_group
                && c.method == method
                && c.anchor_count == anchor_count
        })
    }

    pub fn baseline(&self, method: &str, space: &str) -> Option<&RunRecord> {
        self.baselines
            .iter()
            .find(|b| b.method == method && b.target_space == space)
    }

    /// Writes `report.csv`, `report.json` and, if requested, `sweep.svg`.
    pub fn write(&self, dir: &Path, plot: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records: Vec<RunRecord> = self.baselines.iter().chain(&self.runs).cloned().collect();
        write_csv(
            &dir.join("report.csv"),
            &self.experiment.to_string(),
            &records,
        )?;
        let json_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
        if plot && self.experiment == Experiment::AnchorSweep {
            let svg_path = dir.join("sweep.svg");
            fs::write(&svg_path, sweep_svg(self)).map_err(|e| Error::io(&svg_path, e))?;
        }
        Ok(())
    }
}

struct Entry {
    space: EmbeddingSpace,
    group: String,
    train: Vec<usize>,
    test: Vec<usize>,
}

struct Prepared {
    entries: Vec<Entry>,
    labels: LabelSet,
    /// Explicit id pairs; spaces without one are matched on shared ids.
    explicit: Option<Correspondence>,
    bank: Option<ClassPromptBank>,
    text: Option<usize>,
    multimodal: Option<usize>,
}

fn leading_split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_train = ((n as f64) * fraction).floor() as usize;
    ((0..n_train).collect(), (n_train..n).collect())
}

fn merge_labels(a: &LabelSet, b: &LabelSet) -> Result<LabelSet> {
    if a.sample_ids == b.sample_ids {
        return Ok(a.clone());
    }
    let ids = a.sample_ids.iter().chain(&b.sample_ids).cloned().collect();
    let labels = a.labels.iter().chain(&b.labels).copied().collect();
    LabelSet::new(ids, labels, a.class_names.clone())
}

impl Prepared {
    fn entry(space: EmbeddingSpace, group: &str, fraction: f64) -> Entry {
        let (train, test) = leading_split(space.len(), fraction);
        Entry {
            space,
            group: group.to_string(),
            train,
            test,
        }
    }

    fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let f = cfg.train_fraction;
        match &cfg.data {
            DataSource::Synthetic(s) => {
                let pair = gen_synthetic(s)?;
                let labels = merge_labels(&pair.labels, &pair.target_labels())?;
                Ok(Prepared {
                    explicit: s.distinct_ids.then(|| pair.correspondence.clone()),
                    entries: vec![
                        Self::entry(pair.source, "source", f),
                        Self::entry(pair.target, "target", f),
                    ],
                    labels,
                    bank: None,
                    text: None,
                    multimodal: None,
                })
            }
            DataSource::Groups(g) => {
                let groups = gen_groups(g)?;
                Ok(Prepared {
                    entries: groups
                        .spaces
                        .into_iter()
                        .map(|(space, group)| Self::entry(space, &group, f))
                        .collect(),
                    labels: groups.labels,
                    explicit: None,
                    bank: None,
                    text: None,
                    multimodal: None,
                })
            }
            DataSource::CrossModal(c) => {
                let mut pair = gen_synthetic(&c.pair)?;
                let bank = gen_prompt_bank(
                    &pair,
                    c.prompts_per_class,
                    c.prompt_noise,
                    c.pair.seed.wrapping_add(1),
                )?;
                let mm =
                    gen_multimodal_view(&pair, c.multimodal_noise, c.pair.seed.wrapping_add(2))?;
                let labels = merge_labels(&pair.labels, &pair.target_labels())?;
                pair.source.name = "image".into();
                pair.target.name = "text".into();
                Ok(Prepared {
                    explicit: c.pair.distinct_ids.then(|| pair.correspondence.clone()),
                    entries: vec![
                        Self::entry(pair.source, "image", f),
                        Self::entry(pair.target, "text", f),
                        Self::entry(mm, MULTIMODAL, f),
                    ],
                    labels,
                    bank: Some(bank),
                    text: Some(1),
                    multimodal: Some(2),
                })
            }
            DataSource::Manifest(m) => Self::from_manifest(m, f),
        }
    }

    fn from_manifest(m: &ManifestSource, fraction: f64) -> Result<Self> {
        let dataset = Dataset::open(&DatasetManifest::load(&m.path)?)?;
        let labels = match &m.task {
            Some(task) => dataset
                .labels
                .get(task)
                .ok_or_else(|| Error::invalid(format!("manifest has no label task '{task}'")))?,
            None => dataset
                .labels
                .values()
                .next()
                .ok_or_else(|| Error::invalid("manifest has no labels"))?,
        }
        .clone();
        let mut entries = Vec::new();
        for (name, space) in &dataset.spaces {
            let labeled: HashSet<usize> = labels.labeled_rows(space).into_iter().collect();
            let (train, test) = match dataset.split.get(name) {
                Some(s) => (s.train.clone(), s.test.clone()),
                None => leading_split(space.len(), fraction),
            };
            entries.push(Entry {
                group: dataset
                    .groups
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| name.clone()),
                train: train.into_iter().filter(|r| labeled.contains(r)).collect(),
                test: test.into_iter().filter(|r| labeled.contains(r)).collect(),
                space: space.clone(),
            });
        }
        let find = |name: &Option<String>| -> Result<Option<usize>> {
            name.as_ref()
                .map(|n| {
                    entries
                        .iter()
                        .position(|e| &e.space.name == n)
                        .ok_or_else(|| Error::invalid(format!("manifest has no space '{n}'")))
                })
                .transpose()
        };
        let text = find(&m.text_space)?;
        let multimodal = find(&m.multimodal_space)?;
        let bank = match (text, &dataset.prompts) {
            (Some(_), Some(p)) => Some(load_prompt_bank(p)?.reorder(&labels.class_names)?),
            (Some(_), None) => {
                return Err(Error::invalid("zero-shot manifest needs a prompt bank"))
            }
            _ => None,
        };
        Ok(Prepared {
            entries,
            labels,
            explicit: dataset.correspondence,
            bank,
            text,
            multimodal,
        })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.space.name == name)
            .ok_or_else(|| Error::invalid(format!("no space named '{name}'")))
    }

    /// Anchor candidates for `s -> t`, restricted to the source training rows.
    fn candidates(&self, s: usize, t: usize) -> Correspondence {
        let (src, tgt) = (&self.entries[s], &self.entries[t]);
        let all = match &self.explicit {
            Some(c) if s != t => {
                let in_src: HashSet<&str> =
                    src.space.sample_ids.iter().map(String::as_str).collect();
                let in_tgt: HashSet<&str> =
                    tgt.space.sample_ids.iter().map(String::as_str).collect();
                let forward = c.pairs.iter().cloned();
                let backward = c.pairs.iter().map(|(a, b)| (b.clone(), a.clone()));
                Correspondence {
                    pairs: forward
                        .chain(backward)
                        .filter(|(a, b)| in_src.contains(a.as_str()) && in_tgt.contains(b.as_str()))
                        .collect(),
                }
            }
            _ => Correspondence::shared_ids(&src.space, &tgt.space),
        };
        let train: HashSet<&str> = src
            .train
            .iter()
            .map(|&r| src.space.sample_ids[r].as_str())
            .collect();
        all.restrict_source(&train)
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    source: usize,
    target: usize,
    kind: TransformKind,
    anchors: usize,
    seed: u64,
}

fn record(p: &Prepared, job: &Job, outcome: Result<(f64, f64)>) -> RunRecord {
    let (src, tgt) = (&p.entries[job.source], &p.entries[job.target]);
    let (auroc, accuracy, error) = match outcome {
        Ok((a, b)) => (Some(a), Some(b), None),
        Err(e) => {
            warn!(
                "{} {} -> {} K={} seed={} failed: {e}",
                job.kind, src.space.name, tgt.space.name, job.anchors, job.seed
            );
            (None, None, Some(e.to_string()))
        }
    };
    RunRecord {
        source_space: src.space.name.clone(),
        source_group: src.group.clone(),
        target_space: tgt.space.name.clone(),
        target_group: tgt.group.clone(),
        method: job.kind.to_string(),
        anchor_count: job.anchors,
        seed: Some(job.seed),
        auroc,
        accuracy,
        error,
    }
}

fn baseline_record(entry: &Entry, method: &str, metrics: (f64, f64)) -> RunRecord {
    RunRecord {
        source_space: entry.space.name.clone(),
        source_group: entry.group.clone(),
        target_space: entry.space.name.clone(),
        target_group: entry.group.clone(),
        method: method.to_string(),
        anchor_count: 0,
        seed: None,
        auroc: Some(metrics.0),
        accuracy: Some(metrics.1),
        error: None,
    }
}

fn fit_opts(cfg: &ExperimentConfig, seed: u64) -> FitOptions {
    FitOptions {
        affine: cfg.affine,
        seed: Some(seed),
    }
}

fn stitch_job(
    cfg: &ExperimentConfig,
    p: &Prepared,
    probes: &[Option<LinearProbe>],
    job: &Job,
) -> Result<(f64, f64)> {
    let (src, tgt) = (&p.entries[job.source], &p.entries[job.target]);
    let anchors = sample_anchors(
        &src.space,
        &tgt.space,
        &p.candidates(job.source, job.target),
        job.anchors,
        job.seed,
    )?;
    let t = fit_alignment(
        &src.space,
        &tgt.space,
        &anchors,
        job.kind,
        &fit_opts(cfg, job.seed),
    )?;
    let probe = probes[job.target]
        .as_ref()
        .expect("probes are trained for every target space");
    let r = stitch_evaluate(&src.space, &t, probe, &p.labels, &src.test)?;
    Ok((r.auroc, r.accuracy))
}

fn zero_shot_job(cfg: &ExperimentConfig, p: &Prepared, job: &Job) -> Result<(f64, f64)> {
    let (src, tgt) = (&p.entries[job.source], &p.entries[job.target]);
    let bank = p.bank.as_ref().expect("zero-shot data has a prompt bank");
    let anchors = sample_anchors(
        &src.space,
        &tgt.space,
        &p.candidates(job.source, job.target),
        job.anchors,
        job.seed,
    )?;
    let t = fit_alignment(
        &src.space,
        &tgt.space,
        &anchors,
        job.kind,
        &fit_opts(cfg, job.seed),
    )?;
    let result = zero_shot_unimodal(&src.space.rows(&src.test), &t, bank)?;
    result.metrics(&p.labels.for_rows(&src.space, &src.test)?)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Runs the configured experiment. Individual failures are recorded in the
/// report; only setup errors abort the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let p = Prepared::build(cfg)?;
    let report = pool(cfg.jobs)?.install(|| match cfg.experiment {
        Experiment::AnchorSweep | Experiment::GroupMatrix => run_stitching(cfg, &p),
        Experiment::ZeroShot => run_zero_shot(cfg, &p),
    })?;
    info!(
        "{} '{}': {} runs in {:.2}s",
        cfg.experiment,
        cfg.name,
        report.runs.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(report)
}

fn stitching_pairs(cfg: &ExperimentConfig, p: &Prepared) -> Result<Vec<(usize, usize)>> {
    let n = p.entries.len();
    match cfg.experiment {
        Experiment::GroupMatrix => Ok((0..n).flat_map(|s| (0..n).map(move |t| (s, t))).collect()),
        _ if cfg.pairs.is_empty() => Ok((0..n)
            .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
            .collect()),
        _ => cfg
            .pairs
            .iter()
            .map(|[s, t]| Ok((p.index(s)?, p.index(t)?)))
            .collect(),
    }
}

fn jobs_for(cfg: &ExperimentConfig, pairs: &[(usize, usize)]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &(source, target) in pairs {
        for kind in cfg.methods() {
            for &anchors in &cfg.anchor_counts {
                for &seed in &cfg.seeds {
                    jobs.push(Job {
                        source,
                        target,
                        kind,
                        anchors,
                        seed,
                    });
                }
            }
        }
    }
    jobs
}

fn run_stitching(cfg: &ExperimentConfig, p: &Prepared) -> Result<ExperimentReport> {
    let pairs = stitching_pairs(cfg, p)?;
    let targets: HashSet<usize> = pairs.iter().map(|&(_, t)| t).collect();
    let probes: Vec<Option<LinearProbe>> = (0..p.entries.len())
        .into_par_iter()
        .map(|i| {
            if !targets.contains(&i) {
                return Ok(None);
            }
            let e = &p.entries[i];
            train_probe(&e.space, &p.labels, &e.train, &cfg.probe).map(Some)
        })
        .collect::<Result<_>>()?;
    let baselines: Vec<RunRecord> = (0..p.entries.len())
        .filter_map(|i| probes[i].as_ref().map(|probe| (i, probe)))
        .map(|(i, probe)| {
            let e = &p.entries[i];
            let r = upper_bound_evaluate(&e.space, probe, &p.labels, &e.test)?;
            Ok(baseline_record(e, UPPER_BOUND, (r.auroc, r.accuracy)))
        })
        .collect::<Result<_>>()?;

    let jobs = jobs_for(cfg, &pairs);
    info!(
        "{} stitching runs over {} space pairs",
        jobs.len(),
        pairs.len()
    );
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|job| record(p, job, stitch_job(cfg, p, &probes, job)))
        .collect();

    let distinct: Vec<&RunRecord> = runs
        .iter()
        .filter(|r| r.source_space != r.target_space)
        .collect();
    let cells = aggregate(&distinct, &baselines, UPPER_BOUND);
    let group_rows = if cfg.experiment == Experiment::GroupMatrix {
        group_matrix(p, &runs, &baselines)
    } else {
        Vec::new()
    };
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        experiment: cfg.experiment,
        baselines,
        cells,
        group_rows,
        runs,
    })
}

fn run_zero_shot(cfg: &ExperimentConfig, p: &Prepared) -> Result<ExperimentReport> {
    let text = p.text.expect("validated zero-shot data");
    let bank = p.bank.as_ref().expect("validated zero-shot data");
    let mut baselines = Vec::new();
    if let Some(m) = p.multimodal {
        let e = &p.entries[m];
        let result = zero_shot_multimodal(&e.space.rows(&e.test), bank)?;
        baselines.push(baseline_record(
            e,
            MULTIMODAL,
            result.metrics(&p.labels.for_rows(&e.space, &e.test)?)?,
        ));
    }
    let pairs: Vec<(usize, usize)> = (0..p.entries.len())
        .filter(|&i| i != text && Some(i) != p.multimodal)
        .map(|i| (i, text))
        .collect();
    let jobs = jobs_for(cfg, &pairs);
    info!("{} zero-shot runs", jobs.len());
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|job| record(p, job, zero_shot_job(cfg, p, job)))
        .collect();
    let all: Vec<&RunRecord> = runs.iter().collect();
    // The multimodal baseline classifies into the same text space.
    let reference: Vec<RunRecord> = baselines
        .iter()
        .map(|b| RunRecord {
            target_space: p.entries[text].space.name.clone(),
            ..b.clone()
        })
        .collect();
    let cells = aggregate(&all, &reference, MULTIMODAL);
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        experiment: cfg.experiment,
        baselines,
        cells,
        group_rows: Vec::new(),
        runs,
    })
}

type CellKey = (String, String, String, usize);

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups runs by (source group, target group, method, anchors), keeping
/// first-appearance order.
fn aggregate(
    runs: &[&RunRecord],
    baselines: &[RunRecord],
    reference_method: &str,
) -> Vec<CellSummary> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut members: BTreeMap<CellKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        let key = (
            r.source_group.clone(),
            r.target_group.clone(),
            r.method.clone(),
            r.anchor_count,
        );
        if !members.contains_key(&key) {
            order.push(key.clone());
        }
        members.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &members[&key];
            let ok: Vec<(f64, f64)> = rs.iter().filter_map(|r| r.ok()).collect();
            let targets: Vec<&str> = {
                let mut t: Vec<&str> = rs.iter().map(|r| r.target_space.as_str()).collect();
                t.sort_unstable();
                t.dedup();
                t
            };
            let refs: Vec<&RunRecord> = baselines
                .iter()
                .filter(|b| {
                    b.method == reference_method && targets.contains(&b.target_space.as_str())
                })
                .collect();
            let (source_group, target_group, method, anchor_count) = key;
            CellSummary {
                source_group,
                target_group,
                method,
                anchor_count,
                auroc: summarize(&ok.iter().map(|m| m.0).collect::<Vec<_>>()).ok(),
                accuracy: summarize(&ok.iter().map(|m| m.1).collect::<Vec<_>>()).ok(),
                failed: rs.len() - ok.len(),
                reference_auroc: mean(refs.iter().filter_map(|b| b.auroc)),
                reference_accuracy: mean(refs.iter().filter_map(|b| b.accuracy)),
            }
        })
        .collect()
}

fn group_matrix(p: &Prepared, runs: &[RunRecord], baselines: &[RunRecord]) -> Vec<GroupRow> {
    let mut groups: Vec<&str> = Vec::new();
    for e in &p.entries {
        if !groups.contains(&e.group.as_str()) {
            groups.push(&e.group);
        }
    }
    let ub = |g: &str| {
        mean(
            baselines
                .iter()
                .filter(|b| b.target_group == g)
                .filter_map(|b| b.auroc),
        )
        .unwrap_or(f64::NAN)
    };
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in runs {
        let k = (r.method.clone(), r.anchor_count);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows = Vec::new();
    for &gs in &groups {
        for &gt in &groups {
            for (method, k) in &keys {
                // one value per seed: the mean over the selected space pairs
                let select = |same_space: bool| -> Vec<f64> {
                    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                    for r in runs.iter().filter(|r| {
                        r.source_group == gs
                            && r.target_group == gt
                            && &r.method == method
                            && r.anchor_count == *k
                            && (r.source_space == r.target_space) == same_space
                    }) {
                        if let (Some(seed), Some(a)) = (r.seed, r.auroc) {
                            by_seed.entry(seed).or_default().push(a);
                        }
                    }
                    by_seed.into_values().filter_map(mean).collect()
                };
                let (sub, tub) = (ub(gs), ub(gt));
                let alignment = summarize(&select(false)).ok();
                let self_alignment = summarize(&select(true)).ok();
                let delta =
                    |s: &Option<MetricSummary>| s.as_ref().map(|s| (s.mean - sub) / sub * 100.0);
                rows.push(GroupRow {
                    source_group: gs.to_string(),
                    target_group: gt.to_string(),
                    method: method.clone(),
                    anchor_count: *k,
                    sub,
                    tub,
                    delta_pct: delta(&alignment),
                    self_delta_pct: delta(&self_alignment),
                    alignment,
                    self_alignment,
                });
            }
        }
    }
    rows
}

/// Mean accuracy against log2(anchor count), one polyline per method.
fn sweep_svg(report: &ExperimentReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let points: Vec<(&CellSummary, f64, f64)> = report
        .cells
        .iter()
        .filter_map(|c| {
            c.accuracy
                .as_ref()
                .map(|a| (c, (c.anchor_count as f64).log2(), a.mean))
        })
        .collect();
    let (x_lo, x_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let sx = |x: f64| M + (x - x_lo) / x_span * (W - 2.0 * M);
    let sy = |y: f64| H - M - y * (H - 2.0 * M);

    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (c, x, y) in &points {
        let label = format!("{} {}->{}", c.method, c.source_group, c.target_group);
        match series.iter_mut().find(|s| s.0 == label) {
            Some(s) => s.1.push((*x, *y)),
            None => series.push((label, vec![(*x, *y)])),
        }
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">log2 anchors</text>\n\
         <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">accuracy</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        ly = H - 12.0,
        cy = H / 2.0,
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg += &format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>\n",
            M - 4.0,
            sy(tick) + 4.0
        );
    }
    if let Some(ub) = mean(report.cells.iter().filter_map(|c| c.reference_accuracy)) {
        svg += &format!(
            "<line x1=\"{M}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
            W - M,
            y = sy(ub)
        );
    }
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg += &format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>\n",
            path.join(" "),
            M + 10.0,
            M + 14.0 * i as f64,
        );
    }
    svg + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::GroupDef;

    fn small_sweep() -> ExperimentConfig {
        ExperimentConfig {
            name: "small".into(),
            experiment: Experiment::AnchorSweep,
            data: DataSource::Synthetic(SyntheticConfig {
                n_samples: 400,
                source_dim: 8,
                target_dim: 8,
                ..Default::default()
            }),
            kinds: vec![TransformKind::Ortho, TransformKind::Linear],
            anchor_counts: vec![4, 32],
            seeds: vec![0, 1],
            pairs: Vec::new(),
            train_fraction: 0.75,
            probe: ProbeParams {
                max_epochs: 20,
                ..Default::default()
            },
            affine: AffineFitOptions::default(),
            jobs: 2,
            output: None,
            plot: true,
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = small_sweep();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"type\":\"synthetic\""));
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&json).unwrap(),
            cfg
        );
    }

    #[test]
    fn minimal_json_config_gets_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"name": "x", "experiment": "zero_shot", "anchor_counts": [8], "seeds": [0],
                "data": {"type": "cross_modal", "n_samples": 50, "source_dim": 4, "target_dim": 6,
                         "n_classes": 2, "separation": 3.0, "map": "orthogonal",
                         "noise_sigma": 0.1, "seed": 3}}"#,
        )
        .unwrap();
        assert_eq!(cfg.kinds.len(), 5);
        assert_eq!(cfg.train_fraction, 0.8);
        let DataSource::CrossModal(c) = &cfg.data else {
            panic!()
        };
        assert_eq!(c.prompts_per_class, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = small_sweep();
        cfg.anchor_counts = vec![1];
        assert!(cfg.validate().is_err());
        let mut cfg = small_sweep();
        cfg.experiment = Experiment::ZeroShot;
        assert!(cfg.validate().is_err());
        let mut cfg = small_sweep();
        cfg.train_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_has_every_cell_and_naive_baseline() {
        let cfg = small_sweep();
        let report = run_experiment(&cfg).unwrap();
        // 2 directions x 3 methods x 2 anchor counts x 2 seeds
        assert_eq!(report.runs.len(), 24);
        assert_eq!(report.cells.len(), 12);
        assert_eq!(report.baselines.len(), 2);
        assert!(report
            .cells
            .iter()
            .all(|c| c.failed == 0 && c.auroc.as_ref().unwrap().n_runs == 2));
        assert!(report.cell("source", "target", "naive", 32).is_some());
        let ortho = report.cell("source", "target", "ortho", 32).unwrap();
        assert!(ortho.auroc.as_ref().unwrap().mean > 0.9, "{ortho:?}");
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let mut cfg = small_sweep();
        // more anchors than training rows
        cfg.anchor_counts = vec![4, 1000];
        let report = run_experiment(&cfg).unwrap();
        let failed = report.cell("source", "target", "ortho", 1000).unwrap();
        assert_eq!(failed.failed, 2);
        assert!(failed.auroc.is_none());
        assert!(report
            .runs
            .iter()
            .any(|r| r.error.as_deref().is_some_and(|e| e.contains("anchors"))));
        assert_eq!(
            report.cell("source", "target", "ortho", 4).unwrap().failed,
            0
        );
    }

    #[test]
    fn parallel_and_serial_reports_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_sweep();
        cfg.jobs = 1;
        run_experiment(&cfg)
            .unwrap()
            .write(&dir.path().join("a"), true)
            .unwrap();
        cfg.jobs = 4;
        run_experiment(&cfg)
            .unwrap()
            .write(&dir.path().join("b"), true)
            .unwrap();
        for f in ["report.csv", "report.json", "sweep.svg"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("a/report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 + 24);
        assert!(csv.starts_with(&CSV_HEADER.join(",")));
    }

    #[test]
    fn group_matrix_reports_self_and_distinct_pairs() {
        let cfg = ExperimentConfig {
            experiment: Experiment::GroupMatrix,
            data: DataSource::Groups(GroupConfig {
                n_samples: 400,
                dim: 6,
                groups: vec![
                    GroupDef {
                        name: "a".into(),
                        spaces: 2,
                        noise: 1.0,
                    },
                    GroupDef {
                        name: "b".into(),
                        spaces: 1,
                        noise: 0.2,
                    },
                ],
                ..Default::default()
            }),
            kinds: vec![TransformKind::Ortho],
            anchor_counts: vec![64],
            seeds: vec![0],
            ..small_sweep()
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.runs.len(), 9 * 2);
        let row = |s: &str, t: &str| {
            report
                .group_rows
                .iter()
                .find(|r| r.source_group == s && r.target_group == t && r.method == "ortho")
                .unwrap()
        };
        assert!(row("a", "a").alignment.is_some() && row("a", "a").self_alignment.is_some());
        assert!(row("b", "b").alignment.is_none() && row("b", "b").self_alignment.is_some());
        assert!(row("a", "b").self_alignment.is_none());
        let aa = row("a", "a");
        let expected = (aa.alignment.as_ref().unwrap().mean - aa.sub) / aa.sub * 100.0;
        assert_eq!(aa.delta_pct, Some(expected));
    }

    #[test]
    fn zero_shot_runs_against_multimodal_reference() {
        let cfg = ExperimentConfig {
            experiment: Experiment::ZeroShot,
            data: DataSource::CrossModal(CrossModalConfig {
                pair: SyntheticConfig {
                    n_samples: 400,
                    source_dim: 8,
                    target_dim: 12,
                    distinct_ids: true,
                    ..Default::default()
                },
                prompts_per_class: 10,
                prompt_noise: 0.5,
                multimodal_noise: 0.5,
            }),
            kinds: vec![TransformKind::Ortho],
            anchor_counts: vec![64],
            ..small_sweep()
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.baselines[0].method, MULTIMODAL);
        let cell = report.cell("image", "text", "ortho", 64).unwrap();
        assert!(cell.auroc.as_ref().unwrap().mean > 0.8, "{cell:?}");
        assert_eq!(cell.reference_auroc, report.baselines[0].auroc);
    }
}
