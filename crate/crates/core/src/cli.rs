//! Command-line interface.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::harness::{
    format_metric, run_experiment, write_csv, ExperimentConfig, RunRecord, MULTIMODAL,
};
use crate::npy;
use crate::stitching::{stitch_evaluate, train_probe, LinearProbe, ProbeParams};
use crate::store::{
    load_correspondence, load_labels, load_space, read_ids, sample_anchors, save_correspondence,
    save_labels, save_space, AnchorSet, Correspondence, DatasetManifest, EmbeddingSpace, LabelSet,
    Split,
};
use crate::synthetic::{
    gen_multimodal_view, gen_prompt_bank, gen_synthetic, PlantedMap, SyntheticConfig, SyntheticPair,
};
use crate::transform::{
    fit_alignment, translate_rows, AffineFitOptions, AffineInit, AlignmentTransform, FitOptions,
    TransformKind,
};
use crate::zeroshot::{
    load_prompt_bank, save_prompt_bank, zero_shot_multimodal, zero_shot_unimodal, PromptRole,
};

pub const LOG_ENV: &str = "LATENT_ALIGN_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "latent-align",
    version,
    about = "Align embedding spaces from paired anchors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (spaces, labels, correspondence, manifest).
    GenSynthetic(GenSyntheticArgs),
    /// Fit an alignment transform between two spaces.
    Fit(FitArgs),
    /// Map embeddings through a fitted transform.
    Translate(TranslateArgs),
    /// Train a linear probe on one space.
    TrainProbe(TrainProbeArgs),
    /// Evaluate a probe on translated source embeddings.
    StitchEval(StitchEvalArgs),
    /// Classify image embeddings against a prompt bank.
    ZeroShot(ZeroShotArgs),
    /// Run an experiment described by a JSON config.
    Sweep(SweepArgs),
    /// Print metadata of an NPY file, transform or probe directory.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 64)]
    pub source_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub target_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, value_enum, default_value = "orthogonal")]
    pub map: MapArg,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Give target rows their own ids, paired through the correspondence file.
    #[arg(long)]
    pub distinct_ids: bool,
    /// Also write a prompt bank and a multimodal image space.
    #[arg(long)]
    pub prompts: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MapArg {
    Orthogonal,
    Affine,
    RandomNonlinear,
}

impl From<MapArg> for PlantedMap {
    fn from(m: MapArg) -> Self {
        match m {
            MapArg::Orthogonal => PlantedMap::Orthogonal,
            MapArg::Affine => PlantedMap::Affine,
            MapArg::RandomNonlinear => PlantedMap::RandomNonlinear,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Use every pair of this correspondence CSV as an anchor.
    #[arg(long, conflicts_with_all = ["anchor_count", "correspondence"])]
    pub anchors: Option<PathBuf>,
    /// Sample this many anchors from the correspondence (requires --seed).
    #[arg(long, requires = "seed")]
    pub anchor_count: Option<usize>,
    /// Candidate pairs for sampling; defaults to ids shared by both spaces.
    #[arg(long)]
    pub correspondence: Option<PathBuf>,
    /// Restrict sampling to these source ids (one per line).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "ortho")]
    pub kind: TransformKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the anchors used as `anchors.csv` in the output directory.
    #[arg(long)]
    pub save_anchors: bool,
    #[arg(long, default_value_t = AffineFitOptions::default().max_steps)]
    pub affine_steps: usize,
    #[arg(long, default_value_t = AffineFitOptions::default().learning_rate)]
    pub affine_lr: f64,
    #[arg(long, default_value_t = AffineFitOptions::default().tolerance)]
    pub affine_tol: f64,
    /// Start affine descent from the identity instead of the least-squares map.
    #[arg(long)]
    pub affine_from_identity: bool,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training sample ids (one per line); defaults to every labeled row.
    #[arg(long)]
    pub train_ids: Option<PathBuf>,
    #[arg(long, default_value_t = ProbeParams::default().c_reg)]
    pub c: f64,
    #[arg(long, default_value_t = ProbeParams::default().max_epochs)]
    pub epochs: usize,
}

#[derive(Debug, Args)]
pub struct StitchEvalArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Test sample ids (one per line); defaults to every labeled row.
    #[arg(long)]
    pub test_ids: Option<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Prompt bank index (`prompts.json`).
    #[arg(long)]
    pub prompts: PathBuf,
    /// Image-to-text transform; without it the images must already live in the text space.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub test_ids: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's worker count.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Exit code for an error: 2 for bad data, 3 for numerical failure.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::TrainProbe(a) => train_probe_cmd(a),
        Command::StitchEval(a) => stitch_eval_cmd(a),
        Command::ZeroShot(a) => zero_shot_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_synthetic_cmd(a: GenSyntheticArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_samples: a.n_samples,
        source_dim: a.source_dim,
        target_dim: a.target_dim,
        n_classes: a.classes,
        separation: a.separation,
        map: a.map.into(),
        noise_sigma: a.noise,
        seed: a.seed,
        distinct_ids: a.distinct_ids,
    };
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(Error::invalid(
            "--train-fraction must lie strictly between 0 and 1",
        ));
    }
    let pair = gen_synthetic(&cfg)?;
    create_dir(&a.out)?;
    let path = |f: &str| a.out.join(f);
    save_space(&pair.source, &path("source.npy"))?;
    save_space(&pair.target, &path("target.npy"))?;
    let labels = if a.distinct_ids {
        LabelSet::new(
            pair.source
                .sample_ids
                .iter()
                .chain(&pair.target.sample_ids)
                .cloned()
                .collect(),
            pair.labels
                .labels
                .iter()
                .chain(&pair.labels.labels)
                .copied()
                .collect(),
            pair.labels.class_names.clone(),
        )?
    } else {
        pair.labels.clone()
    };
    save_labels(&labels, &path("labels.csv"))?;
    save_correspondence(&pair.correspondence, &path("correspondence.csv"))?;

    let n_train = (a.n_samples as f64 * a.train_fraction).floor() as usize;
    let split = Split {
        train: (0..n_train).collect(),
        test: (n_train..a.n_samples).collect(),
    };
    let mut manifest = DatasetManifest {
        spaces: BTreeMap::from([
            ("source".to_string(), path("source.npy")),
            ("target".to_string(), path("target.npy")),
        ]),
        labels: BTreeMap::from([("task".to_string(), path("labels.csv"))]),
        anchors: Some(path("correspondence.csv")),
        split: BTreeMap::from([
            ("source".to_string(), split.clone()),
            ("target".to_string(), split.clone()),
        ]),
        groups: BTreeMap::new(),
        prompts: None,
    };
    write_ids_file(&path("train_ids.txt"), &pair, &split.train, a.distinct_ids)?;
    write_ids_file(&path("test_ids.txt"), &pair, &split.test, a.distinct_ids)?;
    if a.prompts {
        let bank = gen_prompt_bank(&pair, 10, 0.5, a.seed.wrapping_add(1))?;
        let roles = (a.classes == 2).then_some([PromptRole::Negative, PromptRole::Positive]);
        let index = save_prompt_bank(&bank, roles, &path("prompts"))?;
        let mm = gen_multimodal_view(&pair, 0.5, a.seed.wrapping_add(2))?;
        save_space(&mm, &path("multimodal.npy"))?;
        manifest
            .spaces
            .insert(MULTIMODAL.into(), path("multimodal.npy"));
        manifest.split.insert(MULTIMODAL.into(), split);
        manifest.prompts = Some(index);
    }
    manifest.save(&path("manifest.json"))?;
    println!("wrote synthetic dataset to {}", a.out.display());
    Ok(())
}

fn write_ids_file(path: &Path, pair: &SyntheticPair, rows: &[usize], both: bool) -> Result<()> {
    let mut ids: Vec<String> = rows
        .iter()
        .map(|&r| pair.source.sample_ids[r].clone())
        .collect();
    if both {
        ids.extend(rows.iter().map(|&r| pair.target.sample_ids[r].clone()));
    }
    crate::store::write_ids(path, &ids)
}

/// Rows of `space` named in an id list. Lists may cover several spaces, so
/// ids from other spaces are skipped; a list matching nothing is an error.
fn rows_for_ids(space: &EmbeddingSpace, ids_path: &Path) -> Result<Vec<usize>> {
    let index = space.id_index();
    let rows: Vec<usize> = read_ids(ids_path)?
        .iter()
        .filter_map(|id| index.get(id.as_str()).copied())
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "no id from {} belongs to space '{}'",
            ids_path.display(),
            space.name
        )));
    }
    Ok(rows)
}

fn select_rows(
    space: &EmbeddingSpace,
    labels: &LabelSet,
    ids: Option<&Path>,
) -> Result<Vec<usize>> {
    match ids {
        Some(p) => rows_for_ids(space, p),
        None => Ok(labels.labeled_rows(space)),
    }
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let source = load_space(&a.source)?;
    let target = load_space(&a.target)?;
    let anchors = if let Some(path) = &a.anchors {
        AnchorSet::from_correspondence(&source, &target, &load_correspondence(path)?)?
    } else {
        let k = a
            .anchor_count
            .ok_or_else(|| Error::invalid("give either --anchors or --anchor-count"))?;
        let seed = a.seed.expect("clap enforces --seed with --anchor-count");
        let mut corr = match &a.correspondence {
            Some(p) => load_correspondence(p)?,
            None => Correspondence::shared_ids(&source, &target),
        };
        if let Some(pool) = &a.pool {
            let ids = read_ids(pool)?;
            corr = corr.restrict_source(&ids.iter().map(String::as_str).collect::<HashSet<_>>());
        }
        sample_anchors(&source, &target, &corr, k, seed)?
    };
    let opts = FitOptions {
        affine: AffineFitOptions {
            max_steps: a.affine_steps,
            learning_rate: a.affine_lr,
            tolerance: a.affine_tol,
            init: if a.affine_from_identity {
                AffineInit::Identity
            } else {
                AffineInit::FromLinear
            },
        },
        seed: a.seed,
    };
    let t = fit_alignment(&source, &target, &anchors, a.kind, &opts)?;
    t.save(&a.out)?;
    if a.save_anchors {
        save_correspondence(
            &anchors.to_correspondence(&source, &target),
            &a.out.join("anchors.csv"),
        )?;
    }
    println!(
        "fitted {} {} -> {} on {} anchors: objective {}",
        t.kind,
        t.source_space,
        t.target_space,
        anchors.len(),
        format_metric(t.fit_info.objective)
    );
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let t = AlignmentTransform::load(&a.transform)?;
    let input = load_space(&a.input)?;
    let out = EmbeddingSpace::new(
        t.target_space.clone(),
        translate_rows(&t, &input.data)?,
        input.sample_ids,
    )?;
    save_space(&out, &a.out)?;
    info!("translated {} rows into {}", out.len(), a.out.display());
    Ok(())
}

fn train_probe_cmd(a: TrainProbeArgs) -> Result<()> {
    let space = load_space(&a.space)?;
    let labels = load_labels(&a.labels)?;
    let rows = select_rows(&space, &labels, a.train_ids.as_deref())?;
    let params = ProbeParams {
        c_reg: a.c,
        max_epochs: a.epochs,
        seed: a.seed,
    };
    let probe = train_probe(&space, &labels, &rows, &params)?;
    probe.save(&a.out)?;
    println!(
        "trained probe on {} ({} rows, {} classes)",
        space.name,
        rows.len(),
        probe.n_classes()
    );
    Ok(())
}

fn print_metrics(record: &RunRecord) {
    println!(
        "auroc={} accuracy={}",
        format_metric(record.auroc.unwrap_or(f64::NAN)),
        format_metric(record.accuracy.unwrap_or(f64::NAN))
    );
}

fn stitch_eval_cmd(a: StitchEvalArgs) -> Result<()> {
    let source = load_space(&a.source)?;
    let t = AlignmentTransform::load(&a.transform)?;
    let probe = LinearProbe::load(&a.probe)?;
    let labels = load_labels(&a.labels)?;
    let rows = select_rows(&source, &labels, a.test_ids.as_deref())?;
    let r = stitch_evaluate(&source, &t, &probe, &labels, &rows)?;
    let record = RunRecord {
        source_space: r.source_space.clone(),
        source_group: r.source_space,
        target_space: r.target_space.clone(),
        target_group: r.target_space,
        method: r.method,
        anchor_count: r.anchor_count,
        seed: r.seed,
        auroc: Some(r.auroc),
        accuracy: Some(r.accuracy),
        error: None,
    };
    if let Some(out) = &a.out {
        write_csv(out, "stitch_eval", std::slice::from_ref(&record))?;
    }
    print_metrics(&record);
    Ok(())
}

fn zero_shot_cmd(a: ZeroShotArgs) -> Result<()> {
    let images = load_space(&a.images)?;
    let labels = load_labels(&a.labels)?;
    let bank = load_prompt_bank(&a.prompts)?.reorder(&labels.class_names)?;
    let rows = select_rows(&images, &labels, a.test_ids.as_deref())?;
    let x = images.rows(&rows);
    let (result, method, target, anchors, seed) = match &a.transform {
        Some(dir) => {
            let t = AlignmentTransform::load(dir)?;
            if t.source_space != images.name {
                return Err(Error::invalid(format!(
                    "transform maps from '{}', not '{}'",
                    t.source_space, images.name
                )));
            }
            let r = zero_shot_unimodal(&x, &t, &bank)?;
            (
                r,
                t.kind.to_string(),
                t.target_space.clone(),
                t.fit_info.anchor_count,
                t.fit_info.seed,
            )
        }
        None => (
            zero_shot_multimodal(&x, &bank)?,
            MULTIMODAL.to_string(),
            images.name.clone(),
            0,
            None,
        ),
    };
    let (auroc, accuracy) = result.metrics(&labels.for_rows(&images, &rows)?)?;
    let record = RunRecord {
        source_space: images.name.clone(),
        source_group: images.name.clone(),
        target_space: target.clone(),
        target_group: target,
        method,
        anchor_count: anchors,
        seed,
        auroc: Some(auroc),
        accuracy: Some(accuracy),
        error: None,
    };
    if let Some(out) = &a.out {
        write_csv(out, "zero_shot", std::slice::from_ref(&record))?;
    }
    print_metrics(&record);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    let out = a.out.or_else(|| cfg.output.clone()).ok_or_else(|| {
        Error::invalid("no output directory: pass --out or set \"output\" in the config")
    })?;
    let report = run_experiment(&cfg)?;
    report.write(&out, cfg.plot)?;
    println!(
        "{:<12} {:<12} {:<8} {:>7} {:>9} {:>9} {:>9} {:>6}",
        "source", "target", "method", "anchors", "auroc", "std", "accuracy", "failed"
    );
    for c in &report.cells {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:<12} {:<8} {:>7} {:>9} {:>9} {:>9} {:>6}",
            c.source_group,
            c.target_group,
            c.method,
            c.anchor_count,
            fmt(c.auroc.as_ref().map(|s| s.mean)),
            fmt(c.auroc.as_ref().map(|s| s.std)),
            fmt(c.accuracy.as_ref().map(|s| s.mean)),
            c.failed
        );
    }
    for b in &report.baselines {
        println!(
            "{} {}: auroc {:.4} accuracy {:.4}",
            b.method,
            b.target_space,
            b.auroc.unwrap_or(f64::NAN),
            b.accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let p = &a.path;
    if p.is_dir() && p.join("transform.json").exists() {
        let t = AlignmentTransform::load(p)?;
        let d = t.padded_dim();
        let identity = t.rotation == nalgebra::DMatrix::identity(d, d);
        println!("transform {} -> {}", t.source_space, t.target_space);
        println!("kind: {}", t.kind);
        println!(
            "dims: source {}, target {}, padded {d}",
            t.source_dim(),
            t.target_dim()
        );
        println!("anchors: {}", t.fit_info.anchor_count);
        match t.fit_info.seed {
            Some(s) => println!("seed: {s}"),
            None => println!("seed: none"),
        }
        println!("objective: {}", format_metric(t.fit_info.objective));
        println!("orthogonality error: {:e}", t.orthogonality_error());
        println!(
            "rotation: {}",
            if identity { "identity" } else { "general" }
        );
        println!(
            "bias: {}",
            if t.bias.iter().all(|&v| v == 0.0) {
                "zero".to_string()
            } else {
                format!("norm {}", t.bias.norm())
            }
        );
        Ok(())
    } else if p.is_dir() && p.join("probe.json").exists() {
        let probe = LinearProbe::load(p)?;
        println!("probe trained on {}", probe.trained_on);
        println!("classes: {}", probe.class_names.join(", "));
        println!("dim: {}", probe.dim());
        println!(
            "params: c={} epochs={} seed={}",
            probe.params.c_reg, probe.params.max_epochs, probe.params.seed
        );
        Ok(())
    } else if p.extension().is_some_and(|e| e == "npy") {
        let m = npy::read_matrix(p)?;
        println!("{}: {} x {}", p.display(), m.nrows(), m.ncols());
        if !m.is_empty() {
            let finite = m.iter().all(|v| v.is_finite());
            println!("min {} max {} finite {finite}", m.min(), m.max());
        }
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} is not an .npy file, transform directory or probe directory",
            p.display()
        )))
    }
}
