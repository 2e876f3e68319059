//! Estimation and application of anchor-fitted alignment transforms.
//!
//! All estimators take padded and standardized anchor matrices `ax`, `ay`
//! (`K x D`, rows in correspondence order) and return a map applied on the
//! right: `ax * R (+ 1 b^T) ~= ay`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::preprocess::{
    apply_scaler, fit_scaler, invert_scaler, truncate, zero_pad, Padding, ScalerStats,
};
use crate::store::{check_finite, AnchorSet, EmbeddingSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TransformKind {
    Affine,
    Linear,
    LOrtho,
    Ortho,
    /// No estimated map: identity between the padded, scaled spaces.
    Naive,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Affine,
        TransformKind::Linear,
        TransformKind::LOrtho,
        TransformKind::Ortho,
        TransformKind::Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::Linear => "linear",
            TransformKind::LOrtho => "l-ortho",
            TransformKind::Ortho => "ortho",
            TransformKind::Naive => "naive",
        }
    }

    pub fn is_orthogonal(self) -> bool {
        matches!(self, TransformKind::LOrtho | TransformKind::Ortho)
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown transform kind '{s}' (expected affine, linear, l-ortho, ortho or naive)"
                ))
            })
    }
}

impl From<TransformKind> for String {
    fn from(k: TransformKind) -> String {
        k.name().to_string()
    }
}

impl TryFrom<String> for TransformKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

const SVD_MAX_ITERATIONS: usize = 10_000;

fn svd(m: &DMatrix<f64>) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    SVD::try_new(m.clone(), true, true, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))
}

fn check_anchor_pair(ax: &DMatrix<f64>, ay: &DMatrix<f64>) -> Result<()> {
    if ax.nrows() == 0 {
        return Err(Error::invalid("no anchor rows"));
    }
    if ax.shape() != ay.shape() {
        return Err(Error::invalid(format!(
            "anchor matrices differ in shape: {:?} vs {:?}",
            ax.shape(),
            ay.shape()
        )));
    }
    check_finite(ax)?;
    check_finite(ay)
}

/// `||ax * r + 1 b^T - ay||_F^2`
pub fn objective(
    ax: &DMatrix<f64>,
    ay: &DMatrix<f64>,
    r: &DMatrix<f64>,
    b: Option<&DVector<f64>>,
) -> f64 {
    residual(ax, ay, r, b).norm_squared()
}

fn residual(
    ax: &DMatrix<f64>,
    ay: &DMatrix<f64>,
    r: &DMatrix<f64>,
    b: Option<&DVector<f64>>,
) -> DMatrix<f64> {
    let mut e = ax * r - ay;
    if let Some(b) = b {
        for mut row in e.row_iter_mut() {
            row += b.transpose();
        }
    }
    e
}

/// Minimum-norm least-squares solution of `ax * R = ay`.
pub fn estimate_linear(ax: &DMatrix<f64>, ay: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_anchor_pair(ax, ay)?;
    let decomposition = svd(ax)?;
    let sigma_max = decomposition.singular_values.max();
    let cutoff = sigma_max * f64::EPSILON * ax.nrows().max(ax.ncols()) as f64;
    decomposition
        .solve(ay, cutoff)
        .map_err(|e| Error::Numerical(e.to_string()))
}

/// Orthogonal polar factor `U V^T` of `m = U S V^T`.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let decomposition = svd(m)?;
    let u = decomposition.u.expect("u requested");
    let v_t = decomposition.v_t.expect("v_t requested");
    Ok(u * v_t)
}

/// The least-squares map with its singular values replaced by ones.
pub fn estimate_l_ortho(ax: &DMatrix<f64>, ay: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    polar_factor(&estimate_linear(ax, ay)?)
}

/// Orthogonal Procrustes: the orthogonal `R` minimizing `||ax R - ay||_F`.
/// Reflections are allowed.
pub fn estimate_ortho(ax: &DMatrix<f64>, ay: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_anchor_pair(ax, ay)?;
    polar_factor(&(ax.transpose() * ay))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineInit {
    FromLinear,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineFitOptions {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub init: AffineInit,
}

impl Default for AffineFitOptions {
    fn default() -> Self {
        AffineFitOptions {
            max_steps: 2000,
            learning_rate: 1e-2,
            tolerance: 1e-7,
            init: AffineInit::FromLinear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AffineFit {
    pub rotation: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub objective: f64,
    pub steps: usize,
}

/// Gradient descent on `||ax R + 1 b^T - ay||_F^2` with the gradient divided
/// by the anchor count. Returns the best iterate seen.
pub fn estimate_affine(
    ax: &DMatrix<f64>,
    ay: &DMatrix<f64>,
    opts: &AffineFitOptions,
) -> Result<AffineFit> {
    check_anchor_pair(ax, ay)?;
    if ax.nrows() < 2 {
        return Err(Error::invalid("affine fit needs at least 2 anchors"));
    }
    if opts.max_steps == 0
        || opts.learning_rate.is_nan()
        || opts.learning_rate <= 0.0
        || opts.tolerance.is_nan()
        || opts.tolerance <= 0.0
    {
        return Err(Error::invalid(format!(
            "invalid affine fit options {opts:?}"
        )));
    }
    let (k, d) = (ax.nrows(), ax.ncols());
    let mut r = match opts.init {
        AffineInit::FromLinear => estimate_linear(ax, ay)?,
        AffineInit::Identity => DMatrix::identity(d, d),
    };
    let mut b = DVector::zeros(d);
    let ax_t = ax.transpose();
    let step = 2.0 * opts.learning_rate / k as f64;

    let mut e = residual(ax, ay, &r, Some(&b));
    let mut current = e.norm_squared();
    if !current.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut best = (r.clone(), b.clone(), current);
    let mut steps = 0;
    while steps < opts.max_steps && current > 0.0 {
        steps += 1;
        let grad_r = &ax_t * &e;
        let grad_b = e.row_sum().transpose();
        r -= grad_r * step;
        b -= grad_b * step;
        e = residual(ax, ay, &r, Some(&b));
        let next = e.norm_squared();
        if !next.is_finite() {
            return Err(Error::Diverged { step: steps });
        }
        let decrease = (current - next) / current;
        current = next;
        if current < best.2 {
            best = (r.clone(), b.clone(), current);
        }
        if (0.0..opts.tolerance).contains(&decrease) {
            break;
        }
    }
    debug!("affine fit: {steps} steps, objective {}", best.2);
    Ok(AffineFit {
        rotation: best.0,
        bias: best.1,
        objective: best.2,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub anchor_count: usize,
    pub seed: Option<u64>,
    /// Training objective `||ax R + 1 b^T - ay||_F^2` in the scaled space.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub affine: AffineFitOptions,
    /// Recorded in `FitInfo`; the seed that drew the anchors.
    pub seed: Option<u64>,
}

/// A fitted translation from a source space into a target space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTransform {
    pub kind: TransformKind,
    pub source_space: String,
    pub target_space: String,
    pub source_pad: Padding,
    pub target_pad: Padding,
    pub source_scaler: ScalerStats,
    pub target_scaler: ScalerStats,
    pub rotation: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub fit_info: FitInfo,
}

impl AlignmentTransform {
    /// Naive transform with unit scalers between two spaces of the same
    /// dimension: maps every row to itself.
    pub fn identity(dim: usize) -> Self {
        let pad = Padding {
            original_dim: dim,
            padded_dim: dim,
        };
        AlignmentTransform {
            kind: TransformKind::Naive,
            source_space: String::new(),
            target_space: String::new(),
            source_pad: pad,
            target_pad: pad,
            source_scaler: ScalerStats::identity(dim),
            target_scaler: ScalerStats::identity(dim),
            rotation: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
            fit_info: FitInfo {
                anchor_count: 0,
                seed: None,
                objective: 0.0,
            },
        }
    }

    pub fn padded_dim(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn source_dim(&self) -> usize {
        self.source_pad.original_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_pad.original_dim
    }

    /// `max |R^T R - I|`
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.rotation)
    }

    /// Pads and standardizes source rows.
    pub fn to_scaled_source(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.source_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.source_dim(),
                found: x.ncols(),
            });
        }
        apply_scaler(&self.source_scaler, &zero_pad(x, self.padded_dim())?)
    }

    /// Applies `R` and `b` to rows that are already in the scaled, padded source space.
    pub fn map_scaled(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z * &self.rotation;
        if self.kind == TransformKind::Affine {
            for mut row in out.row_iter_mut() {
                row += self.bias.transpose();
            }
        }
        out
    }
}

pub fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    let gram = r.transpose() * r;
    let n = gram.nrows();
    (gram - DMatrix::<f64>::identity(n, n)).amax()
}

/// Pads, scales and fits the requested kind of map on the anchor rows.
pub fn fit_alignment(
    source: &EmbeddingSpace,
    target: &EmbeddingSpace,
    anchors: &AnchorSet,
    kind: TransformKind,
    opts: &FitOptions,
) -> Result<AlignmentTransform> {
    anchors.validate(source, target)?;
    if anchors.len() < 2 {
        return Err(Error::invalid("alignment needs at least 2 anchors"));
    }
    let padded = source.dim().max(target.dim());
    let ax = zero_pad(&source.rows(&anchors.source_rows()), padded)?;
    let ay = zero_pad(&target.rows(&anchors.target_rows()), padded)?;
    let source_scaler = fit_scaler(&ax)?;
    let target_scaler = fit_scaler(&ay)?;
    let ax = apply_scaler(&source_scaler, &ax)?;
    let ay = apply_scaler(&target_scaler, &ay)?;

    let mut bias = DVector::zeros(padded);
    let rotation = match kind {
        TransformKind::Linear => estimate_linear(&ax, &ay)?,
        TransformKind::LOrtho => estimate_l_ortho(&ax, &ay)?,
        TransformKind::Ortho => estimate_ortho(&ax, &ay)?,
        TransformKind::Naive => DMatrix::identity(padded, padded),
        TransformKind::Affine => {
            let fit = estimate_affine(&ax, &ay, &opts.affine)?;
            bias = fit.bias;
            fit.rotation
        }
    };
    let objective = objective(&ax, &ay, &rotation, Some(&bias));
    debug!(
        "fit {kind} {} -> {}: K={}, D={padded}, objective {objective}",
        source.name,
        target.name,
        anchors.len()
    );
    Ok(AlignmentTransform {
        kind,
        source_space: source.name.clone(),
        target_space: target.name.clone(),
        source_pad: Padding::new(source.dim(), padded)?,
        target_pad: Padding::new(target.dim(), padded)?,
        source_scaler,
        target_scaler,
        rotation,
        bias,
        fit_info: FitInfo {
            anchor_count: anchors.len(),
            seed: opts.seed,
            objective,
        },
    })
}

/// pad -> source scale -> `x R + b` -> target de-normalization -> truncate.
pub fn translate_rows(t: &AlignmentTransform, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mapped = t.map_scaled(&t.to_scaled_source(x)?);
    let raw = invert_scaler(&t.target_scaler, &mapped)?;
    Ok(truncate(raw, t.target_dim()))
}

const TRANSFORM_FORMAT: &str = "latent-align/transform";
const TRANSFORM_HEADER: &str = "transform.json";

#[derive(Debug, Serialize, Deserialize)]
struct TransformHeader {
    format: String,
    version: u32,
    kind: TransformKind,
    source_space: String,
    target_space: String,
    source_dim: usize,
    target_dim: usize,
    padded_dim: usize,
    epsilon: f64,
    fit_info: FitInfo,
    files: TransformFiles,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformFiles {
    rotation: String,
    bias: String,
    source_scaler: String,
    target_scaler: String,
}

fn scaler_matrix(s: &ScalerStats) -> DMatrix<f64> {
    DMatrix::from_rows(&[s.mean.transpose(), s.std.transpose()])
}

fn scaler_from_matrix(
    m: &DMatrix<f64>,
    dim: usize,
    epsilon: f64,
    what: &str,
) -> Result<ScalerStats> {
    if m.shape() != (2, dim) {
        return Err(Error::invalid(format!(
            "{what} must be 2x{dim}, found {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(ScalerStats {
        mean: m.row(0).transpose(),
        std: m.row(1).transpose(),
        epsilon,
    })
}

impl AlignmentTransform {
    /// Writes `transform.json` plus NPY payloads into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = TransformFiles {
            rotation: "rotation.npy".into(),
            bias: "bias.npy".into(),
            source_scaler: "source_scaler.npy".into(),
            target_scaler: "target_scaler.npy".into(),
        };
        npy::write_matrix(&dir.join(&files.rotation), &self.rotation)?;
        npy::write_matrix(
            &dir.join(&files.bias),
            &DMatrix::from_row_slice(1, self.bias.len(), self.bias.as_slice()),
        )?;
        npy::write_matrix(
            &dir.join(&files.source_scaler),
            &scaler_matrix(&self.source_scaler),
        )?;
        npy::write_matrix(
            &dir.join(&files.target_scaler),
            &scaler_matrix(&self.target_scaler),
        )?;
        let header = TransformHeader {
            format: TRANSFORM_FORMAT.into(),
            version: 1,
            kind: self.kind,
            source_space: self.source_space.clone(),
            target_space: self.target_space.clone(),
            source_dim: self.source_dim(),
            target_dim: self.target_dim(),
            padded_dim: self.padded_dim(),
            epsilon: self.source_scaler.epsilon,
            fit_info: self.fit_info,
            files,
        };
        let path = dir.join(TRANSFORM_HEADER);
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TRANSFORM_HEADER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: TransformHeader =
            serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        if header.format != TRANSFORM_FORMAT || header.version != 1 {
            return Err(Error::parse(
                &path,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let d = header.padded_dim;
        let rotation = npy::read_matrix(&dir.join(&header.files.rotation))?;
        if rotation.shape() != (d, d) {
            return Err(Error::invalid(format!("rotation must be {d}x{d}")));
        }
        let bias = npy::read_matrix(&dir.join(&header.files.bias))?;
        if bias.shape() != (1, d) {
            return Err(Error::invalid(format!("bias must be 1x{d}")));
        }
        let eps = header.epsilon;
        let source_scaler = scaler_from_matrix(
            &npy::read_matrix(&dir.join(&header.files.source_scaler))?,
            d,
            eps,
            "source scaler",
        )?;
        let target_scaler = scaler_from_matrix(
            &npy::read_matrix(&dir.join(&header.files.target_scaler))?,
            d,
            eps,
            "target scaler",
        )?;
        Ok(AlignmentTransform {
            kind: header.kind,
            source_space: header.source_space,
            target_space: header.target_space,
            source_pad: Padding::new(header.source_dim, d)?,
            target_pad: Padding::new(header.target_dim, d)?,
            source_scaler,
            target_scaler,
            rotation,
            bias: bias.row(0).transpose(),
            fit_info: header.fit_info,
        })
    }
}
