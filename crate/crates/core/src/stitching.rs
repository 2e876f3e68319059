//! Linear-probe decoders and model-stitching evaluation.
//!
//! A probe is a linear SVM (L2-regularized hinge loss, one-vs-rest for more
//! than two classes) trained on the raw embeddings of one space. Stitching
//! scores a source space by translating it into the probe's space first.

use std::fs;
use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax_rows, auroc, macro_auroc};
use crate::store::{check_finite, EmbeddingSpace, LabelSet};
use crate::transform::{translate_rows, AlignmentTransform};
use crate::{npy, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    /// Weight of the summed hinge loss against `0.5 * ||w||^2`.
    pub c_reg: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            c_reg: 1.0,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

/// Linear decoder: `scores = X W^T + 1 b^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `C x d`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub class_names: Vec<String>,
    pub trained_on: String,
    pub params: ProbeParams,
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Trains a probe on `train_rows` of `space`.
pub fn train_probe(
    space: &EmbeddingSpace,
    labels: &LabelSet,
    train_rows: &[usize],
    params: &ProbeParams,
) -> Result<LinearProbe> {
    if params.c_reg.is_nan() || params.c_reg <= 0.0 || params.max_epochs == 0 {
        return Err(Error::invalid(format!(
            "invalid probe parameters {params:?}"
        )));
    }
    let y = labels.for_rows(space, train_rows)?;
    let n_classes = labels.n_classes();
    let mut present = vec![false; n_classes];
    y.iter().for_each(|&c| present[c] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid(
            "probe training data contains a single class",
        ));
    }
    let x = space.rows(train_rows);
    check_finite(&x)?;

    // Train on standardized features, then fold the scaling back into the
    // weights so the probe consumes raw embeddings.
    let standardizer = Standardizer::fit(&x);
    let z = standardizer.apply(&x);

    let d = space.dim();
    let mut weights = DMatrix::zeros(n_classes, d);
    let mut bias = DVector::zeros(n_classes);
    if n_classes == 2 {
        let signs: Vec<f64> = y.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect();
        let (w, b) = standardizer.fold(&pegasos(&z, &signs, params, 1));
        weights.row_mut(0).copy_from(&(-&w).transpose());
        weights.row_mut(1).copy_from(&w.transpose());
        bias[0] = -b;
        bias[1] = b;
    } else {
        for c in 0..n_classes {
            let signs: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let (w, b) = standardizer.fold(&pegasos(&z, &signs, params, c as u64));
            weights.row_mut(c).copy_from(&w.transpose());
            bias[c] = b;
        }
    }
    let probe = LinearProbe {
        weights,
        bias,
        class_names: labels.class_names.clone(),
        trained_on: space.name.clone(),
        params: *params,
    };
    let train_acc = accuracy(&argmax_rows(&probe_scores(&probe, &x)?), &y)?;
    info!(
        "probe on '{}': {} rows, {} classes, training accuracy {train_acc:.4}",
        space.name,
        train_rows.len(),
        n_classes
    );
    Ok(probe)
}

struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardizer {
    fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
        let scale = DVector::from_iterator(
            x.ncols(),
            x.column_iter().zip(mean.iter()).map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            }),
        );
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        z
    }

    /// Maps `[w; b]` over standardized features to raw-feature weights and bias.
    fn fold(&self, augmented: &DVector<f64>) -> (DVector<f64>, f64) {
        let d = self.mean.len();
        let w = augmented.rows(0, d).component_div(&self.scale);
        let b = augmented[d] - w.dot(&self.mean);
        (w, b)
    }
}

/// Pegasos stochastic subgradient descent on
/// `lambda/2 ||w||^2 + mean(max(0, 1 - y <w, [x, 1]>))` with
/// `lambda = 1 / (c_reg * n)`, returning the iterate averaged over the
/// second half of training.
fn pegasos(z: &DMatrix<f64>, y: &[f64], params: &ProbeParams, stream: u64) -> DVector<f64> {
    let (n, d) = (z.nrows(), z.ncols());
    let dim = d + 1;
    let lambda = 1.0 / (params.c_reg * n as f64);
    let radius = 1.0 / lambda.sqrt();
    // row-major copy with the bias feature appended
    let rows: Vec<f64> = (0..n)
        .flat_map(|i| {
            z.row(i)
                .iter()
                .copied()
                .chain(std::iter::once(1.0))
                .collect::<Vec<_>>()
        })
        .collect();

    // w = scale * v keeps the shrink step O(1)
    let mut v = vec![0.0; dim];
    let mut scale = 1.0;
    let mut norm_sq = 0.0;
    let mut avg = vec![0.0; dim];
    let mut averaged = 0u64;
    let average_from = (params.max_epochs / 2) as u64 * n as u64;

    let mut rng = seeded_rng(params.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    let mut t: u64 = 0;
    for _ in 0..params.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = &rows[i * dim..(i + 1) * dim];
            let margin = y[i] * scale * dot(&v, x);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|e| *e = 0.0);
                scale = 1.0;
                norm_sq = 0.0;
            } else {
                scale *= shrink;
                norm_sq *= shrink * shrink;
            }
            if margin < 1.0 {
                let step = eta * y[i] / scale;
                // ||w + eta y x||^2 = ||w||^2 + 2 eta y <w, x> + eta^2 ||x||^2
                norm_sq += 2.0 * eta * y[i] * scale * dot(&v, x) + eta * eta * dot(x, x);
                v.iter_mut().zip(x).for_each(|(e, xi)| *e += step * xi);
            }
            if norm_sq > radius * radius {
                let shrink = radius / norm_sq.sqrt();
                scale *= shrink;
                norm_sq = radius * radius;
            }
            if scale < 1e-100 {
                v.iter_mut().for_each(|e| *e *= scale);
                scale = 1.0;
            }
            if t > average_from {
                averaged += 1;
                avg.iter_mut().zip(&v).for_each(|(a, e)| *a += scale * e);
            }
        }
    }
    let k = averaged.max(1) as f64;
    DVector::from_iterator(dim, avg.into_iter().map(|a| a / k))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw decision values `X W^T + b`, one column per class.
pub fn probe_scores(probe: &LinearProbe, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != probe.dim() {
        return Err(Error::DimensionMismatch {
            expected: probe.dim(),
            found: x.ncols(),
        });
    }
    let mut scores = x * probe.weights.transpose();
    for mut row in scores.row_iter_mut() {
        row += probe.bias.transpose();
    }
    Ok(scores)
}

/// AUROC and accuracy of a score matrix. Binary tasks rank by the
/// positive-class (index 1) column; more classes use macro one-vs-rest.
pub fn score_metrics(scores: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    let acc = accuracy(&argmax_rows(scores), labels)?;
    let auc = if scores.ncols() == 2 {
        let positive: Vec<f64> = scores.column(1).iter().copied().collect();
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auroc(&positive, &is_pos)?
    } else {
        macro_auroc(scores, labels)?
    };
    Ok((auc, acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchReport {
    pub source_space: String,
    pub target_space: String,
    /// Transform kind, or `upper_bound` for direct evaluation.
    pub method: String,
    pub anchor_count: usize,
    pub seed: Option<u64>,
    pub auroc: f64,
    pub accuracy: f64,
}

pub const UPPER_BOUND: &str = "upper_bound";

/// Encodes with `source`, translates through `t`, decodes with `probe`.
pub fn stitch_evaluate(
    source: &EmbeddingSpace,
    t: &AlignmentTransform,
    probe: &LinearProbe,
    labels: &LabelSet,
    test_rows: &[usize],
) -> Result<StitchReport> {
    if probe.trained_on != t.target_space {
        return Err(Error::invalid(format!(
            "probe was trained on '{}' but the transform maps into '{}'",
            probe.trained_on, t.target_space
        )));
    }
    if t.source_space != source.name {
        return Err(Error::invalid(format!(
            "transform maps from '{}', not '{}'",
            t.source_space, source.name
        )));
    }
    let y = labels.for_rows(source, test_rows)?;
    let translated = translate_rows(t, &source.rows(test_rows))?;
    let (auroc, accuracy) = score_metrics(&probe_scores(probe, &translated)?, &y)?;
    Ok(StitchReport {
        source_space: source.name.clone(),
        target_space: t.target_space.clone(),
        method: t.kind.to_string(),
        anchor_count: t.fit_info.anchor_count,
        seed: t.fit_info.seed,
        auroc,
        accuracy,
    })
}

/// Direct evaluation of a probe on its own space.
pub fn upper_bound_evaluate(
    space: &EmbeddingSpace,
    probe: &LinearProbe,
    labels: &LabelSet,
    test_rows: &[usize],
) -> Result<StitchReport> {
    if probe.trained_on != space.name {
        return Err(Error::invalid(format!(
            "probe was trained on '{}', not '{}'",
            probe.trained_on, space.name
        )));
    }
    let y = labels.for_rows(space, test_rows)?;
    let (auroc, accuracy) = score_metrics(&probe_scores(probe, &space.rows(test_rows))?, &y)?;
    Ok(StitchReport {
        source_space: space.name.clone(),
        target_space: space.name.clone(),
        method: UPPER_BOUND.into(),
        anchor_count: 0,
        seed: None,
        auroc,
        accuracy,
    })
}

const PROBE_FORMAT: &str = "latent-align/probe";
const PROBE_HEADER: &str = "probe.json";

#[derive(Debug, Serialize, Deserialize)]
struct ProbeHeader {
    format: String,
    version: u32,
    trained_on: String,
    class_names: Vec<String>,
    dim: usize,
    params: ProbeParams,
    weights: String,
    bias: String,
}

impl LinearProbe {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = ProbeHeader {
            format: PROBE_FORMAT.into(),
            version: 1,
            trained_on: self.trained_on.clone(),
            class_names: self.class_names.clone(),
            dim: self.dim(),
            params: self.params,
            weights: "weights.npy".into(),
            bias: "bias.npy".into(),
        };
        npy::write_matrix(&dir.join(&header.weights), &self.weights)?;
        npy::write_matrix(
            &dir.join(&header.bias),
            &DMatrix::from_row_slice(1, self.bias.len(), self.bias.as_slice()),
        )?;
        let path = dir.join(PROBE_HEADER);
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PROBE_HEADER);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: ProbeHeader =
            serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        if header.format != PROBE_FORMAT || header.version != 1 {
            return Err(Error::parse(
                &path,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let c = header.class_names.len();
        let weights = npy::read_matrix(&dir.join(&header.weights))?;
        let bias = npy::read_matrix(&dir.join(&header.bias))?;
        if weights.shape() != (c, header.dim) || bias.shape() != (1, c) {
            return Err(Error::invalid(format!(
                "probe payload shapes {:?}/{:?} do not match {c} classes of dim {}",
                weights.shape(),
                bias.shape(),
                header.dim
            )));
        }
        Ok(LinearProbe {
            weights,
            bias: bias.row(0).transpose(),
            class_names: header.class_names,
            trained_on: header.trained_on,
            params: header.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Gaussian clusters around `n_classes` random centers of norm `sep`.
    fn clusters(
        n: usize,
        d: usize,
        n_classes: usize,
        sep: f64,
        seed: u64,
    ) -> (EmbeddingSpace, LabelSet) {
        let mut rng = seeded_rng(seed);
        let centers: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| {
                let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.iter().map(|v| v / norm * sep).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        let data = DMatrix::from_fn(n, d, |r, c| {
            centers[labels[r]][c]
                + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let space = EmbeddingSpace::with_positional_ids("s", data).unwrap();
        let names = (0..n_classes).map(|c| format!("c{c}")).collect();
        let set = LabelSet::new(space.sample_ids.clone(), labels, names).unwrap();
        (space, set)
    }

    fn quick() -> ProbeParams {
        ProbeParams {
            max_epochs: 50,
            ..Default::default()
        }
    }

    #[test]
    fn separable_clusters_are_fit_perfectly() {
        let (space, labels) = clusters(200, 8, 2, 20.0, 1);
        let rows: Vec<usize> = (0..200).collect();
        let probe = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let y = labels.for_rows(&space, &rows).unwrap();
        let pred = argmax_rows(&probe_scores(&probe, &space.data).unwrap());
        assert_eq!(accuracy(&pred, &y).unwrap(), 1.0);
        let report = upper_bound_evaluate(&space, &probe, &labels, &rows).unwrap();
        assert_eq!(report.auroc, 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let (space, labels) = clusters(1000, 8, 2, 3.0, 2);
        let mut shuffled = labels.clone();
        shuffled.labels.shuffle(&mut seeded_rng(99));
        let train: Vec<usize> = (0..600).collect();
        let test: Vec<usize> = (600..1000).collect();
        let probe = train_probe(&space, &shuffled, &train, &quick()).unwrap();
        let report = upper_bound_evaluate(&space, &probe, &shuffled, &test).unwrap();
        assert!((report.accuracy - 0.5).abs() < 0.1, "{report:?}");
        assert!((report.auroc - 0.5).abs() < 0.1, "{report:?}");
    }

    #[test]
    fn six_class_one_vs_rest() {
        let (space, labels) = clusters(600, 16, 6, 8.0, 3);
        let rows: Vec<usize> = (0..600).collect();
        let probe = train_probe(&space, &labels, &rows, &quick()).unwrap();
        assert_eq!(probe.weights.shape(), (6, 16));
        let y = labels.for_rows(&space, &rows).unwrap();
        let acc = accuracy(
            &argmax_rows(&probe_scores(&probe, &space.data).unwrap()),
            &y,
        )
        .unwrap();
        assert!(acc > 0.95, "training accuracy {acc}");
    }

    #[test]
    fn single_class_and_non_finite_rejected() {
        let (space, labels) = clusters(20, 2, 2, 3.0, 4);
        let class0: Vec<usize> = (0..20).step_by(2).collect();
        assert!(train_probe(&space, &labels, &class0, &quick()).is_err());
        let mut bad = space.clone();
        bad.data[(0, 0)] = f64::INFINITY;
        let rows: Vec<usize> = (0..20).collect();
        assert!(train_probe(&bad, &labels, &rows, &quick()).is_err());
    }

    #[test]
    fn bias_only_probe_predicts_class_zero() {
        let probe = LinearProbe {
            weights: DMatrix::zeros(2, 3),
            bias: DVector::from_vec(vec![1.0, 0.0]),
            class_names: vec!["a".into(), "b".into()],
            trained_on: "s".into(),
            params: ProbeParams::default(),
        };
        let x = DMatrix::from_fn(5, 3, |r, c| (r + c) as f64);
        assert_eq!(argmax_rows(&probe_scores(&probe, &x).unwrap()), vec![0; 5]);
        assert!(probe_scores(&probe, &DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn positive_rescaling_keeps_predictions() {
        let (space, labels) = clusters(300, 6, 3, 4.0, 5);
        let rows: Vec<usize> = (0..300).collect();
        let probe = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let scaled = LinearProbe {
            weights: &probe.weights * 3.5,
            bias: &probe.bias * 3.5,
            ..probe.clone()
        };
        assert_eq!(
            argmax_rows(&probe_scores(&probe, &space.data).unwrap()),
            argmax_rows(&probe_scores(&scaled, &space.data).unwrap())
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (space, labels) = clusters(200, 4, 2, 2.0, 6);
        let rows: Vec<usize> = (0..200).collect();
        let a = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let b = train_probe(&space, &labels, &rows, &quick()).unwrap();
        assert_eq!(a, b);
        let c = train_probe(&space, &labels, &rows, &ProbeParams { seed: 1, ..quick() }).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn feature_permutation_permutes_weights() {
        let (space, labels) = clusters(400, 6, 2, 2.5, 7);
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = EmbeddingSpace::new(
            "s",
            DMatrix::from_fn(400, 6, |r, c| space.data[(r, perm[c])]),
            space.sample_ids.clone(),
        )
        .unwrap();
        let rows: Vec<usize> = (0..400).collect();
        let a = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let b = train_probe(&permuted, &labels, &rows, &quick()).unwrap();
        for (c, &p) in perm.iter().enumerate() {
            assert!((a.weights[(1, p)] - b.weights[(1, c)]).abs() < 1e-9);
        }
        assert_eq!(
            argmax_rows(&probe_scores(&a, &space.data).unwrap()),
            argmax_rows(&probe_scores(&b, &permuted.data).unwrap())
        );
    }

    #[test]
    fn identity_stitching_equals_upper_bound() {
        let (space, labels) = clusters(300, 5, 2, 2.0, 8);
        let rows: Vec<usize> = (0..300).collect();
        let probe = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let mut t = AlignmentTransform::identity(5);
        t.source_space = "s".into();
        t.target_space = "s".into();
        let stitched = stitch_evaluate(&space, &t, &probe, &labels, &rows).unwrap();
        let direct = upper_bound_evaluate(&space, &probe, &labels, &rows).unwrap();
        assert_eq!(stitched.auroc, direct.auroc);
        assert_eq!(stitched.accuracy, direct.accuracy);
    }

    #[test]
    fn mismatched_spaces_are_rejected() {
        let (space, labels) = clusters(50, 3, 2, 2.0, 9);
        let rows: Vec<usize> = (0..50).collect();
        let probe = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let mut t = AlignmentTransform::identity(3);
        t.source_space = "s".into();
        t.target_space = "other".into();
        assert!(stitch_evaluate(&space, &t, &probe, &labels, &rows).is_err());
        let other = EmbeddingSpace {
            name: "other".into(),
            ..space.clone()
        };
        assert!(upper_bound_evaluate(&other, &probe, &labels, &rows).is_err());
    }

    #[test]
    fn probe_round_trips_through_directory() {
        let (space, labels) = clusters(60, 3, 3, 3.0, 10);
        let rows: Vec<usize> = (0..60).collect();
        let probe = train_probe(&space, &labels, &rows, &quick()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        probe.save(dir.path()).unwrap();
        assert_eq!(LinearProbe::load(dir.path()).unwrap(), probe);
    }
}
