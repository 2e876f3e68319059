//! Zero-shot classification by cosine similarity to class prompt embeddings.
//!
//! The unimodal variant first translates image embeddings into the text
//! space with a cross-modal `AlignmentTransform`; the multimodal baseline
//! assumes image and text embeddings already share a space.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax_rows, auroc, macro_auroc};
use crate::npy;
use crate::store::check_finite;
use crate::transform::{translate_rows, AlignmentTransform};

const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptBank {
    pub class_names: Vec<String>,
    /// Per class, `P x d` prompt embeddings.
    pub prompt_embeddings: Vec<DMatrix<f64>>,
    /// `C x d`, unit rows.
    pub class_embedding: DMatrix<f64>,
}

impl ClassPromptBank {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.class_embedding.ncols()
    }

    /// Reorders classes to follow `names`.
    pub fn reorder(&self, names: &[String]) -> Result<Self> {
        let order = names
            .iter()
            .map(|n| {
                self.class_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::invalid(format!("prompt bank has no class '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if order.len() != self.n_classes() {
            return Err(Error::invalid(format!(
                "prompt bank has {} classes, labels have {}",
                self.n_classes(),
                order.len()
            )));
        }
        Ok(ClassPromptBank {
            class_names: names.to_vec(),
            prompt_embeddings: order
                .iter()
                .map(|&i| self.prompt_embeddings[i].clone())
                .collect(),
            class_embedding: self.class_embedding.select_rows(&order),
        })
    }
}

fn normalize_rows(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm.is_nan() || norm <= MIN_NORM {
            return Err(Error::invalid(format!("{what} row {i} has zero norm")));
        }
        row /= norm;
    }
    Ok(out)
}

/// Class embedding = normalized mean of the class's normalized prompts.
pub fn build_prompt_bank(
    class_names: Vec<String>,
    prompts: Vec<DMatrix<f64>>,
) -> Result<ClassPromptBank> {
    if class_names.len() != prompts.len() {
        return Err(Error::invalid(format!(
            "{} class names for {} prompt sets",
            class_names.len(),
            prompts.len()
        )));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("prompt bank needs at least one class"));
    }
    let d = prompts[0].ncols();
    let mut class_embedding = DMatrix::zeros(prompts.len(), d);
    for (c, p) in prompts.iter().enumerate() {
        if p.nrows() == 0 {
            return Err(Error::invalid(format!(
                "class '{}' has no prompts",
                class_names[c]
            )));
        }
        if p.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.ncols(),
            });
        }
        check_finite(p)?;
        let unit = normalize_rows(p, &format!("prompt of class '{}'", class_names[c]))?;
        let mean = unit.row_mean();
        let norm = mean.norm();
        if norm.is_nan() || norm <= 1e-9 {
            return Err(Error::invalid(format!(
                "degenerate class embedding for '{}': prompts cancel out",
                class_names[c]
            )));
        }
        class_embedding.row_mut(c).copy_from(&(mean / norm));
    }
    Ok(ClassPromptBank {
        class_names,
        prompt_embeddings: prompts,
        class_embedding,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    /// `N x C` cosine similarities.
    pub scores: DMatrix<f64>,
    pub predictions: Vec<usize>,
}

impl ZeroShotResult {
    /// AUROC and accuracy against `labels` (indices into the bank's classes).
    ///
    /// Two classes are ranked by `score(1) - score(0)`; more use macro
    /// one-vs-rest over the similarity columns.
    pub fn metrics(&self, labels: &[usize]) -> Result<(f64, f64)> {
        let acc = accuracy(&self.predictions, labels)?;
        let auc = if self.scores.ncols() == 2 {
            let margin: Vec<f64> = self.scores.row_iter().map(|r| r[1] - r[0]).collect();
            let is_pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            auroc(&margin, &is_pos)?
        } else {
            macro_auroc(&self.scores, labels)?
        };
        Ok((auc, acc))
    }
}

fn cosine_scores(embeddings: &DMatrix<f64>, bank: &ClassPromptBank) -> Result<ZeroShotResult> {
    if embeddings.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: embeddings.ncols(),
        });
    }
    let unit = normalize_rows(embeddings, "image embedding")?;
    let scores = (unit * bank.class_embedding.transpose()).map(|v| v.clamp(-1.0, 1.0));
    let predictions = argmax_rows(&scores);
    Ok(ZeroShotResult {
        scores,
        predictions,
    })
}

/// Translates image embeddings into the text space, then scores by cosine.
pub fn zero_shot_unimodal(
    images: &DMatrix<f64>,
    t: &AlignmentTransform,
    bank: &ClassPromptBank,
) -> Result<ZeroShotResult> {
    if t.target_dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            found: t.target_dim(),
        });
    }
    cosine_scores(&translate_rows(t, images)?, bank)
}

/// Standard zero-shot classification for encoders with a shared image/text space.
pub fn zero_shot_multimodal(
    images: &DMatrix<f64>,
    bank: &ClassPromptBank,
) -> Result<ZeroShotResult> {
    cosine_scores(images, bank)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptClassEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<PromptRole>,
    /// NPY file with one prompt embedding per row, relative to the index.
    pub file: PathBuf,
}

/// JSON listing of a prompt bank's classes and their embedding files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBankIndex {
    pub classes: Vec<PromptClassEntry>,
}

/// Loads a prompt bank from its JSON index. Binary banks with roles are
/// ordered negative first, positive second.
pub fn load_prompt_bank(path: &Path) -> Result<ClassPromptBank> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut index: PromptBankIndex =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if index.classes.len() == 2 && index.classes.iter().all(|c| c.role.is_some()) {
        index
            .classes
            .sort_by_key(|c| c.role != Some(PromptRole::Negative));
        if index.classes[0].role == index.classes[1].role {
            return Err(Error::parse(
                path,
                "binary bank needs one positive and one negative class",
            ));
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let prompts = index
        .classes
        .iter()
        .map(|c| npy::read_matrix(&base.join(&c.file)))
        .collect::<Result<Vec<_>>>()?;
    build_prompt_bank(index.classes.into_iter().map(|c| c.name).collect(), prompts)
}

/// Writes one NPY per class plus `prompts.json` into `dir`.
pub fn save_prompt_bank(
    bank: &ClassPromptBank,
    roles: Option<[PromptRole; 2]>,
    dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = Vec::with_capacity(bank.n_classes());
    for (c, (name, prompts)) in bank
        .class_names
        .iter()
        .zip(&bank.prompt_embeddings)
        .enumerate()
    {
        let file = PathBuf::from(format!("class_{c}.npy"));
        npy::write_matrix(&dir.join(&file), prompts)?;
        classes.push(PromptClassEntry {
            name: name.clone(),
            role: roles.filter(|_| bank.n_classes() == 2).map(|r| r[c]),
            file,
        });
    }
    let path = dir.join("prompts.json");
    let json =
        serde_json::to_string_pretty(&PromptBankIndex { classes }).expect("index serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    fn two_axis_bank() -> ClassPromptBank {
        build_prompt_bank(
            vec!["a".into(), "b".into()],
            vec![row(&[2.0, 0.0, 0.0]), row(&[0.0, 0.5, 0.0])],
        )
        .unwrap()
    }

    #[test]
    fn single_prompt_is_normalized() {
        let bank = two_axis_bank();
        assert_eq!(
            bank.class_embedding,
            DMatrix::from_row_slice(2, 3, &[1., 0., 0., 0., 1., 0.])
        );
    }

    #[test]
    fn antipodal_prompts_are_degenerate() {
        let err = build_prompt_bank(
            vec!["a".into()],
            vec![DMatrix::from_row_slice(2, 2, &[1., 1., -1., -1.])],
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("degenerate class embedding"),
            "{err}"
        );
    }

    #[test]
    fn bank_input_errors() {
        assert!(build_prompt_bank(vec!["a".into()], vec![DMatrix::zeros(0, 3)]).is_err());
        assert!(build_prompt_bank(vec!["a".into()], vec![row(&[0., 0.])]).is_err());
        assert!(build_prompt_bank(
            vec!["a".into(), "b".into()],
            vec![row(&[1., 0.]), row(&[1., 0., 0.])]
        )
        .is_err());
    }

    #[test]
    fn spherical_mean_stays_near_direction() {
        let mut rng = seeded_rng(5);
        let d = 32;
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let vn = DMatrix::from_row_slice(1, d, &v).normalize();
        let mut prompts = DMatrix::zeros(10, d);
        for i in 0..10 {
            loop {
                let noise = DMatrix::from_fn(1, d, |_, _| {
                    0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                });
                let p = &vn + noise;
                if (p.dot(&vn) / p.norm()) > 0.9 {
                    prompts.row_mut(i).copy_from(&p);
                    break;
                }
            }
        }
        let bank = build_prompt_bank(vec!["v".into()], vec![prompts]).unwrap();
        assert!(bank.class_embedding.row(0).dot(&vn.row(0)) > 0.9);
    }

    #[test]
    fn exact_match_and_orthogonal_decomposition() {
        let bank = two_axis_bank();
        let r = zero_shot_multimodal(&row(&[3.0, 0.0, 0.0]), &bank).unwrap();
        assert_eq!(r.scores[(0, 0)], 1.0);
        assert_eq!(r.predictions, vec![0]);

        let r = zero_shot_multimodal(&row(&[0.6, 0.8, 0.0]), &bank).unwrap();
        assert!((r.scores[(0, 0)] - 0.6).abs() < 1e-15 && (r.scores[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(r.predictions, vec![1]);
    }

    #[test]
    fn orthogonal_embedding_ties_to_first_class() {
        let r = zero_shot_multimodal(&row(&[0.0, 0.0, 4.0]), &two_axis_bank()).unwrap();
        assert_eq!(r.scores, DMatrix::zeros(1, 2));
        assert_eq!(r.predictions, vec![0]);
    }

    #[test]
    fn zero_norm_and_dimension_errors() {
        let bank = two_axis_bank();
        assert!(zero_shot_multimodal(&row(&[0.0, 0.0, 0.0]), &bank).is_err());
        assert!(zero_shot_multimodal(&row(&[1.0, 0.0]), &bank).is_err());
        assert!(
            zero_shot_unimodal(&row(&[1.0, 0.0]), &AlignmentTransform::identity(2), &bank).is_err()
        );
    }

    #[test]
    fn identity_transform_reduces_to_multimodal() {
        let mut rng = seeded_rng(3);
        let images = DMatrix::from_fn(20, 3, |_, _| StandardNormal.sample(&mut rng));
        let bank = two_axis_bank();
        let uni = zero_shot_unimodal(&images, &AlignmentTransform::identity(3), &bank).unwrap();
        let multi = zero_shot_multimodal(&images, &bank).unwrap();
        assert!((uni.scores - multi.scores).amax() < 1e-9);
        assert_eq!(uni.predictions, multi.predictions);
    }

    #[test]
    fn binary_auroc_uses_margin() {
        let result = ZeroShotResult {
            scores: DMatrix::from_row_slice(3, 2, &[0.9, 0.8, 0.1, 0.3, 0.5, 0.45]),
            predictions: vec![0, 1, 0],
        };
        // margins: -0.1, 0.2, -0.05 ; positives are rows 1 and 2
        let (auc, acc) = result.metrics(&[0, 1, 1]).unwrap();
        assert_eq!(auc, 1.0);
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bank_round_trips_with_roles() {
        let bank = two_axis_bank();
        let dir = tempfile::tempdir().unwrap();
        // "a" is declared positive, so loading puts "b" (negative) first
        let path = save_prompt_bank(
            &bank,
            Some([PromptRole::Positive, PromptRole::Negative]),
            dir.path(),
        )
        .unwrap();
        let loaded = load_prompt_bank(&path).unwrap();
        assert_eq!(loaded.class_names, vec!["b", "a"]);
        assert_eq!(loaded.reorder(&bank.class_names).unwrap(), bank);
        assert!(bank.reorder(&["a".into(), "zz".into()]).is_err());
    }

    proptest! {
        #[test]
        fn scores_are_scale_invariant_and_follow_class_permutation(
            seed in any::<u64>(),
            alpha in 0.01f64..100.0,
        ) {
            let mut rng = seeded_rng(seed);
            let mut gauss = |r, c| DMatrix::from_fn(r, c, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            let prompts = vec![gauss(3, 5), gauss(2, 5), gauss(4, 5)];
            let images = gauss(6, 5);
            let names: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
            let bank = build_prompt_bank(names.clone(), prompts).unwrap();
            let base = zero_shot_multimodal(&images, &bank).unwrap();
            let scaled = zero_shot_multimodal(&(&images * alpha), &bank).unwrap();
            prop_assert!((&base.scores - &scaled.scores).amax() < 1e-12);

            let perm = vec!["z".to_string(), "x".to_string(), "y".to_string()];
            let permuted = zero_shot_multimodal(&images, &bank.reorder(&perm).unwrap()).unwrap();
            let idx = [2usize, 0, 1];
            for (new_c, &old_c) in idx.iter().enumerate() {
                prop_assert_eq!(permuted.scores.column(new_c), base.scores.column(old_c));
            }
            for (p, b) in permuted.predictions.iter().zip(&base.predictions) {
                prop_assert_eq!(idx[*p], *b);
            }
        }
    }
}
