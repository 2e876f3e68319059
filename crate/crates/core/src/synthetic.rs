//! Desk-scale synthetic latent spaces with planted correspondences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::zero_pad;
use crate::seeded_rng;
use crate::store::{Correspondence, EmbeddingSpace, LabelSet};
use crate::zeroshot::{build_prompt_bank, ClassPromptBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedMap {
    Orthogonal,
    Affine,
    RandomNonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub source_dim: usize,
    /// Target columns beyond `source_dim` are zero-padded before noise is added.
    pub target_dim: usize,
    pub n_classes: usize,
    /// Norm of the class centers.
    pub separation: f64,
    pub map: PlantedMap,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Give target rows their own ids (`t_i`) and pair them explicitly, as
    /// for image/report pairs.
    #[serde(default)]
    pub distinct_ids: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 5000,
            source_dim: 64,
            target_dim: 64,
            n_classes: 2,
            separation: 3.0,
            map: PlantedMap::Orthogonal,
            noise_sigma: 0.05,
            seed: 0,
            distinct_ids: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.source_dim == 0 || self.n_classes < 2 {
            return Err(Error::invalid(
                "synthetic config needs n_samples >= 1, source_dim >= 1 and n_classes >= 2",
            ));
        }
        if self.target_dim < self.source_dim {
            return Err(Error::invalid(format!(
                "target_dim {} is smaller than source_dim {}",
                self.target_dim, self.source_dim
            )));
        }
        if self.separation.is_nan()
            || self.separation < 0.0
            || self.noise_sigma.is_nan()
            || self.noise_sigma < 0.0
        {
            return Err(Error::invalid(
                "separation and noise_sigma must be non-negative",
            ));
        }
        Ok(())
    }
}

/// A generated source/target pair plus the ground truth used to build it.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: EmbeddingSpace,
    pub target: EmbeddingSpace,
    pub labels: LabelSet,
    pub correspondence: Correspondence,
    /// `C x d_source`
    pub source_centers: DMatrix<f64>,
    /// Class centers pushed through the planted map (no noise), `C x d_target`.
    pub target_centers: DMatrix<f64>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// Haar-distributed orthogonal matrix (sign-corrected QR of a Gaussian matrix).
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let qr = gaussian(rng, d, d).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn class_centers(
    rng: &mut impl Rng,
    n_classes: usize,
    dim: usize,
    separation: f64,
) -> DMatrix<f64> {
    let mut centers = gaussian(rng, n_classes, dim);
    for mut row in centers.row_iter_mut() {
        let norm = row.norm();
        row *= separation / norm;
    }
    centers
}

/// Balanced labels `i mod C` and Gaussian clusters around the class centers.
fn clusters(rng: &mut impl Rng, centers: &DMatrix<f64>, n: usize) -> (Vec<usize>, DMatrix<f64>) {
    let c = centers.nrows();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut x = gaussian(rng, n, centers.ncols());
    for (i, mut row) in x.row_iter_mut().enumerate() {
        row += centers.row(labels[i]);
    }
    (labels, x)
}

fn add_noise(rng: &mut impl Rng, m: &mut DMatrix<f64>, sigma: f64) {
    if sigma > 0.0 {
        m.iter_mut().for_each(|v| {
            *v += sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng)
        });
    }
}

struct Planted {
    linear: DMatrix<f64>,
    offset: Option<DVector<f64>>,
    inner: Option<DMatrix<f64>>,
}

impl Planted {
    fn draw(rng: &mut impl Rng, map: PlantedMap, d: usize) -> Self {
        match map {
            PlantedMap::Orthogonal => Planted {
                linear: random_orthogonal(rng, d),
                offset: None,
                inner: None,
            },
            PlantedMap::Affine => Planted {
                linear: gaussian(rng, d, d) / (d as f64).sqrt(),
                offset: Some(DVector::from_fn(d, |_, _| StandardNormal.sample(&mut *rng))),
                inner: None,
            },
            PlantedMap::RandomNonlinear => {
                let inner = gaussian(rng, d, d) / (d as f64).sqrt();
                Planted {
                    linear: random_orthogonal(rng, d),
                    offset: None,
                    inner: Some(inner),
                }
            }
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let base = match &self.inner {
            Some(a) => (x * a).map(f64::tanh),
            None => x.clone(),
        };
        let mut y = base * &self.linear;
        if let Some(b) = &self.offset {
            for mut row in y.row_iter_mut() {
                row += b.transpose();
            }
        }
        y
    }
}

fn class_names(n: usize) -> Vec<String> {
    if n == 2 {
        vec!["negative".into(), "positive".into()]
    } else {
        (0..n).map(|c| format!("class_{c}")).collect()
    }
}

pub(crate) fn sample_ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Source = Gaussian class clusters; target = planted map of the source,
/// zero-padded to `target_dim`, plus isotropic noise.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticPair> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let d = cfg.source_dim;
    let centers = class_centers(&mut rng, cfg.n_classes, d, cfg.separation);
    let (labels, x) = clusters(&mut rng, &centers, cfg.n_samples);
    let planted = Planted::draw(&mut rng, cfg.map, d);
    let mut y = zero_pad(&planted.apply(&x), cfg.target_dim)?;
    add_noise(&mut rng, &mut y, cfg.noise_sigma);
    let target_centers = zero_pad(&planted.apply(&centers), cfg.target_dim)?;

    let source_ids = sample_ids("s", cfg.n_samples);
    let target_ids = if cfg.distinct_ids {
        sample_ids("t", cfg.n_samples)
    } else {
        source_ids.clone()
    };
    let correspondence = Correspondence {
        pairs: source_ids
            .iter()
            .cloned()
            .zip(target_ids.iter().cloned())
            .collect(),
    };
    let labels = LabelSet::new(source_ids.clone(), labels, class_names(cfg.n_classes))?;
    Ok(SyntheticPair {
        source: EmbeddingSpace::new("source", x, source_ids)?,
        target: EmbeddingSpace::new("target", y, target_ids)?,
        labels,
        correspondence,
        source_centers: centers,
        target_centers,
    })
}

impl SyntheticPair {
    /// Labels keyed by target ids (identical to `labels` unless ids are distinct).
    pub fn target_labels(&self) -> LabelSet {
        LabelSet {
            sample_ids: self.target.sample_ids.clone(),
            ..self.labels.clone()
        }
    }
}

/// Text-space prompts scattered around the planted class centers.
pub fn gen_prompt_bank(
    pair: &SyntheticPair,
    prompts_per_class: usize,
    prompt_noise: f64,
    seed: u64,
) -> Result<ClassPromptBank> {
    if prompts_per_class == 0 {
        return Err(Error::invalid("prompts_per_class must be at least 1"));
    }
    let mut rng = seeded_rng(seed);
    let prompts = pair
        .target_centers
        .row_iter()
        .map(|center| {
            let mut p = DMatrix::from_fn(prompts_per_class, center.len(), |_, j| center[j]);
            add_noise(&mut rng, &mut p, prompt_noise);
            p
        })
        .collect();
    build_prompt_bank(pair.labels.class_names.clone(), prompts)
}

/// A space that embeds images directly into the target (text) space, as a
/// multimodal encoder would: the target rows plus extra isotropic noise.
pub fn gen_multimodal_view(
    pair: &SyntheticPair,
    noise_sigma: f64,
    seed: u64,
) -> Result<EmbeddingSpace> {
    let mut rng = seeded_rng(seed);
    let mut data = pair.target.data.clone();
    add_noise(&mut rng, &mut data, noise_sigma);
    EmbeddingSpace::new("multimodal", data, pair.source.sample_ids.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDef {
    pub name: String,
    pub spaces: usize,
    /// Per-space isotropic noise added to the shared latent before rotation.
    pub noise: f64,
}

/// Several spaces per domain group, all views of one shared latent sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub n_samples: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub separation: f64,
    pub seed: u64,
    pub groups: Vec<GroupDef>,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            n_samples: 5000,
            dim: 64,
            n_classes: 2,
            separation: 2.0,
            seed: 0,
            groups: vec![
                GroupDef {
                    name: "general".into(),
                    spaces: 2,
                    noise: 1.5,
                },
                GroupDef {
                    name: "medical".into(),
                    spaces: 2,
                    noise: 0.3,
                },
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGroups {
    /// `(space, group name)`, spaces named `<group>_<i>`.
    pub spaces: Vec<(EmbeddingSpace, String)>,
    pub labels: LabelSet,
}

/// Each space is `(z + noise_g * eta) Q_s` for a shared latent `z` of class
/// clusters, an independent noise draw `eta`, and a random rotation `Q_s`.
pub fn gen_groups(cfg: &GroupConfig) -> Result<SyntheticGroups> {
    if cfg.n_samples == 0 || cfg.dim == 0 || cfg.n_classes < 2 || cfg.groups.is_empty() {
        return Err(Error::invalid(
            "group config needs samples, a dimension, 2+ classes and 1+ group",
        ));
    }
    if cfg
        .groups
        .iter()
        .any(|g| g.spaces == 0 || g.noise.is_nan() || g.noise < 0.0)
    {
        return Err(Error::invalid(
            "every group needs at least one space and non-negative noise",
        ));
    }
    let mut rng = seeded_rng(cfg.seed);
    let centers = class_centers(&mut rng, cfg.n_classes, cfg.dim, cfg.separation);
    let (labels, z) = clusters(&mut rng, &centers, cfg.n_samples);
    let ids = sample_ids("s", cfg.n_samples);
    let mut spaces = Vec::new();
    for group in &cfg.groups {
        for i in 0..group.spaces {
            let mut view = z.clone();
            add_noise(&mut rng, &mut view, group.noise);
            let q = random_orthogonal(&mut rng, cfg.dim);
            let space = EmbeddingSpace::new(format!("{}_{i}", group.name), view * q, ids.clone())?;
            spaces.push((space, group.name.clone()));
        }
    }
    Ok(SyntheticGroups {
        spaces,
        labels: LabelSet::new(ids, labels, class_names(cfg.n_classes))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stitching::{train_probe, upper_bound_evaluate, ProbeParams};
    use crate::transform::estimate_ortho;

    fn small(map: PlantedMap, sigma: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: 400,
            source_dim: 8,
            target_dim: 8,
            map,
            noise_sigma: sigma,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for map in [
            PlantedMap::Orthogonal,
            PlantedMap::Affine,
            PlantedMap::RandomNonlinear,
        ] {
            let a = gen_synthetic(&small(map, 0.1)).unwrap();
            let b = gen_synthetic(&small(map, 0.1)).unwrap();
            assert_eq!(a.source, b.source);
            assert_eq!(a.target, b.target);
            assert_eq!(a.labels, b.labels);
        }
        let c = gen_synthetic(&SyntheticConfig {
            seed: 8,
            ..small(PlantedMap::Orthogonal, 0.1)
        })
        .unwrap();
        assert_ne!(
            c.source.data,
            gen_synthetic(&small(PlantedMap::Orthogonal, 0.1))
                .unwrap()
                .source
                .data
        );
    }

    #[test]
    fn noiseless_orthogonal_map_is_recovered_from_d_anchors() {
        let cfg = small(PlantedMap::Orthogonal, 0.0);
        let pair = gen_synthetic(&cfg).unwrap();
        let anchors: Vec<usize> = (0..cfg.source_dim).collect();
        let r = estimate_ortho(&pair.source.rows(&anchors), &pair.target.rows(&anchors)).unwrap();
        let held_out: Vec<usize> = (100..400).collect();
        let err = (pair.source.rows(&held_out) * r - pair.target.rows(&held_out)).amax();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn padding_and_distinct_ids() {
        let cfg = SyntheticConfig {
            target_dim: 12,
            distinct_ids: true,
            ..small(PlantedMap::Affine, 0.0)
        };
        let pair = gen_synthetic(&cfg).unwrap();
        assert_eq!(pair.target.dim(), 12);
        assert!(pair.target.data.columns(8, 4).iter().all(|&v| v == 0.0));
        assert_eq!(
            pair.correspondence.pairs[3],
            ("s003".to_string(), "t003".to_string())
        );
        assert_eq!(
            pair.target_labels().for_rows(&pair.target, &[5]).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = small(PlantedMap::Orthogonal, 0.0);
        for bad in [
            SyntheticConfig {
                n_classes: 1,
                ..base.clone()
            },
            SyntheticConfig {
                target_dim: 4,
                ..base.clone()
            },
            SyntheticConfig {
                noise_sigma: -1.0,
                ..base.clone()
            },
            SyntheticConfig {
                n_samples: 0,
                ..base.clone()
            },
        ] {
            assert!(gen_synthetic(&bad).is_err());
        }
    }

    #[test]
    fn zero_separation_gives_chance_probes() {
        let cfg = SyntheticConfig {
            n_samples: 2000,
            separation: 0.0,
            ..small(PlantedMap::Orthogonal, 0.0)
        };
        let pair = gen_synthetic(&cfg).unwrap();
        let train: Vec<usize> = (0..1500).collect();
        let test: Vec<usize> = (1500..2000).collect();
        let params = ProbeParams {
            max_epochs: 30,
            ..Default::default()
        };
        let probe = train_probe(&pair.source, &pair.labels, &train, &params).unwrap();
        let report = upper_bound_evaluate(&pair.source, &probe, &pair.labels, &test).unwrap();
        assert!((report.accuracy - 0.5).abs() < 0.1, "{report:?}");
    }

    #[test]
    fn prompt_bank_points_at_mapped_centers() {
        let pair = gen_synthetic(&small(PlantedMap::Orthogonal, 0.05)).unwrap();
        let bank = gen_prompt_bank(&pair, 10, 0.1, 1).unwrap();
        for c in 0..2 {
            let center = pair.target_centers.row(c).normalize();
            assert!(bank.class_embedding.row(c).dot(&center) > 0.95);
        }
    }

    #[test]
    fn groups_share_labels_and_ids() {
        let cfg = GroupConfig {
            n_samples: 100,
            dim: 6,
            ..Default::default()
        };
        let g = gen_groups(&cfg).unwrap();
        let names: Vec<&str> = g.spaces.iter().map(|(s, _)| s.name.as_str()).collect();
        assert_eq!(names, ["general_0", "general_1", "medical_0", "medical_1"]);
        assert!(g
            .spaces
            .iter()
            .all(|(s, _)| s.sample_ids == g.labels.sample_ids));
    }
}
