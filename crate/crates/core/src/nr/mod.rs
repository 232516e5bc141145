//! No-reference quality: a clean-manifold likelihood over patch descriptors
//! aggregated over the worst-scoring patches.
//!
//! Fitting pools clean patch descriptors from every organ into one PCA basis
//! and fits one diagonal GMM per organ in that space. Scoring tiles an image,
//! scores each patch by log-likelihood (under its organ's model, or under a
//! uniform mixture of all organ models when no label is given), and averages
//! the `kappa = max(1, round(0.15 N))` lowest patch scores.

mod gmm;
mod pca;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm, fit_gmm_with, log_sum_exp, DiagGmm, GmmFit, GmmFitConfig, VARIANCE_FLOOR};
pub use pca::{fit_pca, PcaModel};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, LayerSet};
use crate::image::{ensure_min_side, tile, GrayImage, TILE_SIZE, TILE_STRIDE};

pub const BANK_VERSION: &str = "usqm-bank/1";

/// Tolerances for parameters that went through float32 storage.
pub(crate) const STORED_WEIGHT_TOL: f64 = 1e-6;
pub(crate) const STORED_ORTHO_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NrConfig {
    pub layers: LayerSet,
    pub pca_dim: usize,
    pub components: usize,
    pub seed: u64,
    pub tile_size: usize,
    pub stride: usize,
    pub worst_fraction: f64,
    pub variance_floor: f64,
    /// Refuse to score with an extractor whose fingerprint differs from the
    /// bank's. When false, a mismatch is only logged.
    pub strict_fingerprint: bool,
}

impl Default for NrConfig {
    fn default() -> Self {
        Self {
            layers: LayerSet::default(),
            pca_dim: 128,
            components: 4,
            seed: 0,
            tile_size: TILE_SIZE,
            stride: TILE_STRIDE,
            worst_fraction: 0.15,
            variance_floor: VARIANCE_FLOOR,
            strict_fingerprint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrganModelBank {
    pub version: String,
    pub fingerprint: String,
    pub config_hash: String,
    pub layers: LayerSet,
    pub tile_size: usize,
    pub stride: usize,
    pub worst_fraction: f64,
    pub variance_floor: f64,
    pub pca: PcaModel,
    pub organs: BTreeMap<String, DiagGmm>,
}

impl OrganModelBank {
    pub fn organ_count(&self) -> usize {
        self.organs.len()
    }

    pub fn organ_names(&self) -> Vec<&str> {
        self.organs.keys().map(String::as_str).collect()
    }

    /// Re-checks every invariant of a stored bank.
    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() {
            return Err(Error::CorruptModel("bank has no organ models".into()));
        }
        self.pca.validate(STORED_ORTHO_TOL)?;
        let floor = f64::from(self.variance_floor as f32);
        for (name, g) in &self.organs {
            g.validate(STORED_WEIGHT_TOL, floor)
                .map_err(|e| Error::CorruptModel(format!("organ `{name}`: {e}")))?;
            if g.dim() != self.pca.output_dim {
                return Err(Error::CorruptModel(format!(
                    "organ `{name}` mixture has dimension {}, PCA has {}",
                    g.dim(),
                    self.pca.output_dim
                )));
            }
        }
        Ok(())
    }

    pub fn check_extractor(&self, extractor: &dyn FeatureExtractor, strict: bool) -> Result<()> {
        let found = extractor.fingerprint();
        if found != self.fingerprint {
            if strict {
                return Err(Error::FingerprintMismatch {
                    expected: self.fingerprint.clone(),
                    found,
                });
            }
            log::warn!(
                "extractor fingerprint {found} differs from bank {}; scores are not comparable",
                self.fingerprint
            );
        }
        Ok(())
    }

    /// Patch log-likelihood of a projected descriptor.
    pub fn patch_score(&self, projected: &[f64], organ: Option<&str>) -> Result<f64> {
        match organ {
            Some(name) => {
                let g = self
                    .organs
                    .get(name)
                    .ok_or_else(|| Error::UnknownOrgan(name.to_string()))?;
                Ok(g.log_density(projected))
            }
            None => {
                let terms: Vec<f64> = self.organs.values().map(|g| g.log_density(projected)).collect();
                Ok(log_sum_exp(&terms) - (terms.len() as f64).ln())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganFitReport {
    pub organ: String,
    pub patches: usize,
    pub iterations: usize,
    pub final_log_likelihood: Option<f64>,
    pub excluded: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub pool_size: usize,
    pub organs: Vec<OrganFitReport>,
}

/// A clean training image and its organ label.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub organ: String,
}

/// Global descriptors of every tile of `img` (after the min-side upscale).
pub fn patch_descriptors(
    img: &GrayImage,
    extractor: &dyn FeatureExtractor,
    layers: &LayerSet,
    tile_size: usize,
    stride: usize,
) -> Result<(Vec<(usize, usize)>, Vec<Vec<f64>>, bool)> {
    let (img, upscaled) = ensure_min_side(img, tile_size)?;
    let grid = tile(&img, tile_size, stride)?;
    let desc = grid
        .origins
        .par_iter()
        .map(|&(r, c)| {
            let patch = img.crop(r, c, tile_size, tile_size)?;
            Ok(extractor.global_descriptor(&patch, layers)?.values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid.origins, desc, upscaled))
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

fn quantize_pca(p: &mut PcaModel) {
    for v in p.mean.iter_mut().chain(&mut p.components).chain(&mut p.variances) {
        *v = quantize(*v);
    }
}

fn quantize_gmm(g: &mut DiagGmm, floor: f64) {
    let floor32 = quantize(floor);
    g.weights.iter_mut().for_each(|w| *w = quantize(*w));
    g.means.iter_mut().flatten().for_each(|m| *m = quantize(*m));
    g.variances
        .iter_mut()
        .flatten()
        .for_each(|s| *s = quantize(*s).max(floor32));
}

/// Fits the shared PCA and one mixture per organ. Parameters are rounded to
/// float32 so the in-memory bank is exactly what a saved bank decodes to.
pub fn fit_bank(
    samples: &[LabeledImage],
    extractor: &dyn FeatureExtractor,
    cfg: &NrConfig,
) -> Result<(OrganModelBank, FitReport)> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no clean images supplied".into()));
    }
    extractor.profile().check_layers(&cfg.layers)?;
    let per_image = samples
        .iter()
        .map(|s| patch_descriptors(&s.image, extractor, &cfg.layers, cfg.tile_size, cfg.stride).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;

    let mut by_organ: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (s, desc) in samples.iter().zip(per_image) {
        by_organ.entry(s.organ.clone()).or_default().extend(desc);
    }

    let mut report = FitReport {
        pool_size: 0,
        organs: Vec::new(),
    };
    let mut kept: Vec<(&String, &Vec<Vec<f64>>)> = Vec::new();
    for (name, desc) in &by_organ {
        if desc.len() < cfg.components {
            report.organs.push(OrganFitReport {
                organ: name.clone(),
                patches: desc.len(),
                iterations: 0,
                final_log_likelihood: None,
                excluded: Some(format!(
                    "{} patches, need at least {}",
                    desc.len(),
                    cfg.components
                )),
            });
        } else {
            kept.push((name, desc));
        }
    }
    if kept.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no organ has at least {} patches: {}",
            cfg.components,
            report
                .organs
                .iter()
                .map(|o| format!("{}={}", o.organ, o.patches))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }

    let pool: Vec<Vec<f64>> = kept.iter().flat_map(|(_, d)| d.iter().cloned()).collect();
    report.pool_size = pool.len();
    let mut pca = fit_pca(&pool, cfg.pca_dim)?;
    quantize_pca(&mut pca);

    let mut organs = BTreeMap::new();
    for (i, (name, desc)) in kept.iter().enumerate() {
        let projected = desc
            .iter()
            .map(|d| pca.project(d))
            .collect::<Result<Vec<_>>>()?;
        let fit = fit_gmm_with(
            &projected,
            &GmmFitConfig {
                components: cfg.components,
                seed: cfg.seed.wrapping_add(i as u64),
                variance_floor: cfg.variance_floor,
                ..GmmFitConfig::default()
            },
        )?;
        report.organs.push(OrganFitReport {
            organ: (*name).clone(),
            patches: desc.len(),
            iterations: fit.iterations(),
            final_log_likelihood: Some(fit.final_log_likelihood()),
            excluded: None,
        });
        let mut model = fit.model;
        quantize_gmm(&mut model, cfg.variance_floor);
        organs.insert((*name).clone(), model);
    }
    report.organs.sort_by(|a, b| a.organ.cmp(&b.organ));

    let bank = OrganModelBank {
        version: BANK_VERSION.to_string(),
        fingerprint: extractor.fingerprint(),
        config_hash: crate::store::config_hash(cfg),
        layers: cfg.layers.clone(),
        tile_size: cfg.tile_size,
        stride: cfg.stride,
        worst_fraction: cfg.worst_fraction,
        variance_floor: cfg.variance_floor,
        pca,
        organs,
    };
    bank.validate()?;
    Ok((bank, report))
}

/// `max(1, round(fraction * n))` with round-half-away-from-zero.
pub fn kappa(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).max(1)
}

/// Indices of the `k` lowest scores (ties: lower index first), in ascending
/// score order, and their mean.
pub fn worst_k(scores: &[f64], k: usize) -> (Vec<usize>, f64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    let mean = idx.iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
    (idx, mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrqResult {
    pub patch_scores: Vec<f64>,
    /// Worst-patch indices, lowest score first.
    pub worst: Vec<usize>,
    pub kappa: usize,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub origins: Vec<(usize, usize)>,
    pub organ: Option<String>,
    pub upscaled: bool,
}

impl NrqResult {
    /// Aggregates per-patch scores with the worst-fraction rule.
    pub fn from_scores(
        patch_scores: Vec<f64>,
        origins: Vec<(usize, usize)>,
        fraction: f64,
        organ: Option<String>,
        upscaled: bool,
    ) -> Result<Self> {
        if patch_scores.is_empty() {
            return Err(Error::InsufficientData("no patch scores".into()));
        }
        let kappa = kappa(patch_scores.len(), fraction);
        let (worst, final_score) = worst_k(&patch_scores, kappa);
        Ok(Self {
            patch_scores,
            worst,
            kappa,
            final_score,
            origins,
            organ,
            upscaled,
        })
    }

    pub fn worst_origins(&self) -> Vec<(usize, usize)> {
        self.worst.iter().map(|&i| self.origins[i]).collect()
    }
}

/// Scores one image against a bank. `organ = None` uses the uniform mixture.
pub fn nrq_score(
    img: &GrayImage,
    bank: &OrganModelBank,
    organ: Option<&str>,
    extractor: &dyn FeatureExtractor,
    strict_fingerprint: bool,
) -> Result<NrqResult> {
    if let Some(name) = organ {
        if !bank.organs.contains_key(name) {
            return Err(Error::UnknownOrgan(name.to_string()));
        }
    }
    bank.check_extractor(extractor, strict_fingerprint)?;
    let (origins, desc, upscaled) =
        patch_descriptors(img, extractor, &bank.layers, bank.tile_size, bank.stride)?;
    let scores = desc
        .iter()
        .map(|d| bank.patch_score(&bank.pca.project(d)?, organ))
        .collect::<Result<Vec<_>>>()?;
    NrqResult::from_scores(
        scores,
        origins,
        bank.worst_fraction,
        organ.map(str::to_string),
        upscaled,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(16, 0.15), 2);
        assert_eq!(kappa(1, 0.15), 1);
        assert_eq!(kappa(10, 0.15), 2); // 1.5 rounds away from zero
        assert_eq!(kappa(3, 0.15), 1);
    }

    #[test]
    fn worst_k_ties_prefer_lower_index() {
        let (idx, mean) = worst_k(&[0.5, -1.0, 0.5, -1.0, 0.2], 3);
        assert_eq!(idx, vec![1, 3, 4]);
        assert!((mean - (-1.8 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn sixteen_patches_average_two() {
        let scores: Vec<f64> = (0..16).map(|i| (i as f64 * 7.0) % 16.0).collect();
        let r = NrqResult::from_scores(scores, vec![(0, 0); 16], 0.15, None, false).unwrap();
        assert_eq!(r.kappa, 2);
        assert_eq!(r.final_score, 0.5);
    }

    fn toy_bank(organs: usize) -> OrganModelBank {
        let pca = PcaModel {
            input_dim: 2,
            output_dim: 2,
            mean: vec![0.0, 0.0],
            components: vec![1.0, 0.0, 0.0, 1.0],
            variances: vec![1.0, 0.5],
        };
        let mut map = BTreeMap::new();
        for o in 0..organs {
            map.insert(
                format!("organ{o}"),
                DiagGmm {
                    weights: vec![0.5, 0.5],
                    means: vec![vec![o as f64, 0.0], vec![0.0, -(o as f64)]],
                    variances: vec![vec![1.0, 0.5], vec![0.25, 2.0]],
                },
            );
        }
        OrganModelBank {
            version: BANK_VERSION.into(),
            fingerprint: "test".into(),
            config_hash: String::new(),
            layers: LayerSet::default(),
            tile_size: 224,
            stride: 112,
            worst_fraction: 0.15,
            variance_floor: VARIANCE_FLOOR,
            pca,
            organs: map,
        }
    }

    #[test]
    fn single_organ_mixture_equals_organ_score() {
        let bank = toy_bank(1);
        for v in [[0.3, -0.2], [5.0, 1.0], [-2.0, 0.0]] {
            assert_eq!(
                bank.patch_score(&v, None).unwrap(),
                bank.patch_score(&v, Some("organ0")).unwrap()
            );
        }
        assert!(matches!(bank.patch_score(&[0.0, 0.0], Some("liver")), Err(Error::UnknownOrgan(_))));
    }

    proptest! {
        #[test]
        fn mixture_sandwich(x in -5.0f64..5.0, y in -5.0f64..5.0, organs in 1usize..5) {
            let bank = toy_bank(organs);
            let per: Vec<f64> = bank.organs.keys().map(|o| bank.patch_score(&[x, y], Some(o)).unwrap()).collect();
            let s = bank.patch_score(&[x, y], None).unwrap();
            let lo = per.iter().copied().fold(f64::INFINITY, f64::min) - (organs as f64).ln();
            let hi = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }

        #[test]
        fn lowering_a_worst_score_never_raises_final(
            scores in prop::collection::vec(-50.0f64..0.0, 1..60),
            pick in 0usize..1000,
            drop in 0.0f64..10.0,
        ) {
            let r = NrqResult::from_scores(scores.clone(), vec![(0, 0); scores.len()], 0.15, None, false).unwrap();
            let victim = r.worst[pick % r.worst.len()];
            let mut lowered = scores.clone();
            lowered[victim] -= drop;
            let r2 = NrqResult::from_scores(lowered, vec![(0, 0); scores.len()], 0.15, None, false).unwrap();
            prop_assert!(r2.final_score <= r.final_score);
        }
    }
}
