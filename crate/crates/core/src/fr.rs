//! Full-reference perceptual distance over patch-token relations, and the
//! token-distance loss value used for restoration comparisons.
//!
//! Per layer, the distance has two parts. The structural term compares
//! row-softmaxed local self-similarity maps around every token. The Gram term
//! compares channel co-activation statistics. The final score averages
//! `structural + gram` over layers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, LayerSet, TokenFeatures, TokenMatrix};
use crate::image::{ensure_min_side, tile, GrayImage, TILE_SIZE, TILE_STRIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrConfig {
    pub layers: LayerSet,
    /// Chebyshev radius of the token neighbourhood.
    pub radius: usize,
    pub temperature: f64,
    pub window_stride: usize,
}

impl Default for FrConfig {
    fn default() -> Self {
        Self {
            layers: LayerSet::default(),
            radius: 3,
            temperature: 20.0,
            window_stride: TILE_STRIDE,
        }
    }
}

impl FrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parameter("FR layer set is empty".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.window_stride == 0 {
            return Err(Error::Parameter("window stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub layer: usize,
    pub ds: f64,
    pub dg: f64,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrBreakdown {
    pub layers: Vec<LayerTerms>,
    #[serde(rename = "final")]
    pub final_score: f64,
}

/// Row-wise L2 normalization; all-zero rows stay zero.
pub fn normalize_rows(f: &TokenMatrix) -> TokenMatrix {
    let mut out = f.clone();
    let mut zero_rows = 0usize;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows += 1;
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    if zero_rows > 0 {
        log::debug!("{zero_rows} all-zero token rows left unnormalized");
    }
    out
}

fn check_same_shape(a: &TokenMatrix, b: &TokenMatrix) -> Result<()> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::Shape(format!(
            "token matrices {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Token indices within Chebyshev distance `radius` of `q`, clipped at the
/// grid border, in row-major order.
pub fn neighborhood(q: usize, grid_side: usize, radius: usize) -> Vec<usize> {
    let (qr, qc) = (q / grid_side, q % grid_side);
    let r0 = qr.saturating_sub(radius);
    let r1 = (qr + radius).min(grid_side - 1);
    let c0 = qc.saturating_sub(radius);
    let c1 = (qc + radius).min(grid_side - 1);
    (r0..=r1)
        .flat_map(|r| (c0..=c1).map(move |c| r * grid_side + c))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full token self-similarity `F F^T` of an already-normalized matrix.
fn similarity(f: &TokenMatrix) -> Vec<f64> {
    let t = f.rows();
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let v = dot(f.row(i), f.row(j));
            s[i * t + j] = v;
            s[j * t + i] = v;
        }
    }
    s
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    debug_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

/// Local attention-map distance between two token matrices on a square grid.
pub fn structural_distance(
    fx: &TokenMatrix,
    fy: &TokenMatrix,
    grid_side: usize,
    radius: usize,
    temperature: f64,
) -> Result<f64> {
    check_same_shape(fx, fy)?;
    let t = fx.rows();
    if grid_side * grid_side != t {
        return Err(Error::Shape(format!(
            "{t} tokens on a {grid_side}x{grid_side} grid"
        )));
    }
    let sx = similarity(&normalize_rows(fx));
    let sy = similarity(&normalize_rows(fy));
    let mut total = 0.0;
    let mut px = Vec::new();
    let mut py = Vec::new();
    for q in 0..t {
        let nb = neighborhood(q, grid_side, radius);
        let m = nb.len();
        let mut acc = 0.0;
        for &i in &nb {
            px.clear();
            py.clear();
            px.extend(nb.iter().map(|&j| temperature * sx[i * t + j]));
            py.extend(nb.iter().map(|&j| temperature * sy[i * t + j]));
            softmax_in_place(&mut px);
            softmax_in_place(&mut py);
            acc += px.iter().zip(&py).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        total += acc / (m * m) as f64;
    }
    Ok(total / t as f64)
}

/// `G = F^T F / (T C)` of the row-normalized matrix, row-major `C x C`.
pub fn gram(f: &TokenMatrix) -> Vec<f64> {
    let n = normalize_rows(f);
    let (t, c) = (n.rows(), n.cols());
    let mut g = vec![0.0; c * c];
    for k in 0..t {
        let row = n.row(k);
        for i in 0..c {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..c {
                g[i * c + j] += ri * row[j];
            }
        }
    }
    let scale = (t * c) as f64;
    g.iter_mut().for_each(|v| *v /= scale);
    g
}

pub fn gram_distance(fx: &TokenMatrix, fy: &TokenMatrix) -> Result<f64> {
    check_same_shape(fx, fy)?;
    let gx = gram(fx);
    let gy = gram(fy);
    Ok(gx.iter().zip(&gy).map(|(a, b)| (a - b).abs()).sum::<f64>() / gx.len() as f64)
}

/// Per-layer terms between two sets of token features.
pub fn compare_features(
    fx: &TokenFeatures,
    fy: &TokenFeatures,
    grid_side: usize,
    cfg: &FrConfig,
) -> Result<FrBreakdown> {
    cfg.validate()?;
    let layers = cfg
        .layers
        .as_slice()
        .par_iter()
        .map(|&l| {
            let missing = || Error::Range(format!("layer {l} missing from features"));
            let a = fx.layer(l).ok_or_else(missing)?;
            let b = fy.layer(l).ok_or_else(missing)?;
            let ds = structural_distance(a, b, grid_side, cfg.radius, cfg.temperature)?;
            let dg = gram_distance(a, b)?;
            Ok(LayerTerms {
                layer: l,
                ds,
                dg,
                d: ds + dg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let final_score = layers.iter().map(|t| t.d).sum::<f64>() / layers.len() as f64;
    Ok(FrBreakdown {
        layers,
        final_score,
    })
}

/// Full-reference distance between two 224x224 images.
pub fn ulpips(
    x: &GrayImage,
    y: &GrayImage,
    cfg: &FrConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<FrBreakdown> {
    cfg.validate()?;
    let fx = extractor.extract(x, &cfg.layers)?;
    let fy = extractor.extract(y, &cfg.layers)?;
    compare_features(&fx, &fy, extractor.profile().grid_side, cfg)
}

/// Distance between images of any equal size: both are upscaled to a short
/// side of 224 if needed, tiled with `cfg.window_stride`, and per-window
/// breakdowns are averaged term by term.
pub fn ulpips_windowed(
    x: &GrayImage,
    y: &GrayImage,
    cfg: &FrConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(FrBreakdown, usize)> {
    let (x, y) = prepare_pair(x, y)?;
    let grid = tile(&x, TILE_SIZE, cfg.window_stride)?;
    let parts = grid
        .origins
        .par_iter()
        .map(|&(r, c)| {
            let a = x.crop(r, c, TILE_SIZE, TILE_SIZE)?;
            let b = y.crop(r, c, TILE_SIZE, TILE_SIZE)?;
            ulpips(&a, &b, cfg, extractor)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut layers = parts[0].layers.clone();
    for (i, t) in layers.iter_mut().enumerate() {
        t.ds = parts.iter().map(|p| p.layers[i].ds).sum::<f64>() / n;
        t.dg = parts.iter().map(|p| p.layers[i].dg).sum::<f64>() / n;
        t.d = parts.iter().map(|p| p.layers[i].d).sum::<f64>() / n;
    }
    let final_score = parts.iter().map(|p| p.final_score).sum::<f64>() / n;
    Ok((
        FrBreakdown {
            layers,
            final_score,
        },
        parts.len(),
    ))
}

fn prepare_pair(a: &GrayImage, b: &GrayImage) -> Result<(GrayImage, GrayImage)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "images {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok((ensure_min_side(a, TILE_SIZE)?.0, ensure_min_side(b, TILE_SIZE)?.0))
}

/// Mean squared distance between normalized token rows, averaged over tokens.
pub fn token_distance(fx: &TokenMatrix, fy: &TokenMatrix) -> Result<f64> {
    check_same_shape(fx, fy)?;
    let a = normalize_rows(fx);
    let b = normalize_rows(fy);
    let total: f64 = (0..a.rows())
        .map(|t| {
            a.row(t)
                .iter()
                .zip(b.row(t))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        })
        .sum();
    Ok(total / a.rows() as f64)
}

/// Token perceptual loss value over sliding 224x224 windows.
pub fn token_loss(
    restored: &GrayImage,
    target: &GrayImage,
    cfg: &FrConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    Ok(token_loss_windows(restored, target, cfg, extractor)?.0)
}

/// Same as [`token_loss`], also returning the number of windows averaged.
pub fn token_loss_windows(
    restored: &GrayImage,
    target: &GrayImage,
    cfg: &FrConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(f64, usize)> {
    cfg.validate()?;
    let (a, b) = prepare_pair(restored, target)?;
    let grid = tile(&a, TILE_SIZE, cfg.window_stride)?;
    let per_window = grid
        .origins
        .par_iter()
        .map(|&(r, c)| {
            let fa = extractor.extract(&a.crop(r, c, TILE_SIZE, TILE_SIZE)?, &cfg.layers)?;
            let fb = extractor.extract(&b.crop(r, c, TILE_SIZE, TILE_SIZE)?, &cfg.layers)?;
            let mut sum = 0.0;
            for ((_, ma), (_, mb)) in fa.layers.iter().zip(&fb.layers) {
                sum += token_distance(ma, mb)?;
            }
            Ok(sum / cfg.layers.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = per_window.len();
    Ok((per_window.iter().sum::<f64>() / n as f64, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TokenMatrix {
        TokenMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let m = TokenMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let n = normalize_rows(&m);
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        assert_eq!(n.row(2), &[1.0, 0.0]);
        assert_eq!(normalize_rows(&n), n);
    }

    #[test]
    fn neighborhood_sizes() {
        let g = 14;
        for q in 0..g * g {
            let n = neighborhood(q, g, 3).len();
            assert!((16..=49).contains(&n));
            let (r, c) = (q / g, q % g);
            if (3..11).contains(&r) && (3..11).contains(&c) {
                assert_eq!(n, 49);
            }
        }
        assert_eq!(neighborhood(0, 14, 3).len(), 16);
        assert_eq!(neighborhood(4, 3, 1), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn structural_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_matrix(&mut rng, 9, 4);
        assert_eq!(structural_distance(&f, &f, 3, 1, 20.0).unwrap(), 0.0);

        let x = TokenMatrix::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let y = TokenMatrix::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
        assert_eq!(structural_distance(&x, &y, 2, 3, 20.0).unwrap(), 0.0);

        let a = random_matrix(&mut rng, 1, 3);
        let b = random_matrix(&mut rng, 1, 3);
        assert_eq!(structural_distance(&a, &b, 1, 3, 20.0).unwrap(), 0.0);
    }

    #[test]
    fn structural_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 9, 2);
        let b = random_matrix(&mut rng, 9, 3);
        assert!(structural_distance(&a, &b, 3, 1, 20.0).is_err());
        assert!(structural_distance(&a, &a, 4, 1, 20.0).is_err());
    }

    #[test]
    fn gram_one_hot() {
        let x = TokenMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = TokenMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(gram(&x), vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(gram_distance(&x, &y).unwrap(), 0.25);
        assert_eq!(gram_distance(&y, &x).unwrap(), 0.25);
        assert_eq!(gram_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn zero_rows_do_not_poison() {
        let x = TokenMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0], vec![2.0, -1.0]]).unwrap();
        let y = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]]).unwrap();
        let d = structural_distance(&x, &y, 2, 1, 20.0).unwrap();
        assert!(d.is_finite() && d >= 0.0);
        assert!(gram_distance(&x, &y).unwrap().is_finite());
        assert!(token_distance(&x, &y).unwrap().is_finite());
    }

    #[test]
    fn token_distance_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 16, 5);
        let b = random_matrix(&mut rng, 16, 5);
        assert_eq!(token_distance(&a, &b).unwrap(), token_distance(&b, &a).unwrap());
        assert_eq!(token_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FrConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = FrConfig {
            layers: LayerSet::new([]),
            ..FrConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn breakdown_json_fields() {
        let b = FrBreakdown {
            layers: vec![LayerTerms {
                layer: 3,
                ds: 0.1,
                dg: 0.2,
                d: 0.30000000000000004,
            }],
            final_score: 0.30000000000000004,
        };
        let v: serde_json::Value = serde_json::to_value(&b).unwrap();
        assert!(v["final"].is_number());
        for key in ["layer", "ds", "dg", "d"] {
            assert!(v["layers"][0].get(key).is_some());
        }
    }
}
