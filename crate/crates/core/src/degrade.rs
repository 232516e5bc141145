//! Distortion synthesis and PSNR-matched calibration.
//!
//! Every kind is parameterized by one severity `theta` in a kind-specific
//! range whose lower end is the identity. Random fields are drawn from the
//! seed and only scaled by `theta`, so `PSNR(theta)` is a deterministic
//! function that bisection can search.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{psnr, GrayImage, Psnr};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationKind {
    AdditiveGaussian,
    Speckle,
    GaussianBlur,
    Downsample,
    RoiShadow,
    SpecularClip,
    ScanlineMissing,
    Elastic,
    ClutterHaze,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionGroup {
    NoiseTexture,
    BlurResolution,
    UltrasoundArtifact,
    Geometric,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 9] = [
        DegradationKind::AdditiveGaussian,
        DegradationKind::Speckle,
        DegradationKind::GaussianBlur,
        DegradationKind::Downsample,
        DegradationKind::RoiShadow,
        DegradationKind::SpecularClip,
        DegradationKind::ScanlineMissing,
        DegradationKind::Elastic,
        DegradationKind::ClutterHaze,
    ];

    /// The eight kinds of the standard suite (clutter haze is opt-in).
    pub fn defaults() -> &'static [DegradationKind] {
        &Self::ALL[..8]
    }

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::AdditiveGaussian => "additive-gaussian",
            DegradationKind::Speckle => "speckle",
            DegradationKind::GaussianBlur => "gaussian-blur",
            DegradationKind::Downsample => "downsample",
            DegradationKind::RoiShadow => "roi-shadow",
            DegradationKind::SpecularClip => "specular-clip",
            DegradationKind::ScanlineMissing => "scanline-missing",
            DegradationKind::Elastic => "elastic",
            DegradationKind::ClutterHaze => "clutter-haze",
        }
    }

    pub fn group(self) -> DistortionGroup {
        use DegradationKind::*;
        match self {
            AdditiveGaussian | Speckle | ClutterHaze => DistortionGroup::NoiseTexture,
            GaussianBlur | Downsample => DistortionGroup::BlurResolution,
            RoiShadow | SpecularClip | ScanlineMissing => DistortionGroup::UltrasoundArtifact,
            Elastic => DistortionGroup::Geometric,
        }
    }

    /// `(theta_min, theta_max)`; `theta_min` is the identity.
    pub fn bounds(self) -> (f64, f64) {
        use DegradationKind::*;
        match self {
            AdditiveGaussian => (0.0, 1.0),
            Speckle => (0.0, 2.0),
            GaussianBlur => (0.0, 12.0),
            Downsample => (1.0, 16.0),
            RoiShadow => (0.0, 1.0),
            SpecularClip => (0.0, 1.0),
            ScanlineMissing => (0.0, 1.0),
            Elastic => (0.0, 16.0),
            ClutterHaze => (0.0, 1.0),
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown degradation `{s}`; expected one of {}",
                    Self::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

/// Shape parameters that are fixed per kind rather than swept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Shadow ellipse semi-axes as fractions of (height, width).
    pub shadow_axes: (f64, f64),
    /// Smoothing of elastic and haze fields, as a fraction of the long side.
    pub field_scale: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            shadow_axes: (0.25, 0.3),
            field_scale: 1.0 / 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub theta: f64,
    pub seed: u64,
    #[serde(default)]
    pub shape: ShapeParams,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, theta: f64, seed: u64) -> Self {
        Self {
            kind,
            theta,
            seed,
            shape: ShapeParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.bounds();
        if !(self.theta >= lo && self.theta <= hi) {
            return Err(Error::Parameter(format!(
                "{} severity {} outside [{lo}, {hi}]",
                self.kind, self.theta
            )));
        }
        Ok(())
    }
}

fn kind_rng(seed: u64, kind: DegradationKind) -> ChaCha8Rng {
    // each kind draws from its own stream so fields do not alias across kinds
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64 + 1);
    rng
}

fn normal_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Separable Gaussian filter with clamp-to-edge borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if sigma <= 1e-6 {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let out = blur_plane(img.data(), h, w, sigma);
    GrayImage::new(h, w, out)
}

pub(crate) fn blur_plane(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + i as isize - radius, w);
                acc += k * data[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + i as isize - radius, h);
                acc += k * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Smooth seeded field normalized to max |value| = 1.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let raw = normal_field(rng, h * w);
    let mut f = blur_plane(&raw, h, w, sigma);
    let max = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        f.iter_mut().for_each(|v| *v /= max);
    }
    f
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Applies one distortion. Output has the input's size and lies in `[0, 1]`.
pub fn apply(img: &GrayImage, spec: &DegradationSpec) -> Result<GrayImage> {
    spec.validate()?;
    let theta = spec.theta;
    let (lo, _) = spec.kind.bounds();
    if theta == lo {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let mut rng = kind_rng(spec.seed, spec.kind);
    match spec.kind {
        DegradationKind::AdditiveGaussian => {
            let noise = normal_field(&mut rng, h * w);
            img.map(|r, c, v| v + theta * noise[r * w + c])
        }
        DegradationKind::Speckle => {
            let noise = normal_field(&mut rng, h * w);
            img.map(|r, c, v| v * (1.0 + theta * noise[r * w + c]))
        }
        DegradationKind::GaussianBlur => gaussian_blur(img, theta),
        DegradationKind::Downsample => downsample(img, theta),
        DegradationKind::RoiShadow => {
            let (ay, ax) = spec.shape.shadow_axes;
            let cy = rng.random_range(0.3..0.7) * h as f64;
            let cx = rng.random_range(0.3..0.7) * w as f64;
            let (sy, sx) = (ay * h as f64, ax * w as f64);
            img.map(|r, c, v| {
                let dy = (r as f64 + 0.5 - cy) / sy;
                let dx = (c as f64 + 0.5 - cx) / sx;
                let rho = (dy * dy + dx * dx).sqrt();
                let mask = 1.0 - smoothstep(0.8, 1.2, rho);
                v * (1.0 - theta * mask)
            })
        }
        DegradationKind::SpecularClip => {
            let cut = 1.0 - theta;
            img.map(|_, _, v| if v >= cut { 1.0 } else { v })
        }
        DegradationKind::ScanlineMissing => {
            let mut order: Vec<usize> = (0..w).collect();
            for i in (1..w).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let exact = theta * w as f64;
            let full = (exact.floor() as usize).min(w);
            let frac = exact - full as f64;
            let mut gain = vec![1.0; w];
            for &c in &order[..full] {
                gain[c] = 0.0;
            }
            if full < w && frac > 0.0 {
                gain[order[full]] = 1.0 - frac;
            }
            img.map(|_, c, v| v * gain[c])
        }
        DegradationKind::Elastic => {
            let sigma = spec.shape.field_scale * h.max(w) as f64;
            let dy = smooth_field(&mut rng, h, w, sigma);
            let dx = smooth_field(&mut rng, h, w, sigma);
            GrayImage::from_fn(h, w, |r, c| {
                let i = r * w + c;
                img.sample(r as f64 + theta * dy[i], c as f64 + theta * dx[i])
            })
        }
        DegradationKind::ClutterHaze => {
            let sigma = spec.shape.field_scale * h.max(w) as f64;
            let field = smooth_field(&mut rng, h, w, sigma);
            img.map(|r, c, v| v + theta * 0.5 * (field[r * w + c] + 1.0))
        }
    }
}

/// Antialiased resampling onto a lattice with spacing `factor`, then
/// bilinear reconstruction at the original size. Continuous in `factor`.
fn downsample(img: &GrayImage, factor: f64) -> Result<GrayImage> {
    let (h, w) = img.dims();
    let pre = gaussian_blur(img, 0.5 * (factor * factor - 1.0).sqrt())?;
    let nh = ((h - 1) as f64 / factor).ceil() as usize + 1;
    let nw = ((w - 1) as f64 / factor).ceil() as usize + 1;
    let low = GrayImage::from_fn(nh, nw, |i, j| pre.sample(i as f64 * factor, j as f64 * factor))?;
    GrayImage::from_fn(h, w, |r, c| low.sample(r as f64 / factor, c as f64 / factor))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrTarget {
    pub target: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl PsnrTarget {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            tolerance: 0.05,
            max_iterations: 48,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub theta: f64,
    pub achieved: Psnr,
    pub image: GrayImage,
    pub iterations: usize,
    pub converged: bool,
}

/// Bisection on `theta` until the degraded image's PSNR is within tolerance
/// of the target. The seed is reused for every probe.
pub fn calibrate_to_psnr(
    img: &GrayImage,
    kind: DegradationKind,
    seed: u64,
    target: &PsnrTarget,
) -> Result<Calibration> {
    if !(target.tolerance > 0.0) || !target.target.is_finite() {
        return Err(Error::Range(format!(
            "invalid PSNR target {} (tolerance {})",
            target.target, target.tolerance
        )));
    }
    let (mut lo, mut hi) = kind.bounds();
    let probe = |theta: f64| -> Result<(Psnr, GrayImage)> {
        let out = apply(img, &DegradationSpec::new(kind, theta, seed))?;
        Ok((psnr(img, &out)?, out))
    };
    let (at_max, max_img) = probe(hi)?;
    if at_max.db() > target.target + target.tolerance {
        return Err(Error::Unreachable {
            kind: kind.name().into(),
            target: target.target,
            lowest: at_max.db(),
        });
    }
    // endpoints: theta_min is the identity (PSNR = +inf)
    let mut best = Calibration {
        theta: hi,
        achieved: at_max,
        image: max_img,
        iterations: 0,
        converged: (at_max.db() - target.target).abs() <= target.tolerance,
    };
    if best.converged {
        return Ok(best);
    }
    for it in 1..=target.max_iterations {
        let mid = 0.5 * (lo + hi);
        let (p, out) = probe(mid)?;
        let err = (p.db() - target.target).abs();
        if err < (best.achieved.db() - target.target).abs() {
            best = Calibration {
                theta: mid,
                achieved: p,
                image: out,
                iterations: it,
                converged: false,
            };
        }
        best.iterations = it;
        if err <= target.tolerance {
            best.converged = true;
            return Ok(best);
        }
        if p.db() > target.target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    log::warn!(
        "{kind}: bisection stopped after {} iterations at {} dB (target {})",
        target.max_iterations,
        best.achieved,
        target.target
    );
    Ok(best)
}

/// `n` evenly spaced severities over the kind's full range, checking that
/// PSNR never increases along the sweep.
pub fn severity_sweep(
    img: &GrayImage,
    kind: DegradationKind,
    seed: u64,
    n: usize,
) -> Result<Vec<(f64, GrayImage)>> {
    if n < 2 {
        return Err(Error::Parameter(format!("sweep needs at least 2 steps, got {n}")));
    }
    let (lo, hi) = kind.bounds();
    let mut out = Vec::with_capacity(n);
    let mut prev = f64::INFINITY;
    for i in 0..n {
        let theta = if i == n - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        };
        let degraded = apply(img, &DegradationSpec::new(kind, theta, seed))?;
        let p = psnr(img, &degraded)?.db();
        if p > prev {
            return Err(Error::NonMonotone {
                kind: kind.name().into(),
                theta,
                detail: format!("PSNR rose from {prev:.4} to {p:.4} dB"),
            });
        }
        prev = p;
        out.push((theta, degraded));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{speckle_phantom, PhantomStyle};

    fn phantom() -> GrayImage {
        speckle_phantom(224, 224, 3, &PhantomStyle::default()).unwrap()
    }

    #[test]
    fn names_round_trip_and_groups() {
        for k in DegradationKind::ALL {
            assert_eq!(k.name().parse::<DegradationKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("fog".parse::<DegradationKind>().is_err());
        use DistortionGroup::*;
        let groups: Vec<DistortionGroup> = DegradationKind::defaults().iter().map(|k| k.group()).collect();
        assert_eq!(
            groups,
            vec![
                NoiseTexture,
                NoiseTexture,
                BlurResolution,
                BlurResolution,
                UltrasoundArtifact,
                UltrasoundArtifact,
                UltrasoundArtifact,
                Geometric
            ]
        );
        assert!(!DegradationKind::defaults().contains(&DegradationKind::ClutterHaze));
    }

    #[test]
    fn theta_min_is_identity() {
        let img = phantom();
        for k in DegradationKind::ALL {
            let out = apply(&img, &DegradationSpec::new(k, k.bounds().0, 5)).unwrap();
            assert_eq!(out, img, "{k}");
        }
    }

    #[test]
    fn out_of_range_theta() {
        let img = phantom();
        let spec = DegradationSpec::new(DegradationKind::Speckle, 2.5, 0);
        assert!(matches!(apply(&img, &spec), Err(Error::Parameter(_))));
        let spec = DegradationSpec::new(DegradationKind::Downsample, 0.5, 0);
        assert!(apply(&img, &spec).is_err());
    }

    #[test]
    fn scanline_quarter_zeroes_56_columns() {
        let img = GrayImage::filled(32, 224, 0.5).unwrap();
        let spec = DegradationSpec::new(DegradationKind::ScanlineMissing, 0.25, 17);
        let out = apply(&img, &spec).unwrap();
        let zeroed: Vec<usize> = (0..224).filter(|&c| (0..32).all(|r| out.get(r, c) == 0.0)).collect();
        assert_eq!(zeroed.len(), 56);
        let untouched = (0..224).filter(|&c| (0..32).all(|r| out.get(r, c) == 0.5)).count();
        assert_eq!(untouched, 224 - 56);
        let again = apply(&img, &spec).unwrap();
        assert_eq!(out, again);
        let other = apply(&img, &DegradationSpec::new(DegradationKind::ScanlineMissing, 0.25, 18)).unwrap();
        assert_ne!(out, other);
    }

    #[test]
    fn specular_clip_definition() {
        let img = phantom();
        let theta = 0.3;
        let out = apply(&img, &DegradationSpec::new(DegradationKind::SpecularClip, theta, 0)).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            if *a >= 1.0 - theta {
                assert_eq!(*b, 1.0);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn outputs_stay_in_range_and_deterministic() {
        let img = phantom();
        for k in DegradationKind::ALL {
            let (lo, hi) = k.bounds();
            let spec = DegradationSpec::new(k, lo + 0.7 * (hi - lo), 9);
            let a = apply(&img, &spec).unwrap();
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.to_u8(), apply(&img, &spec).unwrap().to_u8());
            assert_eq!(a.dims(), img.dims());
        }
    }

    #[test]
    fn gaussian_on_constant_hits_20db() {
        let img = GrayImage::filled(224, 224, 0.5).unwrap();
        let cal = calibrate_to_psnr(&img, DegradationKind::AdditiveGaussian, 1, &PsnrTarget::new(20.0)).unwrap();
        assert!(cal.converged);
        let p = cal.achieved.db();
        assert!((19.95..=20.05).contains(&p), "{p}");
        assert!((cal.theta - 0.1).abs() < 0.005, "{}", cal.theta);
        let again = calibrate_to_psnr(&img, DegradationKind::AdditiveGaussian, 1, &PsnrTarget::new(20.0)).unwrap();
        assert_eq!(cal.theta, again.theta);
    }

    #[test]
    fn unreachable_target() {
        let img = phantom();
        // clipping cannot push a mostly-dark image below a very low PSNR
        let err = calibrate_to_psnr(&img, DegradationKind::AdditiveGaussian, 1, &PsnrTarget::new(-10.0));
        assert!(matches!(err, Err(Error::Unreachable { .. })));
        let err = calibrate_to_psnr(&img, DegradationKind::AdditiveGaussian, 1, &PsnrTarget::new(f64::INFINITY));
        assert!(matches!(err, Err(Error::Range(_))));
    }

    #[test]
    fn sweep_shape() {
        let img = phantom();
        let s = severity_sweep(&img, DegradationKind::GaussianBlur, 0, 6).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.windows(2).all(|w| w[1].0 > w[0].0));
        let s = severity_sweep(&img, DegradationKind::Speckle, 0, 2).unwrap();
        assert_eq!(s[0].1, img);
        assert_eq!(s[1].0, 2.0);
        assert!(severity_sweep(&img, DegradationKind::Speckle, 0, 1).is_err());
    }
}
