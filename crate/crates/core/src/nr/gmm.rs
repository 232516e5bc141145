use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl DiagGmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Log-density of one component, excluding its weight.
    fn component_log_pdf(&self, k: usize, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((x, m), s2) in v.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let diff = x - m;
            acc -= 0.5 * (LN_2PI + s2.ln()) + diff * diff / (2.0 * s2);
        }
        acc
    }

    /// `log sum_k w_k N(v; mu_k, diag(sigma2_k))`, via log-sum-exp.
    pub fn log_density(&self, v: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.weights[k].ln() + self.component_log_pdf(k, v))
            .collect();
        log_sum_exp(&terms)
    }

    /// Checks shapes, weight normalization within `weight_tol`, and that every
    /// variance is at least `floor`.
    pub fn validate(&self, weight_tol: f64, floor: f64) -> Result<()> {
        let k = self.components();
        let d = self.dim();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::CorruptModel("mixture has inconsistent component count".into()));
        }
        if self.means.iter().chain(&self.variances).any(|r| r.len() != d) {
            return Err(Error::CorruptModel("mixture rows have inconsistent dimension".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::CorruptModel("negative or non-finite mixture weight".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > weight_tol {
            return Err(Error::CorruptModel(format!("mixture weights sum to {sum}")));
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::CorruptModel("non-finite mixture mean".into()));
        }
        if self.variances.iter().flatten().any(|v| !(v.is_finite() && *v >= floor)) {
            return Err(Error::CorruptModel(format!("mixture variance below floor {floor}")));
        }
        Ok(())
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFitConfig {
    pub components: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub variance_floor: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        Self {
            components: 4,
            seed: 0,
            tolerance: 1e-6,
            max_iterations: 200,
            restarts: 10,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub model: DiagGmm,
    /// Mean log-likelihood of the data under each successive parameter set.
    pub trace: Vec<f64>,
    /// Iterations (indices into `trace`) whose parameters came from
    /// re-seeding an empty component; EM monotonicity does not apply there.
    pub reseeded: Vec<usize>,
    pub restart: usize,
}

impl GmmFit {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.trace.last().expect("fit has at least one evaluation")
    }
}

/// Fits a diagonal GMM with EM from k-means++ seeds, keeping the best of
/// `cfg.restarts` runs by final mean log-likelihood.
pub fn fit_gmm(data: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmFit> {
    fit_gmm_with(
        data,
        &GmmFitConfig {
            components: k,
            seed,
            ..GmmFitConfig::default()
        },
    )
}

pub fn fit_gmm_with(data: &[Vec<f64>], cfg: &GmmFitConfig) -> Result<GmmFit> {
    let k = cfg.components;
    let n = data.len();
    if k == 0 {
        return Err(Error::Parameter("mixture needs at least one component".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{k} components need at least {k} samples, got {n}"
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged or empty sample matrix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<GmmFit> = None;
    for restart in 0..cfg.restarts.max(1) {
        let centers = kmeans_pp(data, k, &mut rng);
        let fit = run_em(data, &centers, cfg, restart);
        let better = match &best {
            None => true,
            Some(b) => fit.final_log_likelihood() > b.final_log_likelihood(),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[pick].clone());
        let c = centers.last().expect("just pushed");
        for (d, x) in dist.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, c));
        }
    }
    centers
}

fn global_variance(data: &[Vec<f64>], floor: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let d = data[0].len();
    (0..d)
        .map(|j| {
            let m = data.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = data.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            v.max(floor)
        })
        .collect()
}

/// Weighted M-step from a responsibility matrix (`n x k`). Components whose
/// total responsibility vanishes are re-seeded at the point the current model
/// explains worst. Returns the model and whether any re-seed happened.
fn m_step(
    data: &[Vec<f64>],
    resp: &[Vec<f64>],
    k: usize,
    floor: f64,
    point_ll: Option<&[f64]>,
) -> (DiagGmm, bool) {
    let n = data.len();
    let d = data[0].len();
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    let mut variances = vec![vec![0.0; d]; k];
    let mut reseeded = false;
    let mut used: Vec<usize> = Vec::new();
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        if nk <= 1e-10 * n as f64 {
            let worst = match point_ll {
                Some(ll) => (0..n)
                    .filter(|i| !used.contains(i))
                    .min_by(|&a, &b| ll[a].total_cmp(&ll[b]))
                    .unwrap_or(0),
                None => (0..n).find(|i| !used.contains(i)).unwrap_or(0),
            };
            used.push(worst);
            log::warn!("mixture component {c} empty; re-seeding at sample {worst}");
            weights[c] = 1.0 / n as f64;
            means[c] = data[worst].clone();
            variances[c] = global_variance(data, floor);
            reseeded = true;
            continue;
        }
        weights[c] = nk / n as f64;
        for (x, r) in data.iter().zip(resp) {
            let w = r[c];
            if w == 0.0 {
                continue;
            }
            for (m, v) in means[c].iter_mut().zip(x) {
                *m += w * v;
            }
        }
        means[c].iter_mut().for_each(|m| *m /= nk);
        for (x, r) in data.iter().zip(resp) {
            let w = r[c];
            if w == 0.0 {
                continue;
            }
            for ((s, v), m) in variances[c].iter_mut().zip(x).zip(&means[c]) {
                *s += w * (v - m) * (v - m);
            }
        }
        variances[c].iter_mut().for_each(|s| *s = (*s / nk).max(floor));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (
        DiagGmm {
            weights,
            means,
            variances,
        },
        reseeded,
    )
}

/// Responsibilities and per-sample log-likelihoods.
fn e_step(model: &DiagGmm, data: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = model.components();
    let log_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let mut resp = Vec::with_capacity(data.len());
    let mut ll = Vec::with_capacity(data.len());
    for x in data {
        let terms: Vec<f64> = (0..k).map(|c| log_w[c] + model.component_log_pdf(c, x)).collect();
        let lse = log_sum_exp(&terms);
        resp.push(terms.iter().map(|t| (t - lse).exp()).collect());
        ll.push(lse);
    }
    (resp, ll)
}

fn run_em(data: &[Vec<f64>], centers: &[Vec<f64>], cfg: &GmmFitConfig, restart: usize) -> GmmFit {
    let k = centers.len();
    // hard assignment to the nearest seed
    let resp: Vec<Vec<f64>> = data
        .iter()
        .map(|x| {
            let nearest = (0..k)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .expect("k >= 1");
            (0..k).map(|c| if c == nearest { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let (mut model, first_reseed) = m_step(data, &resp, k, cfg.variance_floor, None);
    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    if first_reseed {
        reseeded.push(0);
    }
    loop {
        let (resp, ll) = e_step(&model, data);
        let mean_ll = ll.iter().sum::<f64>() / data.len() as f64;
        let prev = trace.last().copied();
        trace.push(mean_ll);
        let converged = prev.is_some_and(|p| mean_ll - p < cfg.tolerance);
        if converged || trace.len() >= cfg.max_iterations {
            break;
        }
        let (next, re) = m_step(data, &resp, k, cfg.variance_floor, Some(&ll));
        if re {
            reseeded.push(trace.len());
        }
        model = next;
    }
    GmmFit {
        model,
        trace,
        reseeded,
        restart,
    }
}
