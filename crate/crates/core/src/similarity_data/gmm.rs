//! Diagonal-covariance Gaussian mixtures fitted by EM.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Lower bound applied to every variance entry.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Array1<f64>, var: Array1<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch {
                context: "gaussian",
                expected: mean.len().to_string(),
                got: var.len().to_string(),
            });
        }
        Ok(Self { mean, var: var.mapv(|v| v.max(VARIANCE_FLOOR)) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: ndarray::ArrayView1<f64>) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        x.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&xi, (&m, &v))| -0.5 * (ln_2pi + v.ln()) - (xi - m).powi(2) / (2.0 * v))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GmmRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
}

/// Weighted mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
}

impl From<Gmm> for GmmRepr {
    fn from(g: Gmm) -> Self {
        GmmRepr {
            weights: g.weights,
            means: g.components.iter().map(|c| c.mean.to_vec()).collect(),
            vars: g.components.iter().map(|c| c.var.to_vec()).collect(),
        }
    }
}

impl TryFrom<GmmRepr> for Gmm {
    type Error = Error;

    fn try_from(r: GmmRepr) -> Result<Self> {
        if r.means.len() != r.weights.len() || r.vars.len() != r.weights.len() {
            return Err(Error::InvalidParameter("gmm weights, means and vars differ in length".into()));
        }
        let components = r
            .means
            .into_iter()
            .zip(r.vars)
            .map(|(m, v)| DiagGaussian::new(Array1::from(m), Array1::from(v)))
            .collect::<Result<Vec<_>>>()?;
        Gmm::new(r.weights, components)
    }
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<DiagGaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidParameter("gmm needs one weight per component and at least one component".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("gmm weights must form a simplex".into()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidParameter("gmm components differ in dimension".into()));
        }
        Ok(Self { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Total log-likelihood of the rows of `x`.
    pub fn log_likelihood(&self, x: ArrayView2<f64>) -> f64 {
        x.outer_iter()
            .map(|row| log_sum_exp(self.weights.iter().zip(&self.components).map(|(&w, c)| w.ln() + c.log_density(row))))
            .sum()
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    MaxIterations,
    /// All rows identical with more than one component requested; the
    /// components collapse onto the single point with floored variance.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: Gmm,
    /// Mean per-sample log-likelihood of each parameter iterate.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub status: FitStatus,
}

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-6 }
    }
}

fn sample_moments(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let var = x.outer_iter().fold(Array1::<f64>::zeros(x.ncols()), |acc, row| acc + (&row - &mean).mapv(|v| v * v)) / n;
    (mean, var)
}

fn kmeanspp(x: ArrayView2<f64>, g: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = vec![f64::INFINITY; n];
    while chosen.len() < g {
        let last = x.row(*chosen.last().expect("non-empty"));
        for (i, row) in x.outer_iter().enumerate() {
            let d = (&row - &last).mapv(|v| v * v).sum();
            d2[i] = d2[i].min(d);
        }
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
    }
    chosen
}

/// Fit a `g`-component diagonal GMM by EM from a seeded k-means++ start.
///
/// Stops when the mean log-likelihood improves by less than `opts.tol`.
pub fn fit_gmm(x: ArrayView2<f64>, g: usize, seed: u64, opts: EmOptions) -> Result<GmmFit> {
    let (n, d) = x.dim();
    if g == 0 {
        return Err(Error::InvalidParameter("gmm needs at least one component".into()));
    }
    if n < g {
        return Err(Error::TooFewSamples { needed: g, got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gmm features"));
    }
    let (mean, var) = sample_moments(x);
    if g == 1 {
        let gmm = Gmm::new(vec![1.0], vec![DiagGaussian::new(mean, var)?])?;
        let ll = gmm.log_likelihood(x) / n as f64;
        return Ok(GmmFit { gmm, log_likelihood: vec![ll], iterations: 0, status: FitStatus::Converged });
    }
    let first = x.row(0);
    let degenerate = x.outer_iter().all(|r| r == first);

    let mut rng = seed::derived_rng(seed, "kmeans++", &[]);
    let centers = kmeanspp(x, g, &mut rng);
    let mut weights = vec![1.0 / g as f64; g];
    let mut comps: Vec<DiagGaussian> = centers
        .iter()
        .map(|&c| DiagGaussian { mean: x.row(c).to_owned(), var: var.mapv(|v| v.max(VARIANCE_FLOOR)) })
        .collect();

    let mut trace = Vec::new();
    let mut resp = Array2::<f64>::zeros((n, g));
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for (i, row) in x.outer_iter().enumerate() {
            let logs: Vec<f64> = weights.iter().zip(&comps).map(|(&w, c)| w.ln() + c.log_density(row)).collect();
            let lse = log_sum_exp(logs.iter().copied());
            ll += lse;
            for (k, l) in logs.iter().enumerate() {
                resp[[i, k]] = (l - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if let Some(&prev) = trace.last() {
            if ll - prev < opts.tol {
                trace.push(ll);
                status = FitStatus::Converged;
                break;
            }
        }
        trace.push(ll);
        iterations += 1;
        // M-step
        let nk = resp.sum_axis(Axis(0));
        let total: f64 = nk.sum();
        for k in 0..g {
            weights[k] = nk[k] / total;
            if nk[k] <= f64::MIN_POSITIVE {
                continue;
            }
            let r = resp.column(k);
            let mu = x.t().dot(&r) / nk[k];
            let mut v = Array1::<f64>::zeros(d);
            for (row, &ri) in x.outer_iter().zip(r.iter()) {
                for t in 0..d {
                    v[t] += ri * (row[t] - mu[t]).powi(2);
                }
            }
            comps[k] = DiagGaussian { mean: mu, var: (v / nk[k]).mapv(|s| s.max(VARIANCE_FLOOR)) };
        }
    }
    if degenerate {
        status = FitStatus::Degenerate;
        log::warn!("gmm fit on {n} identical rows with {g} components; variances floored");
    }
    let gmm = Gmm::new(weights, comps)?;
    Ok(GmmFit { gmm, log_likelihood: trace, iterations, status })
}
