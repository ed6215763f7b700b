//! One-shot data-distribution similarity between clients.
//!
//! Each client summarizes every category of its (featurized) training data
//! with a small diagonal GMM. The server compares two clients by building the
//! category-by-category mixture-Wasserstein cost matrix, transporting the
//! clients' class masses across it, and mapping the transport cost `D` to an
//! affinity `exp(-D/σ)`.

pub mod gmm;
pub mod ot;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm, DiagGaussian, EmOptions, FitStatus, Gmm, GmmFit, VARIANCE_FLOOR};
pub use ot::{exact_transport, sinkhorn, sinkhorn_scaled, transport, TransportPlan, EXACT_LP_MAX_CELLS};

use crate::error::{Error, Result};
use crate::seed;

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `‖μa − μb‖² + Σ (√va − √vb)²`.
pub fn gaussian_w2_sq(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "gaussian dimension",
            expected: a.dim().to_string(),
            got: b.dim().to_string(),
        });
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let cov: f64 = a.var.iter().zip(&b.var).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    Ok(mean + cov)
}

/// Mixture-Wasserstein distance: the square root of the optimal discrete
/// transport cost between component weights under `gaussian_w2_sq`.
pub fn gmm_w2(ga: &Gmm, gb: &Gmm) -> Result<f64> {
    if ga.dim() != gb.dim() {
        return Err(Error::ShapeMismatch {
            context: "gmm dimension",
            expected: ga.dim().to_string(),
            got: gb.dim().to_string(),
        });
    }
    let mut cost = Array2::<f64>::zeros((ga.len(), gb.len()));
    for (i, ca) in ga.components.iter().enumerate() {
        for (j, cb) in gb.components.iter().enumerate() {
            cost[[i, j]] = gaussian_w2_sq(ca, cb)?;
        }
    }
    let wa = Array1::from(ga.weights.clone());
    let wb = Array1::from(gb.weights.clone());
    let plan = if cost.len() <= EXACT_LP_MAX_CELLS {
        exact_transport(cost.view(), wa.view(), wb.view())?
    } else {
        // zero-weight components would break the log-domain solver
        let wa = wa.mapv(|w| w.max(1e-300));
        let wb = wb.mapv(|w| w.max(1e-300));
        let (wa, wb) = (&wa / wa.sum(), &wb / wb.sum());
        let eps = 1e-3 * cost.mean().unwrap_or(1.0).max(1e-12);
        sinkhorn_scaled(cost.view(), wa.view(), wb.view(), eps, 10_000, 1e-9)?
    };
    Ok(plan.cost.max(0.0).sqrt())
}

/// Per-category mixtures and class masses for one client. This is the only
/// data summary a client ever uploads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSet {
    pub categories: BTreeMap<usize, Gmm>,
    pub masses: BTreeMap<usize, f64>,
}

impl GmmSet {
    pub fn new(categories: BTreeMap<usize, Gmm>, masses: BTreeMap<usize, f64>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Empty("gmm set"));
        }
        if categories.keys().ne(masses.keys()) {
            return Err(Error::InvalidParameter("gmm set categories and masses differ".into()));
        }
        let total: f64 = masses.values().sum();
        if masses.values().any(|&m| !(m > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMarginal(format!("category masses sum to {total}")));
        }
        let d = categories.values().next().expect("non-empty").dim();
        if categories.values().any(|g| g.dim() != d) {
            return Err(Error::InvalidParameter("gmm set mixes feature dimensions".into()));
        }
        Ok(Self { categories, masses })
    }

    pub fn dim(&self) -> usize {
        self.categories.values().next().expect("non-empty").dim()
    }

    pub fn mass_vector(&self) -> Array1<f64> {
        self.masses.values().copied().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: GmmSet = serde_json::from_str(s)?;
        GmmSet::new(set.categories, set.masses)
    }

    /// Number of `f64` values in the serialized summary.
    pub fn parameter_count(&self) -> usize {
        self.categories
            .values()
            .map(|g| g.len() * (1 + 2 * g.dim()))
            .sum::<usize>()
            + self.masses.len()
    }
}

/// Fit one GMM per category present in `labels`. Categories with fewer
/// than `components` samples get as many components as they have samples.
pub fn fit_gmm_set(features: ArrayView2<f64>, labels: &[usize], components: usize, seed: u64, opts: EmOptions) -> Result<GmmSet> {
    if labels.is_empty() {
        return Err(Error::Empty("client features"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let n = labels.len() as f64;
    let mut categories = BTreeMap::new();
    let mut masses = BTreeMap::new();
    for (class, rows) in by_class {
        let x = features.select(Axis(0), &rows);
        let g = components.min(rows.len()).max(1);
        let fit = fit_gmm(x.view(), g, seed::derive(seed, "gmm-class", &[class as u64]), opts)?;
        categories.insert(class, fit.gmm);
        masses.insert(class, rows.len() as f64 / n);
    }
    GmmSet::new(categories, masses)
}

/// Category-level cost matrix `GW` between two clients.
pub fn category_costs(gi: &GmmSet, gj: &GmmSet) -> Result<Array2<f64>> {
    let mut cost = Array2::<f64>::zeros((gi.categories.len(), gj.categories.len()));
    for (r, a) in gi.categories.values().enumerate() {
        for (c, b) in gj.categories.values().enumerate() {
            cost[[r, c]] = gmm_w2(a, b)?;
        }
    }
    Ok(cost)
}

/// Sinkhorn regularization used when the category problem is too large for the exact solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportOptions {
    /// `ε = eps_factor · mean(GW)`.
    pub eps_factor: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self { eps_factor: 0.05 }
    }
}

/// Optimal transport cost `D = Σ γ*_cd GW_cd` between two clients' GMM sets.
pub fn transport_cost(gi: &GmmSet, gj: &GmmSet, opts: TransportOptions) -> Result<f64> {
    if gi.dim() != gj.dim() {
        return Err(Error::ShapeMismatch {
            context: "gmm set dimension",
            expected: gi.dim().to_string(),
            got: gj.dim().to_string(),
        });
    }
    let cost = category_costs(gi, gj)?;
    let eps = opts.eps_factor * cost.mean().unwrap_or(0.0).max(1e-12);
    let plan = transport(cost.view(), gi.mass_vector().view(), gj.mass_vector().view(), eps)?;
    Ok(plan.cost.max(0.0))
}

/// `S^data = exp(−D/σ)` for one pair.
pub fn data_similarity(gi: &GmmSet, gj: &GmmSet, sigma: f64, opts: TransportOptions) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    Ok((-transport_cost(gi, gj, opts)? / sigma).exp())
}

/// How the bandwidth `σ` of the distance-to-affinity map is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median of the off-diagonal transport costs (1 when that median is 0).
    Median,
    Fixed(f64),
}

/// Pairwise transport costs and affinities for all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSimilarity {
    pub costs: Array2<f64>,
    pub sigma: f64,
    pub similarity: Array2<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Full `m×m` data-similarity matrix. Pairs `(i<j)` are computed in parallel
/// and assembled in a fixed order; the diagonal is 1.
pub fn data_similarity_matrix(sets: &[GmmSet], bandwidth: Bandwidth, opts: TransportOptions) -> Result<DataSimilarity> {
    use rayon::prelude::*;
    let m = sets.len();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let costs_flat = pairs
        .par_iter()
        .map(|&(i, j)| transport_cost(&sets[i], &sets[j], opts))
        .collect::<Result<Vec<f64>>>()?;
    let mut costs = Array2::<f64>::zeros((m, m));
    for (&(i, j), &c) in pairs.iter().zip(&costs_flat) {
        costs[[i, j]] = c;
        costs[[j, i]] = c;
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("kernel bandwidth must be positive, got {s}")));
            }
            s
        }
        Bandwidth::Median => match median(costs_flat) {
            Some(s) if s > 0.0 => s,
            _ => 1.0,
        },
    };
    let similarity = costs.mapv(|d| (-d / sigma).exp());
    Ok(DataSimilarity { costs, sigma, similarity })
}
