//! Server-side aggregation: similarity-weighted personalized averaging of
//! core matrices, and the sample-weighted FedAvg / FFA baselines.

use ndarray::Array2;

use crate::error::{shape_err, Error, Result};

/// Client affinities. `total = data + model_weight · model`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub data: Array2<f64>,
    pub model: Array2<f64>,
    pub total: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn combine(data: Array2<f64>, model: Array2<f64>, model_weight: f64) -> Result<Self> {
        if data.dim() != model.dim() || data.nrows() != data.ncols() {
            return Err(shape_err("similarity", data.dim(), model.dim()));
        }
        let total = &data + &(model_weight * &model);
        Ok(Self { data, model, total })
    }

    pub fn clients(&self) -> usize {
        self.total.nrows()
    }
}

/// Row-stochastic aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPlan {
    pub weights: Array2<f64>,
}

/// `w_ij = S_ij / Σ_{j≠i} S_ij` with a zero diagonal.
pub fn build_plan(s: &Array2<f64>) -> Result<AggregationPlan> {
    build_plan_with(s, false)
}

/// As [`build_plan`]; `include_self` keeps the diagonal term (ablation only).
pub fn build_plan_with(s: &Array2<f64>, include_self: bool) -> Result<AggregationPlan> {
    let m = s.nrows();
    if s.ncols() != m {
        return Err(shape_err("similarity", (m, m), s.dim()));
    }
    let mut weights = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        let cols = (0..m).filter(|&j| include_self || j != i);
        let mut total = 0.0;
        for j in cols.clone() {
            let v = s[[i, j]];
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("similarity ({i},{j}) = {v} must be finite and non-negative")));
            }
            total += v;
        }
        if !(total > 0.0) {
            return Err(Error::AllZeroRow { row: i });
        }
        for j in cols {
            weights[[i, j]] = s[[i, j]] / total;
        }
    }
    Ok(AggregationPlan { weights })
}

/// `C̄_i = Σ_j w_ij C_j`, layer by layer. `cores[i][l]` is client `i`'s layer-`l` core.
pub fn personalized_aggregate(plan: &AggregationPlan, cores: &[Vec<Array2<f64>>]) -> Result<Vec<Vec<Array2<f64>>>> {
    let m = plan.weights.nrows();
    if cores.len() != m {
        return Err(Error::ShapeMismatch {
            context: "aggregation clients",
            expected: m.to_string(),
            got: cores.len().to_string(),
        });
    }
    let layers = cores.first().map_or(0, Vec::len);
    for c in cores {
        if c.len() != layers {
            return Err(Error::ShapeMismatch { context: "core stack", expected: layers.to_string(), got: c.len().to_string() });
        }
        for (l, mat) in c.iter().enumerate() {
            if mat.dim() != cores[0][l].dim() {
                return Err(shape_err("core matrix", cores[0][l].dim(), mat.dim()));
            }
        }
    }
    Ok((0..m)
        .map(|i| {
            (0..layers)
                .map(|l| {
                    let mut acc = Array2::<f64>::zeros(cores[0][l].dim());
                    for (j, c) in cores.iter().enumerate() {
                        let w = plan.weights[[i, j]];
                        if w != 0.0 {
                            acc.scaled_add(w, &c[l]);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect())
}

/// `Σ n_i M_i / Σ n_i` for one matrix per client.
pub fn weighted_average(mats: &[&Array2<f64>], counts: &[usize]) -> Result<Array2<f64>> {
    if mats.is_empty() || mats.len() != counts.len() {
        return Err(Error::ShapeMismatch {
            context: "sample counts",
            expected: mats.len().to_string(),
            got: counts.len().to_string(),
        });
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidParameter("total sample count is zero".into()));
    }
    let mut acc = Array2::<f64>::zeros(mats[0].dim());
    for (m, &c) in mats.iter().zip(counts) {
        if m.dim() != acc.dim() {
            return Err(shape_err("averaged matrix", acc.dim(), m.dim()));
        }
        acc.scaled_add(c as f64, m);
    }
    Ok(acc / n as f64)
}

/// FedPETuning-style aggregation of both LoRA factors.
pub fn fedavg_aggregate(a: &[&Array2<f64>], b: &[&Array2<f64>], counts: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((weighted_average(a, counts)?, weighted_average(b, counts)?))
}

/// FFA-LoRA aggregation: only `B` is averaged, `A` stays frozen on clients.
pub fn ffa_aggregate(b: &[&Array2<f64>], counts: &[usize]) -> Result<Array2<f64>> {
    weighted_average(b, counts)
}
