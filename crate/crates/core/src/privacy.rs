//! Gradient-inversion (DLG-style) attack harness.
//!
//! An attacker who knows the model weights, the batch shape and the labels
//! observes the gradient of the loss on one of three parameter surfaces and
//! searches for inputs whose gradient matches it. Comparing reconstruction
//! quality across surfaces shows how much each communicated quantity leaks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapter::{gaussian_matrix, standard_normal_matrix, TriLoraAdapter};
use crate::error::{Error, Result};
use crate::seed;
use crate::training::cross_entropy_loss;

/// Which parameter gradients the attacker observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    /// `A` and `B` (FedPETuning-style upload).
    FullLora,
    /// `B` only.
    Ffa,
    /// The `r×r` core only.
    COnly,
}

impl Surface {
    pub fn as_str(self) -> &'static str {
        match self {
            Surface::FullLora => "full_lora",
            Surface::Ffa => "ffa",
            Surface::COnly => "c_only",
        }
    }

    /// Length of the observed gradient vector for one `d×k` layer of rank `r`.
    pub fn observed_dim(self, d: usize, k: usize, r: usize) -> usize {
        match self {
            Surface::FullLora => r * (d + k),
            Surface::Ffa => r * k,
            Surface::COnly => r * r,
        }
    }
}

impl std::fmt::Display for Surface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub surface: Surface,
    pub steps: usize,
    /// Initial step size of the backtracking line search.
    pub attack_lr: f64,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub reconstructed: Array2<f64>,
    /// Gradient-matching objective before the first step and after each step.
    pub objective_trace: Vec<f64>,
    pub mse: f64,
    pub cosine: f64,
    pub failed_restarts: usize,
}

/// Gradients on `surface` for inputs `x`, flattened in a fixed order.
pub fn surface_gradient(model: &TriLoraAdapter, x: ArrayView2<f64>, labels: &[usize], surface: Surface) -> Result<Vec<f64>> {
    let logits = model.forward(x)?;
    let (_, g) = cross_entropy_loss(logits.view(), labels)?;
    let grads = model.backward(x, g.view())?;
    Ok(match surface {
        Surface::FullLora => grads.da.iter().chain(grads.db.iter()).copied().collect(),
        Surface::Ffa => grads.db.iter().copied().collect(),
        Surface::COnly => grads.dc.iter().copied().collect(),
    })
}

/// Objective `‖∇(x) − target‖²` and its gradient with respect to `x`.
fn objective_and_grad(
    model: &TriLoraAdapter,
    merged: &Array2<f64>,
    x: ArrayView2<f64>,
    labels: &[usize],
    surface: Surface,
    target: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let n = x.nrows() as f64;
    let logits = model.forward(x)?;
    let (_, g) = cross_entropy_loss(logits.view(), labels)?;
    let grads = model.backward(x, g.view())?;
    let (d, r, k) = (model.d(), model.rank(), model.k());
    let (a, c, b) = (&model.a, &model.c, &model.b);

    // Γ = ∂F/∂M with M = Xᵀ·G; each surface gradient is linear in M.
    let mut gamma = Array2::<f64>::zeros((d, k));
    let mut value = 0.0;
    let residual = |got: &Array2<f64>, want: &[f64]| -> Array2<f64> {
        Array2::from_shape_fn(got.dim(), |(i, j)| got[[i, j]] - want[i * got.ncols() + j])
    };
    match surface {
        Surface::FullLora => {
            let ra = residual(&grads.da, &target[..d * r]);
            let rb = residual(&grads.db, &target[d * r..]);
            value += ra.iter().chain(rb.iter()).map(|v| v * v).sum::<f64>();
            gamma = gamma + ra.dot(c).dot(b) + a.dot(c).dot(&rb);
        }
        Surface::Ffa => {
            let rb = residual(&grads.db, target);
            value += rb.iter().map(|v| v * v).sum::<f64>();
            gamma = gamma + a.dot(c).dot(&rb);
        }
        Surface::COnly => {
            let rc = residual(&grads.dc, target);
            value += rc.iter().map(|v| v * v).sum::<f64>();
            gamma = gamma + a.dot(&rc).dot(b);
        }
    }
    gamma *= 2.0;

    // ∇_x F = G·Γᵀ + (J ⊙-applied (X·Γ))·W_effᵀ / n, with J_s = diag(p_s) − p_s p_sᵀ.
    let probs = &g * n + &one_hot(labels, k);
    let u = x.dot(&gamma);
    let mut v = Array2::<f64>::zeros(u.dim());
    for ((p, us), mut vs) in probs.outer_iter().zip(u.outer_iter()).zip(v.outer_iter_mut()) {
        let pu = p.dot(&us);
        for j in 0..k {
            vs[j] = p[j] * (us[j] - pu);
        }
    }
    let grad_x = g.dot(&gamma.t()) + v.dot(&merged.t()) / n;
    Ok((value, grad_x))
}

fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

fn objective(model: &TriLoraAdapter, x: ArrayView2<f64>, labels: &[usize], surface: Surface, target: &[f64]) -> Result<f64> {
    let got = surface_gradient(model, x, labels, surface)?;
    Ok(got.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Gradient descent with Armijo backtracking from `x0`.
fn descend(
    model: &TriLoraAdapter,
    labels: &[usize],
    surface: Surface,
    target: &[f64],
    mut x: Array2<f64>,
    cfg: &AttackConfig,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let merged = model.merge();
    let (mut f, mut grad) = objective_and_grad(model, &merged, x.view(), labels, surface, target)?;
    let mut trace = vec![f];
    let mut step = cfg.attack_lr;
    for _ in 0..cfg.steps {
        if !f.is_finite() {
            return Err(Error::NonFinite("attack objective"));
        }
        let gnorm2: f64 = grad.iter().map(|v| v * v).sum();
        let mut accepted = false;
        if gnorm2 > 0.0 {
            for _ in 0..60 {
                let trial = &x - &(step * &grad);
                let ft = objective(model, trial.view(), labels, surface, target)?;
                if ft.is_finite() && ft <= f - 1e-4 * step * gnorm2 {
                    x = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
        }
        if accepted {
            let (nf, ng) = objective_and_grad(model, &merged, x.view(), labels, surface, target)?;
            f = nf;
            grad = ng;
            step = (step * 2.0).min(cfg.attack_lr * 1e3);
        }
        trace.push(f);
    }
    Ok((x, trace))
}

/// Reconstruct a batch from its observed surface gradient. `init` overrides
/// the seeded Gaussian starting point of every restart.
pub fn dlg_attack(
    model: &TriLoraAdapter,
    observed: &[f64],
    batch_shape: (usize, usize),
    labels: &[usize],
    truth: ArrayView2<f64>,
    cfg: &AttackConfig,
    init: Option<ArrayView2<f64>>,
) -> Result<AttackResult> {
    let (n, d) = batch_shape;
    if d != model.d() || labels.len() != n || truth.dim() != batch_shape {
        return Err(Error::ShapeMismatch {
            context: "attack batch",
            expected: format!("{n}x{}", model.d()),
            got: format!("{}x{}", truth.nrows(), truth.ncols()),
        });
    }
    let expected = cfg.surface.observed_dim(model.d(), model.k(), model.rank());
    if observed.len() != expected {
        return Err(Error::ShapeMismatch {
            context: "observed gradient",
            expected: expected.to_string(),
            got: observed.len().to_string(),
        });
    }
    if cfg.restarts == 0 || cfg.steps == 0 {
        return Err(Error::InvalidParameter("attack needs at least one restart and one step".into()));
    }
    let mut best: Option<(Array2<f64>, Vec<f64>)> = None;
    let mut failed = 0;
    for restart in 0..cfg.restarts {
        let x0 = match init {
            Some(x) => x.to_owned(),
            None => standard_normal_matrix(n, d, &mut seed::derived_rng(cfg.seed, "dlg-init", &[restart as u64])),
        };
        match descend(model, labels, cfg.surface, observed, x0, cfg) {
            Ok((x, trace)) => {
                let last = *trace.last().expect("non-empty");
                if !last.is_finite() {
                    failed += 1;
                    continue;
                }
                if best.as_ref().is_none_or(|(_, t)| last < *t.last().expect("non-empty")) {
                    best = Some((x, trace));
                }
            }
            Err(Error::NonFinite(_)) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    let (x, trace) = best.ok_or(Error::NonFinite("attack objective (all restarts failed)"))?;
    let diff = &x - &truth;
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
    let dot: f64 = x.iter().zip(truth.iter()).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = if nx > 0.0 && nt > 0.0 { (dot / (nx * nt)).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(AttackResult { reconstructed: x, objective_trace: trace, mse, cosine, failed_restarts: failed })
}

/// A mid-training attack target: every factor non-zero so all surfaces carry signal.
pub fn attack_model(d: usize, k: usize, r: usize, seed: u64) -> Result<TriLoraAdapter> {
    let mut rng = seed::derived_rng(seed, "attack-model", &[]);
    let w = gaussian_matrix(d, k, 1.0 / (d as f64).sqrt(), &mut rng);
    let a = gaussian_matrix(d, r, 1.0 / (r as f64).sqrt(), &mut rng);
    let c = Array2::<f64>::eye(r) + gaussian_matrix(r, r, 0.3, &mut rng);
    let b = gaussian_matrix(r, k, 1.0, &mut rng);
    TriLoraAdapter::from_parts(w, a, c, b)
}

/// One attack trial: seeded model, hidden batch and labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialRecord {
    pub surface: Surface,
    pub batch_size: usize,
    pub seed: u64,
    pub mse: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrialShape {
    pub input_dim: usize,
    pub classes: usize,
    pub rank: usize,
}

/// Run one trial. The model, batch and labels depend only on `(seed, batch_size)`,
/// so different surfaces attack the same hidden data.
pub fn run_trial(shape: TrialShape, surface: Surface, batch_size: usize, seed: u64, steps: usize, attack_lr: f64, restarts: usize) -> Result<TrialRecord> {
    let model = attack_model(shape.input_dim, shape.classes, shape.rank, seed)?;
    let mut rng = seed::derived_rng(seed, "attack-batch", &[batch_size as u64]);
    let x = standard_normal_matrix(batch_size, shape.input_dim, &mut rng);
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..shape.classes)).collect();
    let observed = surface_gradient(&model, x.view(), &labels, surface)?;
    let cfg = AttackConfig { surface, steps, attack_lr, restarts, seed: seed::derive(seed, "attack-restarts", &[batch_size as u64]) };
    let res = dlg_attack(&model, &observed, x.dim(), &labels, x.view(), &cfg, None)?;
    Ok(TrialRecord { surface, batch_size, seed, mse: res.mse, cosine: res.cosine })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub surface: Surface,
    pub batch_size: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_cosine: f64,
    pub std_cosine: f64,
    pub seeds: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and (population) standard deviation of mse and cosine per
/// `(surface, batch_size)`.
pub fn attack_report(results: &[TrialRecord]) -> Result<Vec<ReportRow>> {
    if results.is_empty() {
        return Err(Error::Empty("attack results"));
    }
    let mut groups: BTreeMap<(Surface, usize), Vec<&TrialRecord>> = BTreeMap::new();
    for r in results {
        groups.entry((r.surface, r.batch_size)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((surface, batch_size), rs)| {
            let (mean_mse, std_mse) = mean_std(&rs.iter().map(|r| r.mse).collect::<Vec<_>>());
            let (mean_cosine, std_cosine) = mean_std(&rs.iter().map(|r| r.cosine).collect::<Vec<_>>());
            ReportRow { surface, batch_size, mean_mse, std_mse, mean_cosine, std_cosine, seeds: rs.len() }
        })
        .collect())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("surface,batch_size,mean_mse,std_mse,mean_cosine,std_cosine,seeds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{}",
            r.surface, r.batch_size, r.mean_mse, r.std_mse, r.mean_cosine, r.std_cosine, r.seeds
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed_: u64, n: usize) -> (TriLoraAdapter, Array2<f64>, Vec<usize>) {
        let model = attack_model(6, 3, 2, seed_).unwrap();
        let x = standard_normal_matrix(n, 6, &mut seed::rng(seed_ + 100));
        let labels = (0..n).map(|i| i % 3).collect();
        (model, x, labels)
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for surface in [Surface::FullLora, Surface::Ffa, Surface::COnly] {
            let (model, x, labels) = setup(3, 2);
            let target = surface_gradient(&model, x.view(), &labels, surface).unwrap();
            let probe = standard_normal_matrix(2, 6, &mut seed::rng(8));
            let merged = model.merge();
            let (_, g) = objective_and_grad(&model, &merged, probe.view(), &labels, surface, &target).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                for j in 0..6 {
                    let mut p = probe.clone();
                    p[[i, j]] += h;
                    let mut m = probe.clone();
                    m[[i, j]] -= h;
                    let fd = (objective(&model, p.view(), &labels, surface, &target).unwrap()
                        - objective(&model, m.view(), &labels, surface, &target).unwrap())
                        / (2.0 * h);
                    assert!((fd - g[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()), "{surface} ({i},{j}): {fd} vs {}", g[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn oracle_initialization() {
        let (model, x, labels) = setup(5, 1);
        let observed = surface_gradient(&model, x.view(), &labels, Surface::FullLora).unwrap();
        let cfg = AttackConfig { surface: Surface::FullLora, steps: 5, attack_lr: 0.5, restarts: 1, seed: 1 };
        let res = dlg_attack(&model, &observed, x.dim(), &labels, x.view(), &cfg, Some(x.view())).unwrap();
        assert_eq!(res.objective_trace[0], 0.0);
        assert_eq!(res.mse, 0.0);
    }

    #[test]
    fn trace_is_non_increasing() {
        for surface in [Surface::FullLora, Surface::COnly] {
            let (model, x, labels) = setup(7, 2);
            let observed = surface_gradient(&model, x.view(), &labels, surface).unwrap();
            let cfg = AttackConfig { surface, steps: 50, attack_lr: 1.0, restarts: 2, seed: 3 };
            let res = dlg_attack(&model, &observed, x.dim(), &labels, x.view(), &cfg, None).unwrap();
            assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(res.objective_trace.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn observed_dimension_ordering() {
        for (d, k, r) in [(8, 3, 2), (16, 10, 4), (5, 4, 3)] {
            assert!(Surface::COnly.observed_dim(d, k, r) < Surface::Ffa.observed_dim(d, k, r));
            assert!(Surface::Ffa.observed_dim(d, k, r) < Surface::FullLora.observed_dim(d, k, r));
        }
    }

    #[test]
    fn report_statistics() {
        let rec = |s, b, mse| TrialRecord { surface: s, batch_size: b, seed: 0, mse, cosine: 0.5 };
        let one = attack_report(&[rec(Surface::COnly, 1, 2.0)]).unwrap();
        assert_eq!(one[0].mean_mse, 2.0);
        assert_eq!(one[0].std_mse, 0.0);
        let two = attack_report(&[rec(Surface::COnly, 1, 2.0), rec(Surface::COnly, 1, 2.0)]).unwrap();
        assert_eq!(two[0].std_mse, 0.0);
        assert_eq!(two[0].seeds, 2);
        let many: Vec<TrialRecord> = [Surface::COnly, Surface::FullLora]
            .iter()
            .flat_map(|&s| [1, 4].map(|b| rec(s, b, 1.0)))
            .collect();
        let rows = attack_report(&many).unwrap();
        assert_eq!(rows.len(), 4);
        let csv = report_csv(&rows);
        assert!(csv.starts_with("surface,batch_size,mean_mse,std_mse,mean_cosine,std_cosine,seeds\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(attack_report(&[]).is_err());
    }

    #[test]
    fn trials_are_deterministic() {
        let shape = TrialShape { input_dim: 6, classes: 3, rank: 2 };
        let a = run_trial(shape, Surface::COnly, 2, 11, 30, 1.0, 2).unwrap();
        let b = run_trial(shape, Surface::COnly, 2, 11, 30, 1.0, 2).unwrap();
        assert_eq!(a, b);
    }
}
