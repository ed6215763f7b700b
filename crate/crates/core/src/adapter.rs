//! Tri-factorized low-rank adapter `W + A·C·B` for a frozen linear layer.
//!
//! `A` is `d×r`, `C` is `r×r` and `B` is `r×k`. Only the small core `C` is
//! exchanged with the server; `A` and `B` stay on the client.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::seed;

/// Trainable tri-factor adapter around a frozen base matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TriLoraAdapter {
    w: Array2<f64>,
    pub a: Array2<f64>,
    pub c: Array2<f64>,
    pub b: Array2<f64>,
}

/// Gradients of a scalar loss with respect to the three trainable factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub da: Array2<f64>,
    pub dc: Array2<f64>,
    pub db: Array2<f64>,
}

/// Which factors an optimizer step is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub a: bool,
    pub c: bool,
    pub b: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { a: true, c: true, b: true };
    /// Two-factor LoRA: `C` pinned.
    pub const AB: Trainable = Trainable { a: true, c: false, b: true };
    pub const B_ONLY: Trainable = Trainable { a: false, c: false, b: true };
}

fn check_rank(d: usize, k: usize, r: usize) -> Result<()> {
    if d == 0 || k == 0 || r == 0 || r >= d.min(k) {
        return Err(Error::InvalidRank { d, k, r });
    }
    Ok(())
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut seed::Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std is positive and finite");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub(crate) fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Build an adapter with a seeded frozen base `W ~ N(0, 1/d)` and the
/// standard zero-delta initialization (see [`TriLoraAdapter::with_base`]).
pub fn init_adapter(d: usize, k: usize, r: usize, seed: u64) -> Result<TriLoraAdapter> {
    check_rank(d, k, r)?;
    let mut rng = seed::derived_rng(seed, "adapter-base", &[]);
    let w = gaussian_matrix(d, k, 1.0 / (d as f64).sqrt(), &mut rng);
    TriLoraAdapter::with_base(w, r, seed)
}

impl TriLoraAdapter {
    /// Wrap a frozen base matrix. `A` gets seeded Gaussian entries with
    /// standard deviation `1/√r`, `C = I`, `B = 0`, so the delta starts at zero.
    pub fn with_base(w: Array2<f64>, r: usize, seed: u64) -> Result<Self> {
        let (d, k) = w.dim();
        check_rank(d, k, r)?;
        let mut rng = seed::derived_rng(seed, "adapter-a", &[]);
        let a = gaussian_matrix(d, r, 1.0 / (r as f64).sqrt(), &mut rng);
        Ok(Self {
            w,
            a,
            c: Array2::eye(r),
            b: Array2::zeros((r, k)),
        })
    }

    /// Assemble an adapter from explicit factors, validating every shape.
    pub fn from_parts(w: Array2<f64>, a: Array2<f64>, c: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        let (d, k) = w.dim();
        let r = c.nrows();
        if c.ncols() != r {
            return Err(shape_err("C", (r, r), c.dim()));
        }
        if r == 0 || d == 0 || k == 0 {
            return Err(Error::InvalidRank { d, k, r });
        }
        if a.dim() != (d, r) {
            return Err(shape_err("A", (d, r), a.dim()));
        }
        if b.dim() != (r, k) {
            return Err(shape_err("B", (r, k), b.dim()));
        }
        Ok(Self { w, a, c, b })
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn rank(&self) -> usize {
        self.c.nrows()
    }

    /// The frozen base matrix.
    pub fn base(&self) -> &Array2<f64> {
        &self.w
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.d() {
            return Err(shape_err("adapter input", (x.nrows(), self.d()), x.dim()));
        }
        Ok(())
    }

    /// `X·W + ((X·A)·C)·B`, never forming the `d×k` delta.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let xa = x.dot(&self.a);
        let xac = xa.dot(&self.c);
        Ok(x.dot(&self.w) + xac.dot(&self.b))
    }

    /// Factor gradients for upstream gradient `g = ∂L/∂H`:
    /// `dA = Xᵀ·G·Bᵀ·Cᵀ`, `dC = Aᵀ·Xᵀ·G·Bᵀ`, `dB = Cᵀ·Aᵀ·Xᵀ·G`.
    pub fn backward(&self, x: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<AdapterGradients> {
        self.check_input(&x)?;
        if g.dim() != (x.nrows(), self.k()) {
            return Err(shape_err("upstream gradient", (x.nrows(), self.k()), g.dim()));
        }
        let xa = x.dot(&self.a); // n×r
        let xac = xa.dot(&self.c); // n×r
        let gbt = g.dot(&self.b.t()); // n×r
        let db = xac.t().dot(&g);
        let dc = xa.t().dot(&gbt);
        let da = x.t().dot(&gbt.dot(&self.c.t()));
        Ok(AdapterGradients { da, dc, db })
    }

    /// Gradient with respect to the layer input: `G·Wᵀ + G·Bᵀ·Cᵀ·Aᵀ`.
    pub fn input_grad(&self, g: ArrayView2<f64>) -> Result<Array2<f64>> {
        if g.ncols() != self.k() {
            return Err(shape_err("upstream gradient", (g.nrows(), self.k()), g.dim()));
        }
        let low = g.dot(&self.b.t()).dot(&self.c.t());
        Ok(g.dot(&self.w.t()) + low.dot(&self.a.t()))
    }

    /// `A·C·B` as a dense `d×k` matrix.
    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.c).dot(&self.b)
    }

    /// Fine-tuned weight for inference: `W + A·C·B`.
    pub fn merge(&self) -> Array2<f64> {
        &self.w + &self.delta()
    }

    /// Plain SGD step on the factors enabled in `mask`.
    pub fn sgd_step(&mut self, grads: &AdapterGradients, lr: f64, mask: Trainable) {
        if mask.a {
            self.a.scaled_add(-lr, &grads.da);
        }
        if mask.c {
            self.c.scaled_add(-lr, &grads.dc);
        }
        if mask.b {
            self.b.scaled_add(-lr, &grads.db);
        }
    }
}

/// Shapes of every adapted matrix in a model, used for communication accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShapeConfig {
    /// Number of adapted matrices `L`.
    pub layers: usize,
    pub rank: usize,
    /// Input dimension of each adapted matrix (one value shared by all, or `layers` values).
    pub d: Vec<usize>,
    /// Output dimension of each adapted matrix.
    pub k: Vec<usize>,
}

impl ModelShapeConfig {
    pub fn uniform(layers: usize, d: usize, k: usize, rank: usize) -> Self {
        Self { layers, rank, d: vec![d], k: vec![k] }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.rank == 0 {
            return bad("layers and rank must be positive".into());
        }
        for (name, v) in [("d", &self.d), ("k", &self.k)] {
            if v.len() != 1 && v.len() != self.layers {
                return bad(format!("{name} must have 1 or {} entries, got {}", self.layers, v.len()));
            }
            if v.iter().any(|&x| x == 0) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        Ok(())
    }

    /// `(d_l, k_l)` for every adapted matrix.
    pub fn dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.layers).map(move |l| {
            let d = if self.d.len() == 1 { self.d[0] } else { self.d[l] };
            let k = if self.k.len() == 1 { self.k[0] } else { self.k[l] };
            (d, k)
        })
    }
}

/// Parameters transmitted per client per round under each scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub fedpetuning: u64,
    pub ffa: u64,
    pub ce_lora: u64,
}

pub fn param_counts(cfg: &ModelShapeConfig) -> ParamCounts {
    let r = cfg.rank as u64;
    let (mut full, mut ffa) = (0u64, 0u64);
    for (d, k) in cfg.dims() {
        full += r * (d as u64 + k as u64);
        ffa += r * k as u64;
    }
    ParamCounts {
        fedpetuning: full,
        ffa,
        ce_lora: cfg.layers as u64 * r * r,
    }
}

/// `part / whole` as a percentage with two decimals, e.g. `"0.10%"`.
pub fn format_percent(part: u64, whole: u64) -> String {
    if whole == 0 {
        return "n/a".into();
    }
    format!("{:.2}%", 100.0 * part as f64 / whole as f64)
}

/// Three significant digits in `m.mm × 10^e` form, e.g. `"4.19 × 10^6"`.
pub fn format_scientific(n: u64) -> String {
    if n == 0 {
        return "0".into();
    }
    let formatted = format!("{:.2e}", n as f64);
    let (mantissa, exp) = formatted.split_once('e').expect("exponent present");
    format!("{mantissa} × 10^{exp}")
}
