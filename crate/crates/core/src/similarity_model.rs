//! Model similarity between clients' uploaded core matrices via linear CKA.
//!
//! A shared probe set `X` (seeded Gaussian `r`-vectors) is pushed through
//! each `C`; the linear kernels of the outputs are compared with HSIC.

use ndarray::{Array2, ArrayView2};

use crate::adapter::standard_normal_matrix;
use crate::error::{shape_err, Error, Result};
use crate::seed;

/// Self-HSIC values below this are treated as a degenerate kernel.
pub const DEGENERATE_HSIC: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub x: Array2<f64>,
    pub seed: u64,
}

impl ProbeSet {
    pub fn new(n_probe: usize, rank: usize, seed: u64) -> Result<Self> {
        if n_probe < 2 || rank == 0 {
            return Err(Error::InvalidParameter(format!("probe set needs n >= 2 and r >= 1 (got {n_probe}, {rank})")));
        }
        let mut rng = seed::derived_rng(seed, "cka-probe", &[]);
        Ok(Self { x: standard_normal_matrix(n_probe, rank, &mut rng), seed })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// `K = (X·C)(X·C)ᵀ`.
pub fn probe_kernel(c: ArrayView2<f64>, probe: &ProbeSet) -> Result<Array2<f64>> {
    let r = probe.x.ncols();
    if c.dim() != (r, r) {
        return Err(shape_err("core matrix", (r, r), c.dim()));
    }
    let y = probe.x.dot(&c);
    Ok(y.dot(&y.t()))
}

/// `H·K·H` with `H = I − 11ᵀ/n`.
pub fn center(k: ArrayView2<f64>) -> Array2<f64> {
    let n = k.nrows() as f64;
    let row_means = k.mean_axis(ndarray::Axis(1)).expect("non-empty");
    let col_means = k.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let grand = row_means.sum() / n;
    Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] - row_means[i] - col_means[j] + grand)
}

fn check_pair(ka: ArrayView2<f64>, kb: ArrayView2<f64>) -> Result<()> {
    let n = ka.nrows();
    if ka.ncols() != n || kb.dim() != (n, n) {
        return Err(shape_err("kernel pair", ka.dim(), kb.dim()));
    }
    if n < 2 {
        return Err(Error::InvalidParameter("hsic needs n >= 2".into()));
    }
    Ok(())
}

/// `tr(Ka·H·Kb·H)`, evaluated as `⟨H·Ka·H, Kb⟩_F` (valid for symmetric `Kb`).
pub fn hsic(ka: ArrayView2<f64>, kb: ArrayView2<f64>) -> Result<f64> {
    check_pair(ka, kb)?;
    Ok(frobenius(center(ka).view(), kb))
}

fn frobenius(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CkaOutcome {
    Value(f64),
    /// One of the kernels has (numerically) zero self-HSIC.
    Degenerate,
}

impl CkaOutcome {
    /// Similarity with the degenerate case mapped to 0.
    pub fn or_zero(self) -> f64 {
        match self {
            CkaOutcome::Value(v) => v,
            CkaOutcome::Degenerate => 0.0,
        }
    }
}

/// Pre-centered kernel of one client's `C`, reused across all its pairs.
#[derive(Debug, Clone)]
pub struct CenteredKernel {
    kernel: Array2<f64>,
    centered: Array2<f64>,
    self_hsic: f64,
}

impl CenteredKernel {
    pub fn new(c: ArrayView2<f64>, probe: &ProbeSet) -> Result<Self> {
        let kernel = probe_kernel(c, probe)?;
        let centered = center(kernel.view());
        let self_hsic = frobenius(centered.view(), kernel.view());
        Ok(Self { kernel, centered, self_hsic })
    }
}

/// Unclamped CKA value, for checking rounding excursions.
pub fn cka_raw(a: &CenteredKernel, b: &CenteredKernel) -> CkaOutcome {
    if a.self_hsic < DEGENERATE_HSIC || b.self_hsic < DEGENERATE_HSIC {
        return CkaOutcome::Degenerate;
    }
    // average both evaluation orders so the result is exactly symmetric
    let cross = 0.5 * (frobenius(a.centered.view(), b.kernel.view()) + frobenius(b.centered.view(), a.kernel.view()));
    CkaOutcome::Value(cross / (a.self_hsic * b.self_hsic).sqrt())
}

pub fn cka_kernels(a: &CenteredKernel, b: &CenteredKernel) -> CkaOutcome {
    match cka_raw(a, b) {
        CkaOutcome::Value(v) => CkaOutcome::Value(v.clamp(0.0, 1.0)),
        d => d,
    }
}

/// Linear CKA between two core matrices under a shared probe set.
pub fn cka(ci: ArrayView2<f64>, cj: ArrayView2<f64>, probe: &ProbeSet) -> Result<CkaOutcome> {
    Ok(cka_kernels(&CenteredKernel::new(ci, probe)?, &CenteredKernel::new(cj, probe)?))
}

/// `S^model` for all clients: per-layer CKA averaged uniformly over layers.
/// `cores[i][l]` is client `i`'s `C` for layer `l`. Degenerate pairs count as 0.
pub fn model_similarity_matrix(cores: &[Vec<Array2<f64>>], probe: &ProbeSet) -> Result<Array2<f64>> {
    use rayon::prelude::*;
    let m = cores.len();
    let layers = cores.first().map_or(0, Vec::len);
    if cores.iter().any(|c| c.len() != layers) || layers == 0 {
        return Err(Error::InvalidParameter("clients upload different numbers of core matrices".into()));
    }
    let kernels = cores
        .par_iter()
        .map(|cs| cs.iter().map(|c| CenteredKernel::new(c.view(), probe)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let sum: f64 = (0..layers).map(|l| cka_kernels(&kernels[i][l], &kernels[j][l]).or_zero()).sum();
            sum / layers as f64
        })
        .collect();
    let mut s = Array2::<f64>::zeros((m, m));
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        s[[i, j]] = v;
        s[[j, i]] = v;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernel_hand_cases() {
        let probe = ProbeSet { x: array![[1.0], [3.0]], seed: 0 };
        assert_eq!(probe_kernel(array![[2.0]].view(), &probe).unwrap(), array![[4.0, 12.0], [12.0, 36.0]]);
        assert_eq!(probe_kernel(array![[0.0]].view(), &probe).unwrap(), Array2::<f64>::zeros((2, 2)));
        let p = ProbeSet::new(5, 3, 1).unwrap();
        let k = probe_kernel(Array2::<f64>::eye(3).view(), &p).unwrap();
        assert_eq!(k, p.x.dot(&p.x.t()));
        assert!(probe_kernel(Array2::<f64>::eye(2).view(), &p).is_err());
    }

    #[test]
    fn hsic_of_centering_matrix() {
        let n = 3;
        let h = Array2::<f64>::eye(n) - Array2::<f64>::from_elem((n, n), 1.0 / n as f64);
        assert!((hsic(h.view(), h.view()).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(hsic(Array2::<f64>::zeros((3, 3)).view(), h.view()).unwrap(), 0.0);
        assert!(hsic(h.view(), Array2::<f64>::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn degenerate_core() {
        let p = ProbeSet::new(16, 2, 3).unwrap();
        let out = cka(Array2::<f64>::zeros((2, 2)).view(), Array2::<f64>::eye(2).view(), &p).unwrap();
        assert_eq!(out, CkaOutcome::Degenerate);
        assert_eq!(out.or_zero(), 0.0);
    }

    #[test]
    fn probe_is_seed_determined() {
        assert_eq!(ProbeSet::new(8, 3, 42).unwrap(), ProbeSet::new(8, 3, 42).unwrap());
        assert_ne!(ProbeSet::new(8, 3, 42).unwrap(), ProbeSet::new(8, 3, 43).unwrap());
        assert!(ProbeSet::new(1, 3, 42).is_err());
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let p = ProbeSet::new(32, 2, 5).unwrap();
        let cores = vec![
            vec![array![[1.0, 0.2], [0.0, 1.0]]],
            vec![array![[0.3, 1.0], [1.0, 0.1]]],
            vec![array![[2.0, 0.0], [0.5, 0.5]]],
        ];
        let s = model_similarity_matrix(&cores, &p).unwrap();
        for i in 0..3 {
            assert!((s[[i, i]] - 1.0).abs() < 1e-10);
            for j in 0..3 {
                assert_eq!(s[[i, j]], s[[j, i]]);
                assert!((0.0..=1.0).contains(&s[[i, j]]));
            }
        }
    }
}
