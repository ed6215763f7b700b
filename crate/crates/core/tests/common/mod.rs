//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use celora::config::ExperimentConfig;
use celora::federation::Federation;
use celora::seed;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>() * 2.0 - 1.0)
}

pub fn random_simplex(n: usize, rng: &mut seed::Rng) -> Array1<f64> {
    let v = Array1::from_shape_simple_fn(n, || 0.05 + rng.random::<f64>());
    let s = v.sum();
    v / s
}

/// Orthogonal matrix from Gram-Schmidt on a random square matrix.
pub fn random_orthogonal(n: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let m = random_matrix(n, n, rng);
    let mut q = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut v = m.column(j).to_owned();
        for i in 0..j {
            let qi = q.column(i).to_owned();
            v = &v - &(qi.dot(&v) * &qi);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

/// Solve `m·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &c| m[[a, col]].abs().total_cmp(&m[[c, col]].abs()))?;
        if m[[pivot, col]].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap([col, j], [pivot, j]);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            if f != 0.0 {
                for j in col..n {
                    m[[row, j]] -= f * m[[col, j]];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| m[[row, j]] * x[j]).sum();
        x[row] = (b[row] - s) / m[[row, row]];
    }
    Some(x)
}

fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        if n - i < k - cur.len() {
            break;
        }
        cur.push(i);
        combinations(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// Minimum transport cost by enumerating every basic feasible solution.
pub fn brute_force_transport(cost: &Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>) -> f64 {
    let (p, q) = cost.dim();
    let basis = p + q - 1;
    let mut subsets = Vec::new();
    combinations(p * q, basis, 0, &mut Vec::new(), &mut subsets);
    let mut best = f64::INFINITY;
    for cells in subsets {
        // row-sum constraints for every row, column-sum constraints for all but the last column
        let mut m = Array2::<f64>::zeros((basis, basis));
        let mut b = Array1::<f64>::zeros(basis);
        for i in 0..p {
            b[i] = mu[i];
        }
        for j in 0..q - 1 {
            b[p + j] = nu[j];
        }
        for (v, &cell) in cells.iter().enumerate() {
            let (i, j) = (cell / q, cell % q);
            m[[i, v]] = 1.0;
            if j < q - 1 {
                m[[p + j, v]] = 1.0;
            }
        }
        let Some(x) = solve(m, b) else { continue };
        if x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut plan = Array2::<f64>::zeros((p, q));
        for (v, &cell) in cells.iter().enumerate() {
            plan[[cell / q, cell % q]] = x[v].max(0.0);
        }
        let cols = plan.sum_axis(Axis(0));
        if (cols[q - 1] - nu[q - 1]).abs() > 1e-9 {
            continue;
        }
        let c: f64 = plan.iter().zip(cost.iter()).map(|(a, b)| a * b).sum();
        best = best.min(c);
    }
    best
}

/// Parse a TOML config, panicking on error.
pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text, &[]).expect("test config is valid")
}

/// Global `(A, B)` per layer after each round of plain two-factor LoRA with
/// FedAvg, started from the same data and initialization as `fed`.
pub fn vanilla_lora_reference(fed: &Federation, rounds: usize) -> Vec<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let cfg = &fed.config;
    let layers0 = &fed.clients[0].model.layers;
    let w: Vec<Array2<f64>> = layers0.iter().map(|l| l.base().clone()).collect();
    let mut a_glob: Vec<Array2<f64>> = layers0.iter().map(|l| l.a.clone()).collect();
    let mut b_glob: Vec<Array2<f64>> = layers0.iter().map(|l| Array2::zeros(l.b.dim())).collect();
    let nl = w.len();
    let lr = cfg.train.learning_rate;
    let mut history = Vec::new();
    for t in 1..=rounds {
        let mut local = Vec::new();
        for (i, c) in fed.clients.iter().enumerate() {
            let (mut a, mut b) = (a_glob.clone(), b_glob.clone());
            let mut rng = seed::rng(seed::derive(cfg.seed, "train", &[i as u64, t as u64]));
            let n = c.train_y.len();
            for _ in 0..cfg.train.epochs_per_round {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.train.batch_size) {
                    let x = c.train_x.select(Axis(0), batch);
                    let y: Vec<usize> = batch.iter().map(|&j| c.train_y[j]).collect();
                    // forward
                    let mut acts = vec![x];
                    for l in 0..nl {
                        let h = &acts[l];
                        let mut z = h.dot(&w[l]) + h.dot(&a[l]).dot(&b[l]);
                        if l + 1 < nl {
                            z.mapv_inplace(f64::tanh);
                        }
                        acts.push(z);
                    }
                    // softmax cross-entropy
                    let logits = &acts[nl];
                    let bs = y.len() as f64;
                    let mut g = Array2::<f64>::zeros(logits.dim());
                    for (r, row) in logits.outer_iter().enumerate() {
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                        for k in 0..row.len() {
                            let p = (row[k] - lse).exp();
                            g[[r, k]] = (p - f64::from(u8::from(k == y[r]))) / bs;
                        }
                    }
                    // backward, then update all layers
                    let mut grads = Vec::new();
                    for l in (0..nl).rev() {
                        let h = &acts[l];
                        let gb = g.dot(&b[l].t());
                        let da = h.t().dot(&gb);
                        let db = h.dot(&a[l]).t().dot(&g);
                        if l > 0 {
                            let dh = g.dot(&w[l].t()) + gb.dot(&a[l].t());
                            g = dh * &h.mapv(|v| 1.0 - v * v);
                        }
                        grads.push((l, da, db));
                    }
                    for (l, da, db) in grads {
                        a[l] = &a[l] - &(lr * &da);
                        b[l] = &b[l] - &(lr * &db);
                    }
                }
            }
            local.push((a, b, n as f64));
        }
        let total: f64 = local.iter().map(|x| x.2).sum();
        for l in 0..nl {
            let mut sa = Array2::<f64>::zeros(a_glob[l].dim());
            let mut sb = Array2::<f64>::zeros(b_glob[l].dim());
            for (a, b, n) in &local {
                sa = sa + *n * &a[l];
                sb = sb + *n * &b[l];
            }
            a_glob[l] = sa / total;
            b_glob[l] = sb / total;
        }
        history.push((a_glob.clone(), b_glob.clone()));
    }
    history
}
