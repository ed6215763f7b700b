//! Datasets (synthetic blobs and CSV ingestion) and Dirichlet non-IID
//! partitioning across clients.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Labelled feature matrix. Labels are dense class ids in `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Original label text for each class id.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset labels",
                expected: features.nrows().to_string(),
                got: labels.len().to_string(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange { label, classes: class_count });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            label_names: (0..class_count).map(|c| c.to_string()).collect(),
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            label_names: self.label_names.clone(),
        }
    }

    /// Empirical class proportions over all `class_count` classes.
    pub fn class_proportions(&self) -> Vec<f64> {
        class_proportions(&self.labels, self.class_count)
    }

    /// Write as CSV with header `f0,..,f{d-1},label`. Floats use their
    /// shortest round-trip representation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, &label) in self.features.outer_iter().zip(&self.labels) {
            let mut line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            line.push(self.label_names[label].clone());
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn class_proportions(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; classes];
    for &l in labels {
        counts[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

/// Gaussian blobs around `classes` centers placed on a random sphere of radius `sep`.
/// Labels cycle `0,1,..,K-1` so classes are balanced to within one sample.
pub fn synth_blobs(classes: usize, n: usize, raw_dim: usize, sep: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes || raw_dim == 0 {
        return Err(Error::InvalidParameter(format!(
            "synth_blobs needs classes >= 2, n >= classes, raw_dim >= 1 (got {classes}, {n}, {raw_dim})"
        )));
    }
    if !(sep.is_finite() && noise.is_finite() && sep >= 0.0 && noise >= 0.0) {
        return Err(Error::InvalidParameter("sep and noise must be finite and non-negative".into()));
    }
    let mut rng = seed::derived_rng(seed, "blobs", &[]);
    let mut centers = Array2::<f64>::zeros((classes, raw_dim));
    for mut c in centers.outer_iter_mut() {
        loop {
            c.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = c.dot(&c).sqrt();
            if norm > 1e-12 {
                c.mapv_inplace(|v| v * sep / norm);
                break;
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Array2::<f64>::zeros((n, raw_dim));
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        let c = centers.row(labels[i]);
        for (x, &mu) in row.iter_mut().zip(c.iter()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = mu + noise * z;
        }
    }
    Dataset::new("blobs", features, labels, classes)
}

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Read a numeric CSV. Labels are remapped to `0..K` in order of first appearance.
pub fn load_csv(path: &Path, label_column: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| csv_err(&e))?;

    let label_idx = if has_header {
        let headers = reader.headers().map_err(|e| csv_err(&e))?.clone();
        if headers.is_empty() {
            return Err(Error::Parse { line: 1, message: "empty file".into() });
        }
        match label_column {
            LabelColumn::Index(i) if *i < headers.len() => *i,
            LabelColumn::Index(i) => return Err(Error::MissingLabelColumn(i.to_string())),
            LabelColumn::Name(name) => headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingLabelColumn(name.clone()))?,
        }
    } else {
        match label_column {
            LabelColumn::Index(i) => *i,
            LabelColumn::Name(name) => return Err(Error::MissingLabelColumn(name.clone())),
        }
    };

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(&e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if label_idx >= rec.len() {
            return Err(Error::MissingLabelColumn(label_idx.to_string()));
        }
        let w = rec.len() - 1;
        if *width.get_or_insert(w) != w {
            return Err(Error::Parse { line, message: format!("expected {} fields, got {}", width.unwrap() + 1, rec.len()) });
        }
        for (col, field) in rec.iter().enumerate() {
            if col == label_idx {
                let key = field.trim().to_string();
                let next = ids.len();
                let id = *ids.entry(key.clone()).or_insert_with(|| {
                    names.push(key);
                    next
                });
                labels.push(id);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::NonNumericFeature {
                    line,
                    column: col,
                    value: field.to_string(),
                })?;
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data rows".into() });
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, values.len() / n), values).expect("row widths checked");
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(name, features, labels, names.len())?;
    ds.label_names = names;
    Ok(ds)
}

fn csv_err(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { line, message: e.to_string() }
}

/// Dirichlet partition parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub min_samples_per_client: usize,
}

fn dirichlet(alpha: f64, m: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: the limit of Dir(α→0) is a random vertex
        let mut p = vec![0.0; m];
        p[rng.random_range(0..m)] = 1.0;
        p
    }
}

/// Per-class Dirichlet split. Returns one index list per client; every index
/// in `0..labels.len()` appears exactly once.
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let m = spec.clients;
    if m == 0 {
        return Err(Error::InvalidParameter("clients must be >= 1".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {}", spec.alpha)));
    }
    let n = labels.len();
    if n < m * spec.min_samples_per_client || n == 0 {
        return Err(Error::InfeasiblePartition { n, clients: m, min: spec.min_samples_per_client });
    }
    let classes = labels.iter().max().map_or(0, |&l| l + 1);
    let mut rng = seed::derived_rng(spec.seed, "partition", &[]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); m];
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let p = dirichlet(spec.alpha, m, &mut rng);
        let total = idx.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (client, &pj) in p.iter().enumerate() {
            cum += pj;
            let end = if client + 1 == m { total } else { ((cum * total as f64).round() as usize).clamp(start, total) };
            shards[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    // Starved clients take samples from the current largest shard.
    while let Some(poor) = (0..m).find(|&i| shards[i].len() < spec.min_samples_per_client) {
        let rich = (0..m).max_by_key(|&i| (shards[i].len(), std::cmp::Reverse(i))).expect("m >= 1");
        let moved = shards[rich].pop().expect("feasibility checked");
        shards[poor].push(moved);
    }
    for shard in &mut shards {
        shard.shuffle(&mut rng);
    }
    Ok(shards)
}

/// Mean L1 distance between each shard's class proportions and the global ones.
pub fn heterogeneity(labels: &[usize], shards: &[Vec<usize>]) -> f64 {
    let classes = labels.iter().max().map_or(0, |&l| l + 1);
    let global = class_proportions(labels, classes);
    let total: f64 = shards
        .iter()
        .map(|s| {
            let local: Vec<usize> = s.iter().map(|&i| labels[i]).collect();
            class_proportions(&local, classes).iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    total / shards.len().max(1) as f64
}

/// Split `indices` into a (train, test) pair with roughly `test_fraction`
/// held out. Both halves are non-empty whenever `indices.len() >= 2`.
pub fn train_test_split(indices: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx = indices.to_vec();
    let mut rng = seed::rng(seed);
    idx.shuffle(&mut rng);
    let n = idx.len();
    if n < 2 || test_fraction <= 0.0 {
        return (idx, Vec::new());
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// JSON `{client_id: [indices]}` for reproducibility audits.
pub fn partition_to_json(shards: &[Vec<usize>]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        shards.iter().enumerate().map(|(i, s)| (i.to_string(), serde_json::json!(s))).collect();
    serde_json::Value::Object(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(clients: usize, alpha: f64, seed: u64) -> PartitionSpec {
        PartitionSpec { clients, alpha, seed, min_samples_per_client: 2 }
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let shards = dirichlet_partition(&labels, &spec(1, 0.5, 3)).unwrap();
        assert_eq!(shards.len(), 1);
        let mut s = shards[0].clone();
        assert_ne!(s, (0..30).collect::<Vec<_>>());
        s.sort();
        assert_eq!(s, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn infeasible_partition() {
        let labels = vec![0, 1, 0];
        assert!(matches!(dirichlet_partition(&labels, &spec(2, 1.0, 0)), Err(Error::InfeasiblePartition { .. })));
    }

    #[test]
    fn large_alpha_tracks_global_proportions() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        for s in 0..10 {
            let shards = dirichlet_partition(&labels, &spec(4, 10000.0, s)).unwrap();
            for shard in &shards {
                let local: Vec<usize> = shard.iter().map(|&i| labels[i]).collect();
                let p = class_proportions(&local, 2);
                assert!((p[0] - 0.5).abs() <= 0.05, "seed {s}: {p:?}");
            }
        }
    }

    #[test]
    fn heterogeneity_decreases_with_alpha() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        let avg = |alpha: f64| {
            (0..20)
                .map(|s| heterogeneity(&labels, &dirichlet_partition(&labels, &spec(10, alpha, s)).unwrap()))
                .sum::<f64>()
                / 20.0
        };
        assert!(avg(0.1) > avg(10.0));
    }

    #[test]
    fn tiny_alpha_respects_minimum() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        for s in 0..20 {
            let shards = dirichlet_partition(&labels, &spec(10, 0.01, s)).unwrap();
            assert!(shards.iter().all(|sh| sh.len() >= 2));
        }
    }

    proptest! {
        #[test]
        fn partition_is_exact(n in 20usize..200, m in 1usize..8, alpha in 0.05f64..20.0, seed in any::<u64>(), k in 1usize..6) {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % k).collect();
            let shards = dirichlet_partition(&labels, &spec(m, alpha, seed)).unwrap();
            prop_assert_eq!(shards.len(), m);
            let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let again = dirichlet_partition(&labels, &spec(m, alpha, seed)).unwrap();
            prop_assert_eq!(shards, again);
        }
    }

    #[test]
    fn blobs_without_noise_sit_on_centers() {
        let ds = synth_blobs(3, 30, 4, 5.0, 0.0, 1).unwrap();
        for c in 0..3 {
            let rows: Vec<_> = (0..30).filter(|&i| ds.labels[i] == c).collect();
            let first = ds.features.row(rows[0]).to_owned();
            assert!((first.dot(&first).sqrt() - 5.0).abs() < 1e-12);
            for &i in &rows {
                assert_eq!(ds.features.row(i), first);
            }
        }
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synth_blobs(3, 31, 4, 5.0, 1.0, 9).unwrap();
        let b = synth_blobs(3, 31, 4, 5.0, 1.0, 9).unwrap();
        assert_eq!(a, b);
        let counts: Vec<usize> = (0..3).map(|c| a.labels.iter().filter(|&&l| l == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn blobs_are_linearly_separable() {
        // Least-squares probe on the difference-of-means direction.
        let ds = synth_blobs(2, 400, 5, 10.0, 1.0, 4).unwrap();
        let mean = |c: usize| {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
            ds.features.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()
        };
        let (m0, m1) = (mean(0), mean(1));
        let w = &m1 - &m0;
        let mid = (&m0 + &m1) / 2.0;
        let correct = (0..ds.len())
            .filter(|&i| {
                let s = (&ds.features.row(i) - &mid).dot(&w);
                (s > 0.0) == (ds.labels[i] == 1)
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.99);
    }

    #[test]
    fn csv_label_mapping() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,y,label\n1.0,2.0,a\n3.0,4.0,b\n5.0,6.0,a").unwrap();
        let ds = load_csv(f.path(), &LabelColumn::Name("label".into()), true).unwrap();
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.label_names, vec!["a", "b"]);
        assert_eq!(ds.features[[2, 1]], 6.0);
    }

    #[test]
    fn csv_errors() {
        let empty = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(load_csv(empty.path(), &LabelColumn::Index(0), false), Err(Error::Parse { .. })));
        assert!(matches!(load_csv(empty.path(), &LabelColumn::Index(0), true), Err(Error::Parse { .. })));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,label\n1.0,a\nfoo,b").unwrap();
        match load_csv(f.path(), &LabelColumn::Name("label".into()), true) {
            Err(Error::NonNumericFeature { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, 0);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_csv(f.path(), &LabelColumn::Name("class".into()), true),
            Err(Error::MissingLabelColumn(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = synth_blobs(3, 40, 4, 3.0, 0.7, 12).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path()).unwrap();
        let back = load_csv(f.path(), &LabelColumn::Name("label".into()), true).unwrap();
        assert_eq!(back.features.dim(), ds.features.dim());
        assert!((&back.features - &ds.features).iter().all(|v| v.abs() <= 1e-12));
        // labels cycle 0,1,2 so first-appearance mapping is the identity
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn split_keeps_both_sides() {
        let (tr, te) = train_test_split(&[4, 5], 0.25, 1);
        assert_eq!((tr.len(), te.len()), (1, 1));
        let (tr, te) = train_test_split(&(0..20).collect::<Vec<_>>(), 0.25, 1);
        assert_eq!((tr.len(), te.len()), (15, 5));
    }
}
