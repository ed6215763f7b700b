//! Client-local fine-tuning: a frozen random featurizer followed by a stack
//! of tri-LoRA adapted linear layers, trained with mini-batch SGD on
//! softmax cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::adapter::{gaussian_matrix, init_adapter, AdapterGradients, TriLoraAdapter, Trainable};
use crate::error::{shape_err, Error, Result};
use crate::seed;

/// Frozen map `x ↦ tanh(x·P + b)` from raw inputs to `d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    proj: Array2<f64>,
    bias: Array1<f64>,
}

impl Featurizer {
    pub fn new(raw_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "featurizer", &[]);
        let proj = gaussian_matrix(raw_dim, feature_dim, 1.0 / (raw_dim as f64).sqrt(), &mut rng);
        let bias = gaussian_matrix(1, feature_dim, 0.1, &mut rng).remove_axis(Axis(0));
        Self { proj, bias }
    }

    pub fn raw_dim(&self) -> usize {
        self.proj.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.ncols()
    }

    pub fn apply(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != self.raw_dim() {
            return Err(shape_err("featurizer input", (raw.nrows(), self.raw_dim()), raw.dim()));
        }
        let mut h = raw.dot(&self.proj) + &self.bias;
        h.mapv_inplace(f64::tanh);
        Ok(h)
    }
}

/// Featurizer plus adapted layers. Hidden layers are `d→d` with `tanh`
/// between them; the last layer maps to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub featurizer: Featurizer,
    pub layers: Vec<TriLoraAdapter>,
    pub num_classes: usize,
}

/// Cached activations of one forward pass.
struct Trace {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl LocalModel {
    /// Build a model with `hidden_layers` hidden `d→d` layers and one `d→classes` head.
    /// Base weights and adapter initializations derive from `seed` only, so
    /// clients constructed with the same seed start identical.
    pub fn new(featurizer: Featurizer, hidden_layers: usize, num_classes: usize, rank: usize, seed: u64) -> Result<Self> {
        let d = featurizer.feature_dim();
        let layers = (0..=hidden_layers)
            .map(|l| {
                let out = if l == hidden_layers { num_classes } else { d };
                init_adapter(d, out, rank, seed::derive(seed, "layer", &[l as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { featurizer, layers, num_classes })
    }

    pub fn from_layers(featurizer: Featurizer, layers: Vec<TriLoraAdapter>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Empty("layer stack"));
        };
        let mut width = featurizer.feature_dim();
        for l in &layers {
            if l.d() != width {
                return Err(shape_err("layer stack", (width, l.k()), (l.d(), l.k())));
            }
            width = l.k();
        }
        let num_classes = last.k();
        Ok(Self { featurizer, layers, num_classes })
    }

    pub fn rank(&self) -> usize {
        self.layers[0].rank()
    }

    /// Per-layer copies of the core matrices `C`.
    pub fn cores(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| l.c.clone()).collect()
    }

    fn trace(&self, features: ArrayView2<f64>) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = features.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(h.view())?;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        Ok(Trace { inputs, logits: h })
    }

    /// Logits for already-featurized inputs.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(features)?.logits)
    }

    /// Logits computed with merged dense weights `W + A·C·B`.
    pub fn merged_logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut h = features.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.merge());
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Loss and per-layer gradients on one batch.
    pub fn loss_and_grads(&self, features: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Vec<AdapterGradients>)> {
        let trace = self.trace(features)?;
        let (loss, mut g) = cross_entropy_loss(trace.logits.view(), labels)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &trace.inputs[l];
            grads.push(layer.backward(x.view(), g.view())?);
            if l > 0 {
                // inputs[l] = tanh(z_{l-1})
                let dx = layer.input_grad(g.view())?;
                g = dx * &x.mapv(|h| 1.0 - h * h);
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/n`.
pub fn cross_entropy_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "labels",
            expected: n.to_string(),
            got: labels.len().to_string(),
        });
    }
    let mut grad = Array2::<f64>::zeros((n, k));
    let mut total = 0.0;
    for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

fn metrics_from_logits(logits: ArrayView2<f64>, labels: &[usize]) -> Result<EvalMetrics> {
    let (loss, _) = cross_entropy_loss(logits, labels)?;
    let correct = logits.outer_iter().zip(labels).filter(|(row, &y)| argmax(row.view()) == y).count();
    Ok(EvalMetrics { loss, accuracy: correct as f64 / labels.len() as f64 })
}

/// Full-pass loss and accuracy on featurized inputs. Ties in the argmax
/// resolve to the lowest class id.
pub fn evaluate(model: &LocalModel, features: ArrayView2<f64>, labels: &[usize]) -> Result<EvalMetrics> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    metrics_from_logits(model.logits(features)?.view(), labels)
}

/// Same as [`evaluate`] but through the merged dense weights.
pub fn evaluate_merged(model: &LocalModel, features: ArrayView2<f64>, labels: &[usize]) -> Result<EvalMetrics> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    metrics_from_logits(model.merged_logits(features)?.view(), labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs_per_round and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub a: Array2<f64>,
    pub c: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFitResult {
    /// Full-pass training loss after the last epoch.
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Mean mini-batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub factors: Vec<LayerFactors>,
}

/// Shuffled mini-batch index order for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Fine-tune the adapters of `model` on featurized `(features, labels)`.
///
/// When `c_init` is given each layer's `C` is overwritten with it first;
/// `A` and `B` resume from their current values. Only factors enabled in
/// `mask` are updated.
pub fn local_finetune(
    model: &mut LocalModel,
    features: ArrayView2<f64>,
    labels: &[usize],
    c_init: Option<&[Array2<f64>]>,
    cfg: &TrainConfig,
    mask: Trainable,
) -> Result<LocalFitResult> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    if let Some(cs) = c_init {
        if cs.len() != model.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "core stack",
                expected: model.layers.len().to_string(),
                got: cs.len().to_string(),
            });
        }
        for (layer, c) in model.layers.iter_mut().zip(cs) {
            if c.dim() != layer.c.dim() {
                return Err(shape_err("core init", layer.c.dim(), c.dim()));
            }
            layer.c.assign(c);
        }
    }
    let mut rng = seed::rng(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_per_round);
    for _ in 0..cfg.epochs_per_round {
        let batches = epoch_batches(labels.len(), cfg.batch_size, &mut rng);
        let mut sum = 0.0;
        for batch in &batches {
            let x = features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            sum += loss;
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                layer.sgd_step(g, cfg.learning_rate, mask);
            }
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    let m = evaluate(model, features, labels)?;
    Ok(LocalFitResult {
        final_loss: m.loss,
        train_accuracy: m.accuracy,
        epoch_losses,
        factors: model
            .layers
            .iter()
            .map(|l| LayerFactors { a: l.a.clone(), c: l.c.clone(), b: l.b.clone() })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::standard_normal_matrix;
    use crate::partition::synth_blobs;
    use ndarray::array;

    fn blob_model(classes: usize, rank: usize, hidden: usize, seed: u64) -> (LocalModel, Array2<f64>, Vec<usize>) {
        let ds = synth_blobs(classes, 200, 6, 4.0, 1.0, seed).unwrap();
        let f = Featurizer::new(6, 12, seed);
        let feats = f.apply(ds.features.view()).unwrap();
        let model = LocalModel::new(f, hidden, classes, rank, seed).unwrap();
        (model, feats, ds.labels)
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, _) = cross_entropy_loss(Array2::zeros((3, 2)).view(), &[0, 1, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits() {
        let (loss, _) = cross_entropy_loss(array![[50.0, 0.0], [0.0, 50.0]].view(), &[0, 1]).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy_loss(Array2::zeros((1, 2)).view(), &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(cross_entropy_loss(Array2::zeros((0, 2)).view(), &[]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = standard_normal_matrix(4, 3, &mut seed::rng(31));
        let labels = [0, 2, 1, 2];
        let (_, grad) = cross_entropy_loss(logits.view(), &labels).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (cross_entropy_loss(p.view(), &labels).unwrap().0 - cross_entropy_loss(m.view(), &labels).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn multilayer_grads_match_finite_differences() {
        let (mut model, feats, labels) = blob_model(3, 2, 1, 5);
        let mut rng = seed::rng(77);
        for l in &mut model.layers {
            l.b = standard_normal_matrix(l.b.nrows(), l.b.ncols(), &mut rng);
            l.c = standard_normal_matrix(l.c.nrows(), l.c.ncols(), &mut rng);
        }
        let x = feats.slice(ndarray::s![0..5, ..]).to_owned();
        let y = &labels[0..5];
        let (_, grads) = model.loss_and_grads(x.view(), y).unwrap();
        let h = 1e-6;
        let loss = |m: &LocalModel| m.loss_and_grads(x.view(), y).unwrap().0;
        for l in 0..2 {
            for (i, j) in [(0, 0), (3, 1), (7, 0)] {
                let mut p = model.clone();
                p.layers[l].a[[i, j]] += h;
                let mut m = model.clone();
                m.layers[l].a[[i, j]] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - grads[l].da[[i, j]]).abs() < 1e-7, "layer {l} ({i},{j})");
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (mut model, feats, labels) = blob_model(3, 2, 0, 1);
        let before = model.clone();
        let cfg = TrainConfig { epochs_per_round: 3, batch_size: 16, learning_rate: 0.0, seed: 4 };
        let res = local_finetune(&mut model, feats.view(), &labels, None, &cfg, Trainable::ALL).unwrap();
        assert_eq!(model, before);
        let ev = evaluate(&model, feats.view(), &labels).unwrap();
        assert_eq!(res.final_loss, ev.loss);
        assert_eq!(res.factors[0].a, before.layers[0].a);
    }

    #[test]
    fn core_init_is_applied() {
        let (mut model, feats, labels) = blob_model(3, 2, 0, 1);
        let cfg = TrainConfig { epochs_per_round: 1, batch_size: 16, learning_rate: 0.0, seed: 4 };
        let c = array![[2.0, 1.0], [0.0, 3.0]];
        local_finetune(&mut model, feats.view(), &labels, Some(&[c.clone()]), &cfg, Trainable::ALL).unwrap();
        assert_eq!(model.layers[0].c, c);
        let bad = [Array2::zeros((3, 3))];
        assert!(local_finetune(&mut model, feats.view(), &labels, Some(&bad), &cfg, Trainable::ALL).is_err());
        assert!(matches!(
            local_finetune(&mut model, feats.slice(ndarray::s![0..0, ..]), &[], None, &cfg, Trainable::ALL),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn separable_blobs_are_fit() {
        let ds = synth_blobs(2, 100, 4, 8.0, 1.0, 3).unwrap();
        let f = Featurizer::new(4, 8, 3);
        let feats = f.apply(ds.features.view()).unwrap();
        let mut model = LocalModel::new(f, 0, 2, 1, 3).unwrap();
        let cfg = TrainConfig { epochs_per_round: 50, batch_size: 10, learning_rate: 0.1, seed: 1 };
        let res = local_finetune(&mut model, feats.view(), &ds.labels, None, &cfg, Trainable::ALL).unwrap();
        assert_eq!(res.train_accuracy, 1.0);
    }

    #[test]
    fn epoch_loss_non_increasing_with_small_lr() {
        let (mut model, feats, labels) = blob_model(4, 2, 0, 2);
        let cfg = TrainConfig { epochs_per_round: 5, batch_size: 16, learning_rate: 1e-2, seed: 9 };
        let res = local_finetune(&mut model, feats.view(), &labels, None, &cfg, Trainable::ALL).unwrap();
        for w in res.epoch_losses.windows(2) {
            assert!(w[1] <= w[0], "{:?}", res.epoch_losses);
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_merge_consistent() {
        let (mut model, feats, labels) = blob_model(3, 2, 1, 6);
        let cfg = TrainConfig { epochs_per_round: 2, batch_size: 8, learning_rate: 0.1, seed: 2 };
        local_finetune(&mut model, feats.view(), &labels, None, &cfg, Trainable::ALL).unwrap();
        let a = evaluate(&model, feats.view(), &labels).unwrap();
        let b = evaluate(&model, feats.view(), &labels).unwrap();
        assert_eq!(a, b);
        let m = evaluate_merged(&model, feats.view(), &labels).unwrap();
        assert!((a.loss - m.loss).abs() <= 1e-12);
        assert!((a.accuracy - m.accuracy).abs() <= 1e-12);
    }

    #[test]
    fn constant_prediction_accuracy() {
        let f = Featurizer::new(3, 6, 0);
        let mut model = LocalModel::new(f, 0, 4, 2, 0).unwrap();
        let layer = &mut model.layers[0];
        *layer = TriLoraAdapter::from_parts(Array2::zeros((6, 4)), layer.a.clone(), layer.c.clone(), layer.b.clone()).unwrap();
        let feats = standard_normal_matrix(8, 6, &mut seed::rng(1));
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(evaluate(&model, feats.view(), &labels).unwrap().accuracy, 0.25);
        assert!(evaluate(&model, feats.slice(ndarray::s![0..0, ..]), &[]).is_err());
    }

    #[test]
    fn featurizer_is_frozen_by_training() {
        let (mut model, feats, labels) = blob_model(3, 2, 0, 8);
        let raw = standard_normal_matrix(5, 6, &mut seed::rng(3));
        let before = model.featurizer.apply(raw.view()).unwrap();
        let cfg = TrainConfig { epochs_per_round: 3, batch_size: 8, learning_rate: 0.2, seed: 2 };
        local_finetune(&mut model, feats.view(), &labels, None, &cfg, Trainable::ALL).unwrap();
        assert_eq!(model.featurizer.apply(raw.view()).unwrap(), before);
    }
}
