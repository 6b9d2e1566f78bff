//! Three-layer softmax head over clip descriptors.
//!
//! Two rectified hidden layers (512 and 64 wide by default) and a 2-way
//! softmax giving `(p_healthy, p_lame)`. Trained with cross-entropy and
//! Adam; the checkpoint with the best validation accuracy is kept.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::BinaryLabel;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::video_features::{FeatureVector, FEATURE_DIM};
use crate::weights::{self, DType, Header, TensorData, TensorInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            learning_rate: 1e-3,
            hidden: [512, 64],
            seed: 0,
        }
    }
}

impl ClsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "classifier config: epochs, batch_size and hidden widths must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "classifier config: learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `(out, in)`
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Dense {
    fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Layer widths `[input, hidden1, hidden2, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    layers: [Dense; 3],
}

/// Parameter gradients, laid out like the model.
pub type Gradients = ClassifierModel;

pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn relu(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

impl ClassifierModel {
    pub fn new(dims: [usize; 4], seed: u64) -> Result<Self> {
        if dims.contains(&0) || dims[3] != 2 {
            return Err(Error::Shape(format!(
                "classifier dims {dims:?}: widths must be positive and the output 2"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            layers: [
                Dense::new(dims[0], dims[1], &mut rng),
                Dense::new(dims[1], dims[2], &mut rng),
                Dense::new(dims[2], dims[3], &mut rng),
            ],
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        let l = &self.layers;
        [
            l[0].weight.ncols(),
            l[0].weight.nrows(),
            l[1].weight.nrows(),
            l[2].weight.nrows(),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.each_ref().map(Dense::zeros_like),
        }
    }

    /// Zero the output layer so every input maps to `(0.5, 0.5)`.
    pub fn zero_output_layer(&mut self) {
        self.layers[2].weight.fill(0.0);
        self.layers[2].bias.fill(0.0);
    }

    /// Flat parameter tensors: weight then bias per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
            .collect()
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "classifier expects {} features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Logits of the output layer, one row per sample.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        let a1 = relu(self.layers[0].forward(x));
        let a2 = relu(self.layers[1].forward(a1.view()));
        Ok(self.layers[2].forward(a2.view()))
    }

    /// Rows of `(p_healthy, p_lame)`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.logits(x)?;
        softmax_rows(&mut z);
        Ok(z)
    }

    pub fn forward(&self, features: &[f64]) -> Result<[f64; 2]> {
        let x = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let p = self.forward_batch(x)?;
        Ok([p[[0, 0]], p[[0, 1]]])
    }

    pub fn forward_features(&self, features: &FeatureVector) -> Result<[f64; 2]> {
        self.forward(&to_f64(features.values()))
    }

    pub fn predict(&self, features: &[f64]) -> Result<BinaryLabel> {
        Ok(decide(self.forward(features)?))
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<BinaryLabel>> {
        Ok(self
            .forward_batch(x)?
            .rows()
            .into_iter()
            .map(|r| decide([r[0], r[1]]))
            .collect())
    }

    /// Mean cross-entropy over the batch and its parameter gradients.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[BinaryLabel],
    ) -> Result<(f64, Gradients)> {
        self.check_batch(&x)?;
        if labels.len() != x.nrows() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let [l1, l2, l3] = &self.layers;
        let a1 = relu(l1.forward(x));
        let a2 = relu(l2.forward(a1.view()));
        let mut p = l3.forward(a2.view());
        softmax_rows(&mut p);
        let mut loss = 0.0;
        for (i, y) in labels.iter().enumerate() {
            let k = y.index();
            loss -= p[[i, k]].max(f64::MIN_POSITIVE).ln();
            p[[i, k]] -= 1.0;
        }
        let d3 = p / n;
        let mut d2 = d3.dot(&l3.weight);
        d2.zip_mut_with(&a2, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let mut d1 = d2.dot(&l2.weight);
        d1.zip_mut_with(&a1, |g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        let grad = |d: &Array2<f64>, input: ArrayView2<f64>| Dense {
            weight: d.t().dot(&input),
            bias: d.sum_axis(Axis(0)),
        };
        let grads = Self {
            layers: [grad(&d1, x), grad(&d2, a1.view()), grad(&d3, a2.view())],
        };
        Ok((loss / n, grads))
    }
}

/// `Lame` unless `p_healthy` is strictly larger.
pub fn decide(p: [f64; 2]) -> BinaryLabel {
    if p[0] > p[1] {
        BinaryLabel::Healthy
    } else {
        BinaryLabel::Lame
    }
}

pub fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

/// Stack feature vectors into an `(n, 2304)` matrix.
pub fn feature_matrix(features: &[FeatureVector]) -> Array2<f64> {
    let mut m = Array2::zeros((features.len(), FEATURE_DIM));
    for (mut row, f) in m.rows_mut().into_iter().zip(features) {
        row.iter_mut()
            .zip(f.values())
            .for_each(|(d, &s)| *d = f64::from(s));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    /// Checkpoint with the highest validation accuracy (earliest on ties).
    pub model: ClassifierModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

pub fn accuracy(model: &ClassifierModel, x: ArrayView2<f64>, labels: &[BinaryLabel]) -> Result<f64> {
    let preds = model.predict_batch(x)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

pub fn train_classifier(
    train_x: ArrayView2<f64>,
    train_y: &[BinaryLabel],
    val_x: ArrayView2<f64>,
    val_y: &[BinaryLabel],
    config: &ClsTrainConfig,
) -> Result<TrainedClassifier> {
    config.validate()?;
    if train_x.nrows() != train_y.len() || val_x.nrows() != val_y.len() {
        return Err(Error::Shape("feature rows and labels differ in count".into()));
    }
    if train_x.ncols() != val_x.ncols() {
        return Err(Error::Shape(format!(
            "train features have {} dims, validation {}",
            train_x.ncols(),
            val_x.ncols()
        )));
    }
    let lame = train_y.iter().filter(|l| l.is_lame()).count();
    if lame == 0 || lame == train_y.len() {
        return Err(Error::Training(
            "training set needs at least one sample of each class".into(),
        ));
    }
    if val_y.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    let dims = [train_x.ncols(), config.hidden[0], config.hidden[1], 2];
    let mut model = ClassifierModel::new(dims, config.seed)?;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::<f64>::new(AdamConfig::with_learning_rate(config.learning_rate), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ClassifierModel)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = train_x.select(Axis(0), batch);
            let y: Vec<BinaryLabel> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) = model.loss_and_gradients(x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged in epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            adam.step(model.tensors_mut().into_iter().zip(grads.tensors()));
        }
        let val_accuracy = accuracy(&model, val_x, val_y)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_y.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, model) = best.expect("at least one epoch");
    Ok(TrainedClassifier {
        model,
        history,
        best_epoch,
        best_val_accuracy,
    })
}

pub const HISTORY_HEADER: &str = "epoch,loss,val_accuracy";

pub fn render_history(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_accuracy).expect("string write");
    }
    out
}

const KIND: &str = "classifier";

#[derive(Serialize, Deserialize)]
struct SavedMeta {
    config: ClsTrainConfig,
    dims: [usize; 4],
    best_epoch: usize,
    best_val_accuracy: f64,
}

pub fn save_model(path: &Path, trained: &TrainedClassifier, config: &ClsTrainConfig) -> Result<()> {
    let model = &trained.model;
    let meta = SavedMeta {
        config: config.clone(),
        dims: model.dims(),
        best_epoch: trained.best_epoch,
        best_val_accuracy: trained.best_val_accuracy,
    };
    let header = Header {
        kind: KIND.into(),
        fingerprint: weights::fingerprint(config),
        metadata: serde_json::to_value(&meta).map_err(|e| Error::Format(e.to_string()))?,
        tensors: model
            .tensor_shapes()
            .into_iter()
            .map(|shape| TensorInfo {
                shape,
                dtype: DType::F64,
            })
            .collect(),
    };
    let data: Vec<TensorData> = model
        .tensors()
        .iter()
        .map(|t| TensorData::F64(t.to_vec()))
        .collect();
    weights::write(path, &header, &data)
}

/// Model, the config it was trained with, and the best epoch.
pub fn load_model(path: &Path) -> Result<(ClassifierModel, ClsTrainConfig, usize)> {
    let (header, data) = weights::read(path)?;
    let err = |msg: String| Error::Weights {
        path: path.to_path_buf(),
        msg,
    };
    if header.kind != KIND {
        return Err(err(format!("expected a {KIND} file, found {}", header.kind)));
    }
    let meta: SavedMeta =
        serde_json::from_value(header.metadata).map_err(|e| err(e.to_string()))?;
    if weights::fingerprint(&meta.config) != header.fingerprint {
        return Err(err("config fingerprint mismatch".into()));
    }
    let mut model = ClassifierModel::new(meta.dims, 0).map_err(|e| err(e.to_string()))?;
    let mut targets = model.tensors_mut();
    if targets.len() != data.len() {
        return Err(err("tensor count mismatch".into()));
    }
    for (dst, src) in targets.iter_mut().zip(data) {
        match src {
            TensorData::F64(v) if v.len() == dst.len() => dst.copy_from_slice(&v),
            _ => return Err(err("tensor shape or dtype mismatch".into())),
        }
    }
    Ok((model, meta.config, meta.best_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, dim: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<BinaryLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Array2::zeros((2 * n, dim));
        let mut y = Vec::new();
        for i in 0..2 * n {
            let lame = i % 2 == 1;
            for j in 0..dim {
                // coordinate 0 carries the class with margin `sep - 1`
                x[[i, j]] = if j == 0 {
                    let side = if lame { sep } else { -sep };
                    side + rng.random_range(-1.0..1.0)
                } else {
                    noise.sample(&mut rng)
                };
            }
            y.push(if lame { BinaryLabel::Lame } else { BinaryLabel::Healthy });
        }
        (x, y)
    }

    fn small_config(seed: u64) -> ClsTrainConfig {
        ClsTrainConfig {
            hidden: [32, 16],
            seed,
            ..ClsTrainConfig::default()
        }
    }

    #[test]
    fn outputs_are_distributions() {
        let model = ClassifierModel::new([FEATURE_DIM, 512, 64, 2], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = model.forward(&x).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
            assert_eq!(p, model.forward(&x).unwrap());
        }
        assert!(model.forward(&[0.0; 10]).is_err());
    }

    #[test]
    fn zero_output_layer_gives_even_odds_and_lame() {
        let mut model = ClassifierModel::new([6, 5, 4, 2], 3).unwrap();
        model.zero_output_layer();
        let p = model.forward(&[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(p, [0.5, 0.5]);
        assert_eq!(model.predict(&[0.0; 6]).unwrap(), BinaryLabel::Lame);
    }

    #[test]
    fn decision_rule() {
        assert_eq!(decide([0.9, 0.1]), BinaryLabel::Healthy);
        assert_eq!(decide([0.1, 0.9]), BinaryLabel::Lame);
        assert_eq!(decide([0.5, 0.5]), BinaryLabel::Lame);
    }

    #[test]
    fn softmax_is_monotone_in_the_lame_logit() {
        let mut prev = 0.0;
        for k in -20..20 {
            let mut z = Array2::from_shape_vec((1, 2), vec![0.3, k as f64 * 0.5]).unwrap();
            softmax_rows(&mut z);
            assert!(z[[0, 1]] > prev);
            prev = z[[0, 1]];
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ClassifierModel::new([12, 8, 4, 2], 5).unwrap();
        let x = Array2::from_shape_simple_fn((5, 12), || rng.random_range(-1.0..1.0));
        let y: Vec<BinaryLabel> = (0..5)
            .map(|i| if i % 2 == 0 { BinaryLabel::Lame } else { BinaryLabel::Healthy })
            .collect();
        let (_, grads) = model.loss_and_gradients(x.view(), &y).unwrap();
        let h = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (t, g) in grads.tensors().iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = model.clone();
                plus.tensors_mut()[t][j] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[t][j] -= h;
                let lp = plus.loss_and_gradients(x.view(), &y).unwrap().0;
                let lm = minus.loss_and_gradients(x.view(), &y).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                num += (fd - g[j]).powi(2);
                den += fd.abs().max(g[j].abs()).powi(2);
            }
        }
        assert!((num / den).sqrt() <= 1e-4);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (tx, ty) = blobs(100, 20, 2.5, 1);
        let (vx, vy) = blobs(100, 20, 2.5, 2);
        let cfg = small_config(0);
        let out = train_classifier(tx.view(), &ty, vx.view(), &vy, &cfg).unwrap();
        assert_eq!(out.best_val_accuracy, 1.0);
        let max = out.history.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
        assert_eq!(out.best_val_accuracy, max);
        assert_eq!(accuracy(&out.model, vx.view(), &vy).unwrap(), max);
        assert_eq!(out.history[out.best_epoch - 1].val_accuracy, max);
        let smoothed: Vec<f64> = out
            .history
            .windows(5)
            .map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / 5.0)
            .collect();
        for pair in smoothed.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{pair:?}");
        }
    }

    #[test]
    fn random_labels_stay_near_majority() {
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut draw = |n: usize| {
                let x = Array2::from_shape_simple_fn((n, 16), || rng.random_range(-1.0..1.0));
                let y: Vec<BinaryLabel> = (0..n)
                    .map(|_| if rng.random_bool(0.5) { BinaryLabel::Lame } else { BinaryLabel::Healthy })
                    .collect();
                (x, y)
            };
            let (tx, ty) = draw(100);
            let (vx, vy) = draw(400);
            let majority = {
                let lame = vy.iter().filter(|l| l.is_lame()).count() as f64 / vy.len() as f64;
                lame.max(1.0 - lame)
            };
            let out = train_classifier(tx.view(), &ty, vx.view(), &vy, &small_config(seed)).unwrap();
            total += out.best_val_accuracy - majority;
        }
        assert!((total / 10.0).abs() <= 0.1, "mean excess {}", total / 10.0);
    }

    #[test]
    fn training_is_deterministic_and_validated() {
        let (tx, ty) = blobs(20, 6, 1.0, 3);
        let cfg = ClsTrainConfig {
            epochs: 5,
            ..small_config(9)
        };
        let a = train_classifier(tx.view(), &ty, tx.view(), &ty, &cfg).unwrap();
        let b = train_classifier(tx.view(), &ty, tx.view(), &ty, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);

        let healthy = vec![BinaryLabel::Healthy; ty.len()];
        assert!(matches!(
            train_classifier(tx.view(), &healthy, tx.view(), &ty, &cfg),
            Err(Error::Training(_))
        ));
        let narrow = tx.slice(ndarray::s![.., ..5]).to_owned();
        assert!(train_classifier(tx.view(), &ty, narrow.view(), &ty, &cfg).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let (tx, ty) = blobs(10, 4, 2.0, 5);
        let cfg = ClsTrainConfig {
            epochs: 3,
            ..small_config(1)
        };
        let trained = train_classifier(tx.view(), &ty, tx.view(), &ty, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.bin");
        save_model(&path, &trained, &cfg).unwrap();
        let (model, loaded_cfg, best_epoch) = load_model(&path).unwrap();
        assert_eq!(model, trained.model);
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(best_epoch, trained.best_epoch);
    }

    #[test]
    fn history_log_format() {
        let log = render_history(&[EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_accuracy: 0.75,
        }]);
        assert_eq!(log, "epoch,loss,val_accuracy\n1,0.5,0.75\n");
    }
}
