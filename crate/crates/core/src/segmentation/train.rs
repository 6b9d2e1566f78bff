use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::Augmentation;
use super::model::{frame_to_tensor, sigmoid, SegArchitecture, SegModel};
use super::{dice_grad_slice, dice_loss_slice, iou, threshold_mask, DICE_EPS};
use crate::error::{Error, Result};
use crate::frame::{ColorFrame, MaskFrame, Raster};
use crate::optim::{Adam, AdamConfig};
use crate::weights::{self, DType, Header, TensorData, TensorInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Anneal the learning rate to zero along a half cosine over the epochs.
    pub cosine_decay: bool,
    pub hflip: bool,
    /// Image gain drawn from `1 +/- brightness_jitter`; 0 disables.
    pub brightness_jitter: f64,
    /// Rotation drawn from `+/- max_rotation_deg`; 0 disables.
    pub max_rotation_deg: f64,
    pub validation_fraction: f64,
    pub threshold: f32,
    pub seed: u64,
    pub architecture: SegArchitecture,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-4,
            cosine_decay: false,
            hflip: true,
            brightness_jitter: 0.2,
            max_rotation_deg: 10.0,
            validation_fraction: 0.2,
            threshold: super::DEFAULT_THRESHOLD,
            seed: 0,
            architecture: SegArchitecture::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("segmentation config: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie strictly between 0 and 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) || self.max_rotation_deg < 0.0 {
            return bad("augmentation magnitudes out of range");
        }
        Ok(())
    }

    /// Learning rate used during a 1-based epoch.
    pub fn epoch_learning_rate(&self, epoch: usize) -> f64 {
        if !self.cosine_decay {
            return self.learning_rate;
        }
        let t = (epoch - 1) as f64 / self.epochs as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn augmentation(&self) -> Augmentation {
        Augmentation {
            hflip: self.hflip,
            brightness_jitter: self.brightness_jitter as f32,
            max_rotation_deg: self.max_rotation_deg as f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedSegmenter {
    /// Checkpoint with the highest validation IoU (earliest on ties).
    pub model: SegModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub config: SegTrainConfig,
}

/// Mean per-image IoU of thresholded predictions.
pub fn mean_iou(
    model: &SegModel,
    images: &[ColorFrame],
    masks: &[MaskFrame],
    threshold: f32,
) -> Result<f64> {
    let mut total = 0.0;
    for (img, gt) in images.iter().zip(masks) {
        let prob = super::predict_probabilities(model, img)?;
        total += iou(&threshold_mask(&prob, threshold), gt)?;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Loss and logit gradient for one image.
fn image_step(model: &SegModel, input: Array3<f32>, target: &MaskFrame, grad: &mut SegModel, scale: f32) -> f64 {
    let (logits, trace) = model.forward_trace(input);
    let probs: Vec<f32> = logits.iter().map(|&z| sigmoid(z)).collect();
    let eps = DICE_EPS as f32;
    let loss = dice_loss_slice(&probs, target.values(), eps).expect("shapes checked");
    let dp = dice_grad_slice(&probs, target.values(), eps).expect("shapes checked");
    let dz: Vec<f32> = dp
        .iter()
        .zip(&probs)
        .map(|(&g, &p)| scale * g * p * (1.0 - p))
        .collect();
    let dz = Array3::from_shape_vec(logits.raw_dim(), dz).expect("same size as logits");
    model.backward(&trace, &dz, grad);
    f64::from(loss)
}

/// Train on a seeded train/validation partition of the pairs, keeping the
/// epoch with the best validation IoU.
pub fn train_segmenter(
    images: &[ColorFrame],
    masks: &[MaskFrame],
    config: &SegTrainConfig,
) -> Result<TrainedSegmenter> {
    train_from(SegModel::new(config.architecture.clone(), config.seed ^ 0x5e6_u64), images, masks, config)
}

/// Same as [`train_segmenter`], starting from the given weights.
pub fn train_from(
    initial: SegModel,
    images: &[ColorFrame],
    masks: &[MaskFrame],
    config: &SegTrainConfig,
) -> Result<TrainedSegmenter> {
    config.validate()?;
    if images.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 annotated images, got {}",
            images.len()
        )));
    }
    if images.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} images for {} masks",
            images.len(),
            masks.len()
        )));
    }
    for (i, (img, m)) in images.iter().zip(masks).enumerate() {
        if img.dims() != m.dims() {
            return Err(Error::Shape(format!("pair {i}: image and mask sizes differ")));
        }
        SegModel::check_input_dims(img.width(), img.height())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((images.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, images.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_images: Vec<ColorFrame> = val_idx.iter().map(|&i| images[i].clone()).collect();
    let val_masks: Vec<MaskFrame> = val_idx.iter().map(|&i| masks[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();

    let mut model = initial;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::<f32>::new(AdamConfig::with_learning_rate(config.learning_rate), &sizes);
    let aug = config.augmentation();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, SegModel)> = None;
    for epoch in 1..=config.epochs {
        adam.set_learning_rate(config.epoch_learning_rate(epoch));
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let mut grad = model.zeros_like();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let (img, mask) = aug.apply(&images[i], &masks[i], &mut rng);
                loss_sum += image_step(&model, frame_to_tensor(&img), &mask, &mut grad, scale);
            }
            let grads = grad.tensors();
            adam.step(model.tensors_mut().into_iter().zip(grads));
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        let val_iou = mean_iou(&model, &val_images, &val_masks, config.threshold)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_iou,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_iou > *b) {
            best = Some((epoch, val_iou, model.clone()));
        }
    }
    let (best_epoch, best_val_iou, model) = best.expect("at least one epoch");
    Ok(TrainedSegmenter {
        model,
        history,
        best_epoch,
        best_val_iou,
        config: config.clone(),
    })
}

const KIND: &str = "segmenter";

pub fn save_model(path: &Path, model: &SegModel, config: &SegTrainConfig, extra: serde_json::Value) -> Result<()> {
    let header = Header {
        kind: KIND.into(),
        fingerprint: weights::fingerprint(config),
        metadata: serde_json::json!({ "config": config, "training": extra }),
        tensors: model
            .tensor_shapes()
            .into_iter()
            .map(|shape| TensorInfo {
                shape,
                dtype: DType::F32,
            })
            .collect(),
    };
    let data: Vec<TensorData> = model
        .tensors()
        .iter()
        .map(|t| TensorData::F32(t.to_vec()))
        .collect();
    weights::write(path, &header, &data)
}

pub fn load_model(path: &Path) -> Result<(SegModel, SegTrainConfig)> {
    let (header, data) = weights::read(path)?;
    let err = |msg: String| Error::Weights {
        path: path.to_path_buf(),
        msg,
    };
    if header.kind != KIND {
        return Err(err(format!("expected a {KIND} file, found {}", header.kind)));
    }
    let config: SegTrainConfig = serde_json::from_value(header.metadata["config"].clone())
        .map_err(|e| err(e.to_string()))?;
    if weights::fingerprint(&config) != header.fingerprint {
        return Err(err("config fingerprint mismatch".into()));
    }
    let tensors = data
        .into_iter()
        .map(|t| match t {
            TensorData::F32(v) => Ok(v),
            TensorData::F64(_) => Err(err("expected f32 tensors".into())),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = SegModel::new(config.architecture.clone(), 0);
    model.load_tensors(&tensors)?;
    Ok((model, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SegTrainConfig {
        SegTrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            architecture: SegArchitecture {
                encoder_widths: [4, 4, 8, 8],
                pyramid_width: 4,
                head_width: 4,
            },
            ..Default::default()
        }
    }

    fn square_pairs(n: usize) -> (Vec<ColorFrame>, Vec<MaskFrame>) {
        let mut imgs = Vec::new();
        let mut masks = Vec::new();
        for i in 0..n as u32 {
            let mut img = ColorFrame::filled(32, 32, [40, 40, 40]);
            let mut m = MaskFrame::empty(32, 32);
            for y in 8..20 {
                for x in (4 + i % 8)..(16 + i % 8) {
                    img.set(x, y, [220, 220, 220]);
                    m.set(x, y, true);
                }
            }
            imgs.push(img);
            masks.push(m);
        }
        (imgs, masks)
    }

    #[test]
    fn rejects_bad_inputs() {
        let (imgs, masks) = square_pairs(4);
        let cfg = tiny_config();
        assert!(matches!(
            train_segmenter(&imgs[..1], &masks[..1], &cfg),
            Err(Error::Training(_))
        ));
        assert!(train_segmenter(&imgs, &masks[..3], &cfg).is_err());
        let bad = SegTrainConfig {
            validation_fraction: 1.0,
            ..cfg.clone()
        };
        assert!(train_segmenter(&imgs, &masks, &bad).is_err());
        let odd = vec![ColorFrame::filled(30, 32, [0; 3]); 2];
        let odd_masks = vec![MaskFrame::empty(30, 32); 2];
        assert!(train_segmenter(&odd, &odd_masks, &cfg).is_err());
    }

    #[test]
    fn history_and_best_checkpoint() {
        let (imgs, masks) = square_pairs(10);
        let cfg = tiny_config();
        let out = train_segmenter(&imgs, &masks, &cfg).unwrap();
        assert_eq!(out.history.len(), cfg.epochs);
        let max = out.history.iter().map(|r| r.val_iou).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_iou, max);
        assert_eq!(out.history[out.best_epoch - 1].val_iou, max);
    }

    #[test]
    fn training_is_reproducible() {
        let (imgs, masks) = square_pairs(6);
        let cfg = tiny_config();
        let a = train_segmenter(&imgs, &masks, &cfg).unwrap();
        let b = train_segmenter(&imgs, &masks, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn all_background_degenerate_fit() {
        let imgs = vec![ColorFrame::filled(32, 16, [90, 90, 90]); 4];
        let masks = vec![MaskFrame::empty(32, 16); 4];
        let cfg = SegTrainConfig {
            epochs: 1,
            ..tiny_config()
        };
        let mut init = SegModel::new(cfg.architecture.clone(), 3);
        init.set_head_bias(-30.0);
        let out = train_from(init, &imgs, &masks, &cfg).unwrap();
        assert_eq!(out.best_val_iou, 1.0);
        assert!(out.history[0].train_loss < 1e-3);
        let p = super::super::predict_probabilities(&out.model, &imgs[0]).unwrap();
        assert!(p.values().iter().all(|&v| v < 0.5));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let model = SegModel::new(cfg.architecture.clone(), 11);
        let path = dir.path().join("seg.bin");
        save_model(&path, &model, &cfg, serde_json::json!({"best_epoch": 1})).unwrap();
        let (back, back_cfg) = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_cfg, cfg);
    }
}
