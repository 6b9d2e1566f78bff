//! Binary cow segmentation: losses and scores, the trainable pyramid
//! segmenter, mask prediction, the masked classifier inputs, and a
//! nearest-neighbour background subtraction baseline.

mod augment;
pub mod background;
pub mod layers;
mod model;
mod train;

use num_traits::Float;

pub use background::{background_baseline, KnnBackgroundConfig};
pub use model::{frame_to_tensor, sigmoid, SegArchitecture, SegModel, SIZE_MULTIPLE};
pub use train::{
    load_model, mean_iou, save_model, train_from, train_segmenter, EpochRecord, SegTrainConfig,
    TrainedSegmenter,
};

use crate::error::{Error, Result};
use crate::frame::{Clip, ColorFrame, MaskFrame, Raster};

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != (width * height) as usize {
            return Err(Error::Shape(format!(
                "{width}x{height} probability map with {} values",
                data.len()
            )));
        }
        if let Some(p) = data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, p: f32) -> Result<Self> {
        Self::new(width, height, vec![p; (width * height) as usize])
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }
}

impl Raster for ProbMap {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
}

fn same_shape(a: &impl Raster, b: &impl Raster) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)` over flat slices.
pub fn dice_loss_slice<T: Float>(pred: &[T], target: &[u8], eps: T) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} target pixels",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut sum) = (T::zero(), T::zero());
    for (&p, &t) in pred.iter().zip(target) {
        let t = if t != 0 { T::one() } else { T::zero() };
        inter = inter + p * t;
        sum = sum + p + t;
    }
    let two = T::one() + T::one();
    Ok(T::one() - (two * inter + eps) / (sum + eps))
}

/// Gradient of [`dice_loss_slice`] with respect to each prediction.
pub fn dice_grad_slice<T: Float>(pred: &[T], target: &[u8], eps: T) -> Result<Vec<T>> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} target pixels",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut sum) = (T::zero(), T::zero());
    for (&p, &t) in pred.iter().zip(target) {
        let t = if t != 0 { T::one() } else { T::zero() };
        inter = inter + p * t;
        sum = sum + p + t;
    }
    let two = T::one() + T::one();
    let num = two * inter + eps;
    let den = sum + eps;
    let den2 = den * den;
    Ok(target
        .iter()
        .map(|&t| {
            let t = if t != 0 { T::one() } else { T::zero() };
            -(two * t * den - num) / den2
        })
        .collect())
}

pub fn dice_loss(pred: &ProbMap, target: &MaskFrame) -> Result<f64> {
    same_shape(pred, target)?;
    let pred: Vec<f64> = pred.values().iter().map(|&p| f64::from(p)).collect();
    dice_loss_slice(&pred, target.values(), DICE_EPS)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &MaskFrame, target: &MaskFrame) -> Result<f64> {
    same_shape(pred, target)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.values().iter().zip(target.values()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Foreground where the probability exceeds `threshold`.
pub fn threshold_mask(prob: &ProbMap, threshold: f32) -> MaskFrame {
    let data = prob.values().iter().map(|&p| (p > threshold) as u8).collect();
    MaskFrame::new(prob.width, prob.height, data).expect("binary by construction")
}

pub fn predict_probabilities(model: &SegModel, frame: &ColorFrame) -> Result<ProbMap> {
    let logits = model.logits(frame)?;
    let data = logits.iter().map(|&z| sigmoid(z)).collect();
    ProbMap::new(frame.width(), frame.height(), data)
}

pub fn predict_mask(model: &SegModel, frame: &ColorFrame) -> Result<MaskFrame> {
    predict_mask_with_threshold(model, frame, DEFAULT_THRESHOLD)
}

pub fn predict_mask_with_threshold(
    model: &SegModel,
    frame: &ColorFrame,
    threshold: f32,
) -> Result<MaskFrame> {
    Ok(threshold_mask(&predict_probabilities(model, frame)?, threshold))
}

pub fn predict_clip(model: &SegModel, clip: &Clip<ColorFrame>, threshold: f32) -> Result<Clip<MaskFrame>> {
    clip.try_map(|f| predict_mask_with_threshold(model, f, threshold))
}

/// White where the mask is set, black elsewhere.
pub fn mask_to_color(mask: &MaskFrame) -> ColorFrame {
    let data = mask
        .values()
        .iter()
        .flat_map(|&v| [v * 255; 3])
        .collect();
    ColorFrame::new(mask.width(), mask.height(), data).expect("same dims as mask")
}

pub fn build_mask_input(masks: &Clip<MaskFrame>) -> Clip<ColorFrame> {
    masks
        .try_map(|m| Ok(mask_to_color(m)))
        .expect("frame dims preserved")
}

/// Keep encoded depth pixels inside the mask, black outside.
pub fn mask_color_frame(frame: &ColorFrame, mask: &MaskFrame) -> Result<ColorFrame> {
    same_shape(frame, mask)?;
    let mut out = frame.clone();
    for (px, &m) in out.as_bytes_mut().chunks_exact_mut(3).zip(mask.values()) {
        if m == 0 {
            px.fill(0);
        }
    }
    Ok(out)
}

pub fn build_masked_depth_input(
    depth_color: &Clip<ColorFrame>,
    masks: &Clip<MaskFrame>,
) -> Result<Clip<ColorFrame>> {
    if depth_color.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} depth frames for {} masks",
            depth_color.len(),
            masks.len()
        )));
    }
    let frames = depth_color
        .frames()
        .iter()
        .zip(masks.frames())
        .map(|(f, m)| mask_color_frame(f, m))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames, depth_color.frame_rate())
}
