//! Encoder with four stride-2 stages and a pyramid decoder.
//!
//! Each encoder stage is a stride-2 3x3 convolution followed by a 3x3
//! convolution, both rectified. Every stage output gets a 1x1 lateral
//! projection; the coarser pyramid level is upsampled (nearest) and summed
//! into the next finer one. The finest level (1/2 resolution) passes a 3x3
//! smoothing convolution, is bilinearly upsampled to input resolution and
//! summed with a 1x1 lateral projection of the input image. After
//! rectification a 3x3 head produces the logits.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    relu_backward, relu_inplace, upsample_bilinear2, upsample_bilinear2_backward,
    upsample_nearest2, upsample_nearest2_backward, Conv2d, ConvCache,
};
use crate::error::{Error, Result};
use crate::frame::{ColorFrame, Raster};

/// Input sides must be multiples of this.
pub const SIZE_MULTIPLE: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegArchitecture {
    pub encoder_widths: [usize; 4],
    pub pyramid_width: usize,
    pub head_width: usize,
}

impl Default for SegArchitecture {
    fn default() -> Self {
        Self {
            encoder_widths: [16, 32, 64, 128],
            pyramid_width: 32,
            head_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    down: Conv2d,
    conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    arch: SegArchitecture,
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    smooth: Conv2d,
    input_lateral: Conv2d,
    head: Conv2d,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Trace {
    input: Array3<f32>,
    stage_cols: Vec<(ConvCache, ConvCache)>,
    stage_mid: Vec<Array3<f32>>,
    stage_out: Vec<Array3<f32>>,
    lateral_cols: Vec<ConvCache>,
    pyramid_fine: Array3<f32>,
    smooth_cols: ConvCache,
    smooth_out: Array3<f32>,
    input_lateral_cols: ConvCache,
    refined: Array3<f32>,
    head_cols: ConvCache,
}

/// Scale 8-bit RGB to roughly zero-centred floats.
pub fn frame_to_tensor(frame: &ColorFrame) -> Array3<f32> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let mut t = Array3::<f32>::zeros((3, h, w));
    for (i, px) in frame.pixels().enumerate() {
        let (y, x) = (i / w, i % w);
        for c in 0..3 {
            t[[c, y, x]] = f32::from(px[c]) / 255.0 - 0.5;
        }
    }
    t
}

pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

impl SegModel {
    pub fn new(arch: SegArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for &w in &arch.encoder_widths {
            stages.push(Stage {
                down: Conv2d::new(in_ch, w, 3, 2, 1, &mut rng),
                conv: Conv2d::new(w, w, 3, 1, 1, &mut rng),
            });
            in_ch = w;
        }
        let laterals = arch
            .encoder_widths
            .iter()
            .map(|&w| Conv2d::new(w, arch.pyramid_width, 1, 1, 0, &mut rng))
            .collect();
        let smooth = Conv2d::new(arch.pyramid_width, arch.head_width, 3, 1, 1, &mut rng);
        let input_lateral = Conv2d::new(3, arch.head_width, 1, 1, 0, &mut rng);
        let head = Conv2d::new(arch.head_width, 1, 3, 1, 1, &mut rng);
        Self {
            arch,
            stages,
            laterals,
            smooth,
            input_lateral,
            head,
        }
    }

    pub fn architecture(&self) -> &SegArchitecture {
        &self.arch
    }

    /// Same structure with every parameter zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: s.down.zeros_like(),
                    conv: s.conv.zeros_like(),
                })
                .collect(),
            laterals: self.laterals.iter().map(Conv2d::zeros_like).collect(),
            smooth: self.smooth.zeros_like(),
            input_lateral: self.input_lateral.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.push(&s.down);
            v.push(&s.conv);
        }
        v.extend(self.laterals.iter());
        v.push(&self.smooth);
        v.push(&self.input_lateral);
        v.push(&self.head);
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.push(&mut s.down);
            v.push(&mut s.conv);
        }
        v.extend(self.laterals.iter_mut());
        v.push(&mut self.smooth);
        v.push(&mut self.input_lateral);
        v.push(&mut self.head);
        v
    }

    /// Flat parameter tensors in a fixed order (weight, bias per conv).
    pub fn tensors(&self) -> Vec<&[f32]> {
        self.convs()
            .into_iter()
            .flat_map(|c| {
                [
                    c.weight.as_slice().expect("standard layout"),
                    c.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| {
                [
                    c.weight.as_slice_mut().expect("standard layout"),
                    c.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// `(rows, cols)` of each tensor from [`SegModel::tensors`].
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.convs()
            .into_iter()
            .flat_map(|c| [c.weight.shape().to_vec(), c.bias.shape().to_vec()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Overwrite parameters from flat tensors in [`SegModel::tensors`] order.
    pub fn load_tensors(&mut self, data: &[Vec<f32>]) -> Result<()> {
        let mut targets = self.tensors_mut();
        if targets.len() != data.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                targets.len(),
                data.len()
            )));
        }
        for (i, (dst, src)) in targets.iter_mut().zip(data).enumerate() {
            if dst.len() != src.len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: expected {} values, got {}",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    pub fn set_head_bias(&mut self, value: f32) {
        self.head.bias.fill(value);
    }

    pub fn check_input_dims(width: u32, height: u32) -> Result<()> {
        if width == 0 || height == 0 || !width.is_multiple_of(SIZE_MULTIPLE) || !height.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::Shape(format!(
                "segmenter input {width}x{height} must have sides that are positive multiples of {SIZE_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// Logits at input resolution, shape `(1, h, w)`.
    pub(crate) fn forward_trace(&self, input: Array3<f32>) -> (Array3<f32>, Trace) {
        let mut stage_cols = Vec::with_capacity(4);
        let mut stage_mid = Vec::with_capacity(4);
        let mut stage_out = Vec::with_capacity(4);
        let mut x = input.clone();
        for stage in &self.stages {
            let (mut mid, cols_a) = stage.down.forward(&x);
            relu_inplace(&mut mid);
            let (mut out, cols_b) = stage.conv.forward(&mid);
            relu_inplace(&mut out);
            stage_cols.push((cols_a, cols_b));
            stage_mid.push(mid);
            x = out.clone();
            stage_out.push(out);
        }
        let mut lateral_cols = Vec::with_capacity(4);
        let mut pyramid: Option<Array3<f32>> = None;
        for i in (0..4).rev() {
            let (lat, cols) = self.laterals[i].forward(&stage_out[i]);
            lateral_cols.push(cols);
            pyramid = Some(match pyramid {
                None => lat,
                Some(coarse) => lat + upsample_nearest2(&coarse),
            });
        }
        lateral_cols.reverse();
        let pyramid_fine = pyramid.expect("four levels");
        let (mut smooth_out, smooth_cols) = self.smooth.forward(&pyramid_fine);
        relu_inplace(&mut smooth_out);
        let (projected, input_lateral_cols) = self.input_lateral.forward(&input);
        let mut refined = upsample_bilinear2(&smooth_out) + projected;
        relu_inplace(&mut refined);
        let (logits, head_cols) = self.head.forward(&refined);
        let trace = Trace {
            input,
            stage_cols,
            stage_mid,
            stage_out,
            lateral_cols,
            pyramid_fine,
            smooth_cols,
            smooth_out,
            input_lateral_cols,
            refined,
            head_cols,
        };
        (logits, trace)
    }

    /// Accumulate parameter gradients for `d loss / d logits` into `grad`.
    pub(crate) fn backward(&self, trace: &Trace, grad_logits: &Array3<f32>, grad: &mut SegModel) {
        let mut dr = self
            .head
            .backward(&trace.head_cols, trace.refined.dim(), grad_logits, &mut grad.head);
        relu_backward(&trace.refined, &mut dr);
        self.input_lateral.backward_params(
            &trace.input_lateral_cols,
            trace.input.dim(),
            &dr,
            &mut grad.input_lateral,
        );
        let mut ds = upsample_bilinear2_backward(&dr);
        relu_backward(&trace.smooth_out, &mut ds);
        let mut dp = self.smooth.backward(
            &trace.smooth_cols,
            trace.pyramid_fine.dim(),
            &ds,
            &mut grad.smooth,
        );
        // dp is the gradient of the finest pyramid level; walk upward.
        let mut dlat = Vec::with_capacity(4);
        for i in 0..4 {
            dlat.push(dp.clone());
            if i < 3 {
                dp = upsample_nearest2_backward(&dp);
            }
        }
        let mut dnext: Option<Array3<f32>> = None;
        for i in (0..4).rev() {
            let mut dout = self.laterals[i].backward(
                &trace.lateral_cols[i],
                trace.stage_out[i].dim(),
                &dlat[i],
                &mut grad.laterals[i],
            );
            if let Some(d) = dnext.take() {
                dout += &d;
            }
            relu_backward(&trace.stage_out[i], &mut dout);
            let stage = &self.stages[i];
            let gstage = &mut grad.stages[i];
            let (cols_a, cols_b) = &trace.stage_cols[i];
            let mut dmid = stage
                .conv
                .backward(cols_b, trace.stage_mid[i].dim(), &dout, &mut gstage.conv);
            relu_backward(&trace.stage_mid[i], &mut dmid);
            if i == 0 {
                stage.down.backward_params(cols_a, trace.input.dim(), &dmid, &mut gstage.down);
            } else {
                let in_dims = trace.stage_out[i - 1].dim();
                dnext = Some(stage.down.backward(cols_a, in_dims, &dmid, &mut gstage.down));
            }
        }
    }

    /// Logits for a frame, shape `(1, h, w)`.
    pub fn logits(&self, frame: &ColorFrame) -> Result<Array3<f32>> {
        Self::check_input_dims(frame.width(), frame.height())?;
        Ok(self.forward_trace(frame_to_tensor(frame)).0)
    }
}
