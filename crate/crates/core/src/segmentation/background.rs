//! Per-pixel nearest-neighbour background subtraction.
//!
//! Every pixel keeps `history_length` colour samples. The first
//! `history_length` frames fill the sample sets and get empty masks. After
//! that a pixel is foreground when fewer than `k` stored samples lie within
//! `threshold` (Euclidean RGB distance), i.e. when its k-th nearest
//! background sample is farther than the threshold. Background pixels
//! overwrite their oldest sample.

use crate::error::{Error, Result};
use crate::frame::{Clip, ColorFrame, MaskFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnBackgroundConfig {
    pub history_length: usize,
    pub k: usize,
    pub threshold: f32,
}

impl KnnBackgroundConfig {
    pub fn new(history_length: usize) -> Self {
        Self {
            history_length,
            k: 2,
            threshold: 40.0,
        }
    }
}

pub fn background_baseline(clip: &Clip<ColorFrame>, history_length: usize) -> Result<Clip<MaskFrame>> {
    background_baseline_with(clip, &KnnBackgroundConfig::new(history_length))
}

pub fn background_baseline_with(
    clip: &Clip<ColorFrame>,
    config: &KnnBackgroundConfig,
) -> Result<Clip<MaskFrame>> {
    let n = config.history_length;
    if n == 0 || config.k == 0 || config.k > n {
        return Err(Error::InvalidArgument(format!(
            "need 0 < k <= history_length, got k = {} and history {n}",
            config.k
        )));
    }
    if clip.len() <= n {
        return Err(Error::InvalidArgument(format!(
            "clip of {} frames is not longer than the history of {n}",
            clip.len()
        )));
    }
    let (w, h) = clip.dims().expect("non-empty clip");
    let pixels = (w * h) as usize;
    let mut samples = vec![[0u8; 3]; pixels * n];
    let mut next_slot = vec![0usize; pixels];
    let limit = config.threshold * config.threshold;
    let mut masks = Vec::with_capacity(clip.len());
    for (t, frame) in clip.frames().iter().enumerate() {
        if t < n {
            for (p, px) in frame.pixels().enumerate() {
                samples[p * n + t] = px;
            }
            masks.push(MaskFrame::empty(w, h));
            continue;
        }
        let mut data = vec![0u8; pixels];
        for (p, px) in frame.pixels().enumerate() {
            let stored = &mut samples[p * n..(p + 1) * n];
            let close = stored
                .iter()
                .filter(|s| {
                    let d: f32 = (0..3)
                        .map(|c| (f32::from(px[c]) - f32::from(s[c])).powi(2))
                        .sum();
                    d <= limit
                })
                .count();
            if close < config.k {
                data[p] = 1;
            } else {
                stored[next_slot[p]] = px;
                next_slot[p] = (next_slot[p] + 1) % n;
            }
        }
        masks.push(MaskFrame::new(w, h, data)?);
    }
    Clip::new(masks, clip.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_clip_is_all_background() {
        let mut f = ColorFrame::filled(8, 6, [30, 60, 90]);
        f.set(3, 3, [250, 0, 0]);
        let clip = Clip::new(vec![f; 12], 30.0).unwrap();
        let masks = background_baseline(&clip, 5).unwrap();
        assert_eq!(masks.len(), 12);
        assert!(masks.frames().iter().all(|m| m.count() == 0));
    }

    #[test]
    fn history_must_be_shorter_than_clip() {
        let clip = Clip::new(vec![ColorFrame::filled(4, 4, [0; 3]); 5], 30.0).unwrap();
        assert!(background_baseline(&clip, 5).is_err());
        assert!(background_baseline(&clip, 9).is_err());
        assert!(background_baseline(&clip, 4).is_ok());
    }

    #[test]
    fn moving_square_is_detected() {
        let frames: Vec<ColorFrame> = (0..20u32)
            .map(|t| {
                let mut f = ColorFrame::filled(20, 10, [20, 20, 20]);
                if t >= 10 {
                    for y in 2..6 {
                        for x in (t - 10)..(t - 6) {
                            f.set(x, y, [230, 230, 230]);
                        }
                    }
                }
                f
            })
            .collect();
        let masks = background_baseline(&Clip::new(frames, 30.0).unwrap(), 8).unwrap();
        assert!(masks.frames()[..8].iter().all(|m| m.count() == 0));
        for m in &masks.frames()[10..] {
            assert_eq!(m.count(), 16);
        }
    }
}
