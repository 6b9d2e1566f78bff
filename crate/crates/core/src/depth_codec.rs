//! Depth to color encoding on a 1529-level hue wheel.
//!
//! Depth inside a configured range is quantized to a hue index
//! `h` in `0..=1528` and rendered as an 8-bit RGB triplet in which one
//! channel is always saturated. Depth 0 (no sensor return) and depth outside
//! the range map to black, which is not on the wheel, so the invalid marker
//! survives a round trip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Clip, ColorFrame, DepthFrame, Raster};

/// Highest hue index; the wheel has `HUE_MAX + 1` levels.
pub const HUE_MAX: u16 = 1528;

const INVALID: [u8; 3] = [0, 0, 0];

/// Metric normalization range of the encoder, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthRange {
    min: u16,
    max: u16,
}

impl DepthRange {
    pub fn new(min: u16, max: u16) -> Result<Self> {
        if min >= max {
            return Err(Error::DepthRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> u16 {
        self.min
    }

    pub fn max(&self) -> u16 {
        self.max
    }

    pub fn contains(&self, depth: u16) -> bool {
        (self.min..=self.max).contains(&depth)
    }

    /// Depth spanned by one hue level.
    pub fn step(&self) -> f64 {
        f64::from(self.max - self.min) / f64::from(HUE_MAX)
    }

    /// Hue index for a depth, `None` when the reading is invalid or out of range.
    pub fn quantize(&self, depth: u16) -> Option<u16> {
        if depth == 0 || !self.contains(depth) {
            return None;
        }
        let t = f64::from(depth - self.min) / f64::from(self.max - self.min);
        Some((f64::from(HUE_MAX) * t).round() as u16)
    }

    pub fn dequantize(&self, hue: u16) -> u16 {
        (f64::from(self.min) + f64::from(hue) * self.step()).round() as u16
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min: 300,
            max: 3000,
        }
    }
}

/// RGB triplet for a hue index in `0..=1528`.
pub fn hue_to_rgb(h: u16) -> [u8; 3] {
    debug_assert!(h <= HUE_MAX);
    let h = i32::from(h);
    let r = match h {
        0..=255 | 1275.. => 255,
        256..=509 => 510 - h,
        510..=1020 => 0,
        _ => h - 1020,
    };
    let g = match h {
        0..=255 => h,
        256..=764 => 255,
        765..=1020 => 1020 - h,
        _ => 0,
    };
    let b = match h {
        0..=510 => 0,
        511..=764 => h - 510,
        765..=1275 => 255,
        _ => 1529 - h,
    };
    [r as u8, g as u8, b as u8]
}

/// Inverse of [`hue_to_rgb`]; `None` for colors off the wheel.
pub fn rgb_to_hue(rgb: [u8; 3]) -> Option<u16> {
    let [r, g, b] = rgb.map(u16::from);
    let h = match (r, g, b) {
        (255, g, 0) => g,
        (r, 255, 0) if r > 0 => 510 - r,
        (0, 255, b) => 510 + b,
        (0, g, 255) => 1020 - g,
        (r, 0, 255) => 1020 + r,
        (255, 0, b) if b <= 253 => 1529 - b,
        _ => return None,
    };
    Some(h)
}

pub fn encode_pixel(depth: u16, range: &DepthRange) -> [u8; 3] {
    range.quantize(depth).map_or(INVALID, hue_to_rgb)
}

/// Decode one pixel; black decodes to the invalid depth 0.
pub fn decode_pixel(rgb: [u8; 3], range: &DepthRange) -> Option<u16> {
    if rgb == INVALID {
        return Some(0);
    }
    rgb_to_hue(rgb).map(|h| range.dequantize(h))
}

pub fn encode_depth(frame: &DepthFrame, range: &DepthRange) -> ColorFrame {
    let data = frame
        .values()
        .iter()
        .flat_map(|&d| encode_pixel(d, range))
        .collect();
    ColorFrame::new(frame.width(), frame.height(), data).expect("same dims as the depth frame")
}

pub fn decode_depth(frame: &ColorFrame, range: &DepthRange) -> Result<DepthFrame> {
    let width = frame.width();
    let data = frame
        .pixels()
        .enumerate()
        .map(|(i, rgb)| {
            decode_pixel(rgb, range).ok_or(Error::Decode {
                x: i as u32 % width,
                y: i as u32 / width,
                rgb,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DepthFrame::new(width, frame.height(), data)
}

pub fn encode_clip(clip: &Clip<DepthFrame>, range: &DepthRange) -> Clip<ColorFrame> {
    clip.try_map(|f| Ok(encode_depth(f, range)))
        .expect("encoding preserves frame dims")
}

pub fn decode_clip(clip: &Clip<ColorFrame>, range: &DepthRange) -> Result<Clip<DepthFrame>> {
    clip.try_map(|f| decode_depth(f, range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Piecewise wheel written out independently, one interval test per
    /// channel and segment, used as the oracle for `hue_to_rgb`.
    fn wheel_oracle(h: i32) -> [i32; 3] {
        let r = if (0..=255).contains(&h) || (1275..=1528).contains(&h) {
            255
        } else if h > 255 && h < 510 {
            510 - h
        } else if (510..=1020).contains(&h) {
            0
        } else {
            h - 1020
        };
        let g = if (0..=255).contains(&h) {
            h
        } else if h > 255 && h < 765 {
            255
        } else if (765..=1020).contains(&h) {
            1020 - h
        } else {
            0
        };
        let b = if (0..=510).contains(&h) {
            0
        } else if h > 510 && h < 765 {
            h - 510
        } else if (765..=1275).contains(&h) {
            255
        } else {
            1529 - h
        };
        [r, g, b]
    }

    #[test]
    fn wheel_matches_oracle_everywhere() {
        for h in 0..=HUE_MAX {
            let want = wheel_oracle(i32::from(h)).map(|c| c as u8);
            assert_eq!(hue_to_rgb(h), want, "h = {h}");
        }
    }

    #[test]
    fn named_points() {
        let range = DepthRange::default();
        assert_eq!(encode_pixel(range.min(), &range), [255, 0, 0]);
        assert_eq!(encode_pixel(0, &range), [0, 0, 0]);
        assert_eq!(hue_to_rgb(764), [0, 255, 254]);
        assert_eq!(hue_to_rgb(1528), [255, 0, 1]);
        assert_eq!(decode_pixel([255, 0, 0], &range), Some(range.min()));
        assert_eq!(decode_pixel([0, 0, 0], &range), Some(0));
    }

    #[test]
    fn midpoint_depth_hits_hue_764() {
        // 300 + 764 * 2700 / 1528 = 1650.0 exactly
        let range = DepthRange::default();
        assert_eq!(range.quantize(1650), Some(764));
        assert_eq!(encode_pixel(1650, &range), [0, 255, 254]);
    }

    #[test]
    fn out_of_range_is_black() {
        let range = DepthRange::new(500, 1000).unwrap();
        assert_eq!(encode_pixel(499, &range), [0, 0, 0]);
        assert_eq!(encode_pixel(1001, &range), [0, 0, 0]);
        assert_eq!(encode_pixel(1000, &range), hue_to_rgb(HUE_MAX));
    }

    #[test]
    fn invalid_range_rejected() {
        assert!(matches!(
            DepthRange::new(10, 10),
            Err(Error::DepthRange { .. })
        ));
        assert!(DepthRange::new(20, 10).is_err());
    }

    #[test]
    fn exactly_one_color_per_level() {
        // Exhaustive over the 24-bit cube: the decodable colors are exactly
        // the 1529 wheel colors plus black.
        let mut decodable = 0usize;
        for r in 0..=255u8 {
            for g in 0..=255u8 {
                for b in 0..=255u8 {
                    if let Some(h) = rgb_to_hue([r, g, b]) {
                        assert_eq!(hue_to_rgb(h), [r, g, b]);
                        decodable += 1;
                    }
                }
            }
        }
        assert_eq!(decodable, usize::from(HUE_MAX) + 1);
    }

    #[test]
    fn third_of_range_round_trips_within_a_step() {
        let range = DepthRange::default();
        let d = 300 + 2700 / 3;
        let back = decode_pixel(encode_pixel(d, &range), &range).unwrap();
        assert!(f64::from(back.abs_diff(d)) <= range.step());
    }

    #[test]
    fn decode_reports_pixel_position() {
        let mut frame = ColorFrame::filled(4, 3, [255, 0, 0]);
        frame.set(2, 1, [10, 20, 30]);
        match decode_depth(&frame, &DepthRange::default()) {
            Err(Error::Decode { x, y, rgb }) => assert_eq!((x, y, rgb), (2, 1, [10, 20, 30])),
            other => panic!("expected decode error, got {other:?}"),
        }
        // b = 254 with r saturated is a gap in the last segment
        assert_eq!(rgb_to_hue([255, 0, 254]), None);
    }

    #[test]
    fn clip_encoding_keeps_count_and_rate() {
        let range = DepthRange::default();
        let empty: Clip<DepthFrame> = Clip::new(vec![], 30.0).unwrap();
        assert!(encode_clip(&empty, &range).is_empty());

        let one = Clip::new(vec![DepthFrame::filled(3, 2, range.min())], 30.0).unwrap();
        let enc = encode_clip(&one, &range);
        assert_eq!(enc.len(), 1);
        assert!(enc.frames()[0].pixels().all(|p| p == [255, 0, 0]));

        let frames = (0..150u16)
            .map(|i| DepthFrame::filled(8, 6, 300 + 17 * i))
            .collect();
        let long = Clip::new(frames, 30.0).unwrap();
        let enc = encode_clip(&long, &range);
        assert_eq!(enc.len(), 150);
        assert_eq!(enc.frame_rate(), 30.0);
        assert_eq!(decode_clip(&enc, &range).unwrap().len(), 150);
    }

    proptest! {
        #[test]
        fn round_trip_within_one_step(min in 0u16..20_000, span in 1u16..40_000, t in 0.0f64..=1.0) {
            let max = min.saturating_add(span).max(min + 1);
            let range = DepthRange::new(min, max).unwrap();
            let d = (f64::from(min) + t * f64::from(max - min)).round() as u16;
            prop_assume!(d != 0);
            let back = decode_pixel(encode_pixel(d, &range), &range).unwrap();
            prop_assert!(f64::from(back.abs_diff(d)) <= range.step().max(0.0) + 1e-9
                || back == d);
        }

        #[test]
        fn encode_is_deterministic(d in any::<u16>()) {
            let range = DepthRange::default();
            prop_assert_eq!(encode_pixel(d, &range), encode_pixel(d, &range));
        }
    }
}
