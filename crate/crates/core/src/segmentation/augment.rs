use rand::Rng;

use crate::frame::{ColorFrame, MaskFrame, Raster};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Augmentation {
    pub hflip: bool,
    pub brightness_jitter: f32,
    pub max_rotation_deg: f32,
}

impl Augmentation {
    /// Random flip, brightness scale and rotation applied jointly to an
    /// image and its mask. Brightness only touches the image.
    pub fn apply<R: Rng>(
        &self,
        image: &ColorFrame,
        mask: &MaskFrame,
        rng: &mut R,
    ) -> (ColorFrame, MaskFrame) {
        let flip = self.hflip && rng.random_bool(0.5);
        let gain = if self.brightness_jitter > 0.0 {
            rng.random_range(1.0 - self.brightness_jitter..=1.0 + self.brightness_jitter)
        } else {
            1.0
        };
        let angle = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let (w, h) = (image.width(), image.height());
        let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
        let (sin, cos) = angle.sin_cos();
        let mut out_img = image.clone();
        let mut out_mask = mask.clone();
        for y in 0..h {
            for x in 0..w {
                // inverse map the output pixel into the source
                let xo = if flip { (w - 1 - x) as f32 } else { x as f32 };
                let (dx, dy) = (xo - cx, y as f32 - cy);
                let sx = (cos * dx + sin * dy + cx).clamp(0.0, w as f32 - 1.0);
                let sy = (-sin * dx + cos * dy + cy).clamp(0.0, h as f32 - 1.0);
                let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
                let (p00, p10, p01, p11) = (
                    image.get(x0, y0),
                    image.get(x1, y0),
                    image.get(x0, y1),
                    image.get(x1, y1),
                );
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let top = f32::from(p00[c]) * (1.0 - fx) + f32::from(p10[c]) * fx;
                    let bot = f32::from(p01[c]) * (1.0 - fx) + f32::from(p11[c]) * fx;
                    px[c] = ((top * (1.0 - fy) + bot * fy) * gain).round().clamp(0.0, 255.0) as u8;
                }
                out_img.set(x, y, px);
                out_mask.set(x, y, mask.get(sx.round() as u32, sy.round() as u32));
            }
        }
        (out_img, out_mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disabled_augmentation_is_identity() {
        let aug = Augmentation {
            hflip: false,
            brightness_jitter: 0.0,
            max_rotation_deg: 0.0,
        };
        let mut img = ColorFrame::filled(6, 4, [10, 20, 30]);
        img.set(1, 2, [200, 100, 50]);
        let mut mask = MaskFrame::empty(6, 4);
        mask.set(1, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i, m) = aug.apply(&img, &mask, &mut rng);
        assert_eq!((i, m), (img, mask));
    }

    #[test]
    fn flip_moves_image_and_mask_together() {
        let aug = Augmentation {
            hflip: true,
            brightness_jitter: 0.0,
            max_rotation_deg: 0.0,
        };
        let mut img = ColorFrame::filled(6, 4, [0; 3]);
        img.set(0, 1, [255; 3]);
        let mut mask = MaskFrame::empty(6, 4);
        mask.set(0, 1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let (i, m) = aug.apply(&img, &mask, &mut rng);
            for y in 0..4 {
                for x in 0..6 {
                    assert_eq!(i.get(x, y) == [255; 3], m.get(x, y));
                }
            }
        }
    }
}
