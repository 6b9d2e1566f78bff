//! Synthetic cow-gait clips with ground-truth masks and raw depth.
//!
//! A cow is a bowed body band with a head and four swinging legs, walking
//! across a static cluttered background. Lameness shows up as a stronger
//! back arch and shorter rear leg swing. Every clip is a pure function of
//! its parameters and seeds.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FragmentRecord, LocomotionScore, Modality, View};
use crate::error::{Error, Result};
use crate::frame::{write_clip, Clip, ColorFrame, DepthFrame, MaskFrame, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Back arch height as a fraction of body length.
    pub spine_curvature: f64,
    /// Rear over front leg swing amplitude.
    pub stride_ratio: f64,
    /// Pixels per frame.
    pub speed: f64,
    /// Body length as a fraction of frame width.
    pub body_scale: f64,
    /// Background, clutter, lighting and sensor noise.
    pub seed: u64,
    /// Coat pattern; fixed per cow.
    pub coat_seed: u64,
}

impl GaitParams {
    pub fn healthy_prototype(seed: u64) -> Self {
        Self {
            spine_curvature: 0.0,
            stride_ratio: 1.0,
            speed: 0.5,
            body_scale: 0.4,
            seed,
            coat_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("gait params: {m}")));
        if !(self.spine_curvature >= 0.0 && self.spine_curvature.is_finite()) {
            return bad(format!("spine curvature {} must be >= 0", self.spine_curvature));
        }
        if !(self.stride_ratio > 0.0 && self.stride_ratio <= 1.0) {
            return bad(format!("stride ratio {} must lie in (0, 1]", self.stride_ratio));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return bad(format!("speed {} must be >= 0", self.speed));
        }
        if !(self.body_scale > 0.0 && self.body_scale <= 1.0) {
            return bad(format!("body scale {} must lie in (0, 1]", self.body_scale));
        }
        Ok(())
    }
}

/// Ranges `(curvature, stride_ratio)` for a locomotion score.
pub fn gait_ranges(score: LocomotionScore) -> ((f64, f64), (f64, f64)) {
    match score.value() {
        1 => ((0.0, 0.08), (0.9, 1.0)),
        s => {
            let k = f64::from(s - 2);
            (
                (0.15 + 0.05 * k, 0.25 + 0.05 * k),
                (0.75 - 0.1 * k, 0.85 - 0.1 * k),
            )
        }
    }
}

/// Curvature and stride ratio at `severity` in [0, 1] within the score's
/// ranges; higher severity means more arch and shorter rear swing.
pub fn gait_for_score(score: LocomotionScore, severity: f64) -> (f64, f64) {
    let t = severity.clamp(0.0, 1.0);
    let ((k0, k1), (s0, s1)) = gait_ranges(score);
    (k0 + t * (k1 - k0), s1 - t * (s1 - s0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub frame_rate: f64,
    /// Per-frame uniform sensor noise amplitude, in 8-bit levels.
    pub sensor_noise: u8,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            frames: 300,
            frame_rate: 30.0,
            sensor_noise: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 || self.frames == 0 || !(self.frame_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "scene needs at least 32x32 pixels, one frame and a positive rate".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFragment {
    pub rgb: Clip<ColorFrame>,
    /// Raw depth in millimetres.
    pub depth: Clip<DepthFrame>,
    pub mask: Clip<MaskFrame>,
    pub view: View,
    pub score: LocomotionScore,
    pub params: GaitParams,
}

impl SynthFragment {
    /// Write `rgb/`, `depth/` and `mask/` clips under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_clip(&dir.join(RGB_DIR), &self.rgb)?;
        write_clip(&dir.join(DEPTH_DIR), &self.depth)?;
        write_clip(&dir.join(MASK_DIR), &self.mask)
    }
}

pub const RGB_DIR: &str = "rgb";
pub const DEPTH_DIR: &str = "depth";
pub const MASK_DIR: &str = "mask";

const BLACK_COAT: [f64; 3] = [28.0, 28.0, 30.0];
const WHITE_COAT: [f64; 3] = [236.0, 236.0, 230.0];
const HOOF: [f64; 3] = [62.0, 50.0, 40.0];
const BODY_DEPTH_MM: f64 = 1500.0;

#[derive(Debug, Clone, Copy)]
struct Patch {
    s: f64,
    v: f64,
    r: f64,
}

#[derive(Debug, Clone)]
struct Coat {
    patches: Vec<Patch>,
    dark_head: bool,
}

impl Coat {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0a7);
        let n = rng.random_range(4..=8);
        let patches = (0..n)
            .map(|_| Patch {
                s: rng.random_range(-1.0..1.0),
                v: rng.random_range(-1.0..1.0),
                r: rng.random_range(0.18..0.42),
            })
            .collect();
        Self {
            patches,
            dark_head: rng.random_bool(0.6),
        }
    }

    /// Body coordinates: `s` along the body, `v` across it, both in [-1, 1].
    fn is_dark(&self, s: f64, v: f64) -> bool {
        self.patches
            .iter()
            .any(|p| ((s - p.s) * 2.5).powi(2) + (v - p.v).powi(2) < (p.r * 2.5).powi(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Part {
    Body { s: f64, v: f64 },
    Head,
    Leg { near: bool },
    Hoof { near: bool },
}

/// Cow geometry at one instant.
#[derive(Debug, Clone, Copy)]
struct Pose {
    view: View,
    length: f64,
    thickness: f64,
    ground_y: f64,
    cx: f64,
    cy: f64,
    kappa: f64,
    stride_ratio: f64,
    phase: f64,
}

type LegSegment = ((f64, f64), (f64, f64), bool);

/// A pose with its legs and head placed.
struct PlacedPose {
    pose: Pose,
    legs: [LegSegment; 4],
    head: (f64, f64),
}

/// Front pair then rear pair: offset along the body, phase, near side.
const LEGS: [(f64, f64, bool); 4] = [
    (0.34, 0.0, true),
    (0.26, PI, false),
    (-0.32, PI, true),
    (-0.24, 0.0, false),
];
const SWING: f64 = 0.38;

fn taper(s: f64) -> f64 {
    (1.0 - s.powi(16)).max(0.0).sqrt()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt(), t)
}

impl Pose {
    fn spine_y(&self, s: f64) -> f64 {
        self.cy - self.kappa * self.length * (1.0 - s * s)
    }

    fn half_thickness(&self, s: f64) -> f64 {
        self.thickness / 2.0 * taper(s)
    }

    fn head_centre(&self) -> (f64, f64) {
        let bob = 0.015 * self.length * (1.0 + 3.0 * (1.0 - self.stride_ratio)) * (2.0 * self.phase).sin();
        match self.view {
            View::Side => (self.cx + 0.62 * self.length, self.cy + 0.12 * self.length + bob),
            View::Top => (self.cx + 0.6 * self.length, self.top_centre_line(1.0)),
        }
    }

    /// Lateral centre line of the body seen from above.
    fn top_centre_line(&self, s: f64) -> f64 {
        let sway = 0.03 * self.length * (1.0 + 4.0 * (1.0 - self.stride_ratio)) * self.phase.sin();
        self.cy + sway + 0.5 * self.kappa * self.length * (1.0 - s * s)
    }

    fn place(self) -> PlacedPose {
        PlacedPose {
            pose: self,
            legs: self.legs(),
            head: self.head_centre(),
        }
    }

    fn legs(&self) -> [LegSegment; 4] {
        LEGS.map(|(u, offset, near)| {
            let hip = (self.cx + u * self.length, {
                let s = 2.0 * u;
                self.spine_y(s) + 0.7 * self.half_thickness(s)
            });
            let amp = if u > 0.0 { SWING } else { SWING * self.stride_ratio };
            let theta = amp * (self.phase + offset).sin();
            let len = (self.ground_y - hip.1).max(1.0) / theta.cos();
            let foot = (hip.0 + len * theta.sin(), hip.1 + len * theta.cos());
            (hip, foot, near)
        })
    }

}

impl PlacedPose {
    fn part_at(&self, x: f64, y: f64) -> Option<Part> {
        let p = &self.pose;
        let l = p.length;
        let s = 2.0 * (x - p.cx) / l;
        match p.view {
            View::Side => {
                if s.abs() <= 1.0 {
                    let ht = p.half_thickness(s);
                    let v = (y - p.spine_y(s)) / ht;
                    if ht > 0.0 && v.abs() <= 1.0 {
                        return Some(Part::Body { s, v });
                    }
                }
                let (hx, hy) = self.head;
                let neck = segment_distance((x, y), (p.cx + 0.42 * l, p.spine_y(0.84) + 0.1 * l), (hx, hy));
                if ((x - hx) / (0.15 * l)).powi(2) + ((y - hy) / (0.1 * l)).powi(2) <= 1.0
                    || neck.0 <= 0.08 * l
                {
                    return Some(Part::Head);
                }
                for &(hip, foot, near) in &self.legs {
                    let (d, t) = segment_distance((x, y), hip, foot);
                    if d <= 0.035 * l {
                        return Some(if t > 0.88 { Part::Hoof { near } } else { Part::Leg { near } });
                    }
                }
                None
            }
            View::Top => {
                if s.abs() <= 1.0 {
                    let hw = 0.17 * l * taper(s);
                    let v = (y - p.top_centre_line(s)) / hw;
                    if hw > 0.0 && v.abs() <= 1.0 {
                        return Some(Part::Body { s, v });
                    }
                }
                let (hx, hy) = self.head;
                if ((x - hx) / (0.14 * l)).powi(2) + ((y - hy) / (0.07 * l)).powi(2) <= 1.0 {
                    return Some(Part::Head);
                }
                None
            }
        }
    }
}

impl Pose {
    /// Pixel box that can contain the cow.
    fn bounds(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let l = self.length;
        let x0 = (self.cx - 0.75 * l).floor().max(0.0);
        let x1 = (self.cx + 0.85 * l).ceil().min(f64::from(width));
        let y0 = (self.cy - (self.kappa + 0.6) * l).floor().max(0.0);
        let y1 = (self.ground_y + 0.1 * l).max(self.cy + (0.5 * self.kappa + 0.5) * l).ceil().min(f64::from(height));
        (x0 as u32, x1.max(x0) as u32, y0 as u32, y1.max(y0) as u32)
    }

    fn color(&self, part: Part, coat: &Coat) -> [f64; 3] {
        match part {
            Part::Body { s, v } => {
                let base = if coat.is_dark(s, v) { BLACK_COAT } else { WHITE_COAT };
                let shade = 1.0 - 0.18 * v * v;
                base.map(|c| c * shade)
            }
            Part::Head => {
                if coat.dark_head {
                    BLACK_COAT
                } else {
                    WHITE_COAT
                }
            }
            Part::Leg { near } => {
                let k = if near { 0.95 } else { 0.8 };
                [220.0 * k, 220.0 * k, 214.0 * k]
            }
            Part::Hoof { .. } => HOOF,
        }
    }

    fn depth(&self, part: Part) -> f64 {
        match (self.view, part) {
            (View::Side, Part::Body { v, .. }) => BODY_DEPTH_MM + 80.0 * v * v,
            (View::Side, Part::Head) => BODY_DEPTH_MM - 30.0,
            (View::Side, Part::Leg { near } | Part::Hoof { near }) => {
                if near {
                    BODY_DEPTH_MM - 20.0
                } else {
                    BODY_DEPTH_MM + 120.0
                }
            }
            (View::Top, Part::Body { s, v }) => {
                BODY_DEPTH_MM - 400.0 * self.kappa * (1.0 - s * s) + 120.0 * v * v
            }
            (View::Top, _) => BODY_DEPTH_MM + 250.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    color: [f64; 3],
    depth: f64,
}

const CLUTTER_PALETTE: [[f64; 3]; 8] = [
    [30.0, 30.0, 32.0],
    [232.0, 232.0, 228.0],
    [150.0, 40.0, 35.0],
    [40.0, 90.0, 150.0],
    [200.0, 170.0, 60.0],
    [90.0, 120.0, 70.0],
    [120.0, 120.0, 125.0],
    [180.0, 110.0, 60.0],
];

/// Static background colour and depth for a fragment seed.
pub fn render_background(view: View, scene: &SceneConfig, seed: u64) -> (ColorFrame, DepthFrame) {
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbac6);
    let wall = [
        rng.random_range(95.0..165.0),
        rng.random_range(85.0..150.0),
        rng.random_range(70.0..140.0),
    ];
    let floor = [
        rng.random_range(70.0..110.0),
        rng.random_range(65.0..100.0),
        rng.random_range(55.0..90.0),
    ];
    let ground_y = ground_line(h);
    let n_rects = rng.random_range(5..=9);
    let rects: Vec<Rect> = (0..n_rects)
        .map(|_| {
            let rw = rng.random_range(0.06..0.3) * f64::from(w);
            let rh = rng.random_range(0.08..0.4) * f64::from(h);
            let x0 = rng.random_range(0.0..f64::from(w) - rw);
            let y0 = rng.random_range(0.0..f64::from(h) - rh);
            let color = CLUTTER_PALETTE[rng.random_range(0..CLUTTER_PALETTE.len())];
            let depth = match view {
                View::Side => rng.random_range(2400.0..2750.0),
                View::Top => rng.random_range(2500.0..2800.0),
            };
            Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
                color,
                depth,
            }
        })
        .collect();
    let mut rgb = ColorFrame::filled(w, h, [0; 3]);
    let mut depth = DepthFrame::filled(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let ry = fy / f64::from(h);
            let (mut c, mut d) = match view {
                View::Side if fy >= ground_y => (floor, 2350.0 + 100.0 * ry),
                View::Side => (wall.map(|v| v * (0.9 + 0.15 * ry)), 2700.0 + 150.0 * ry),
                View::Top => (floor.map(|v| v * 1.2), 2850.0 + 60.0 * ry),
            };
            for r in &rects {
                if fx >= r.x0 && fx < r.x1 && fy >= r.y0 && fy < r.y1 {
                    c = r.color;
                    d = r.depth;
                }
            }
            let grain: f64 = rng.random_range(-9.0..9.0);
            rgb.set(x, y, c.map(|v| (v + grain).round().clamp(0.0, 255.0) as u8));
            depth.set(x, y, d.round() as u16);
        }
    }
    (rgb, depth)
}

fn ground_line(height: u32) -> f64 {
    0.86 * f64::from(height)
}

/// Render one fragment: colour, raw depth and the exact silhouette mask.
pub fn generate_fragment(
    params: &GaitParams,
    view: View,
    score: LocomotionScore,
    scene: &SceneConfig,
) -> Result<SynthFragment> {
    params.validate()?;
    scene.validate()?;
    let (w, h) = (scene.width, scene.height);
    let (bg_rgb, bg_depth) = render_background(view, scene, params.seed);
    let coat = Coat::new(params.coat_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x1167);
    let gain: f64 = rng.random_range(0.85..1.1);
    let length = params.body_scale * f64::from(w);
    let ground_y = ground_line(h);
    let thickness = match view {
        View::Side => 0.36 * length,
        View::Top => 0.34 * length,
    };
    let leg_len = 0.34 * length;
    let cy = match view {
        View::Side => ground_y - leg_len - thickness / 2.0,
        View::Top => f64::from(h) / 2.0,
    };
    let n = scene.frames;
    let x_start = f64::from(w) / 2.0 - params.speed * (n as f64 - 1.0) / 2.0;
    let stride_length = 0.6 * length;
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let noise = i16::from(scene.sensor_noise);
    let lut: Vec<i16> = (0..256).map(|v| (f64::from(v) * gain).round() as i16).collect();
    let mut jitter = vec![0u8; (w * h * 3) as usize];

    let mut rgb_frames = Vec::with_capacity(n);
    let mut depth_frames = Vec::with_capacity(n);
    let mut mask_frames = Vec::with_capacity(n);
    for t in 0..n {
        let travelled = params.speed * t as f64;
        let pose = Pose {
            view,
            length,
            thickness,
            ground_y,
            cx: x_start + travelled,
            cy,
            kappa: params.spine_curvature,
            stride_ratio: params.stride_ratio,
            phase: phase0 + 2.0 * PI * travelled / stride_length,
        };
        let mut rgb = bg_rgb.clone();
        let mut depth = bg_depth.clone();
        let mut mask = MaskFrame::empty(w, h);
        let (x0, x1, y0, y1) = pose.bounds(w, h);
        let placed = pose.place();
        for y in y0..y1 {
            for x in x0..x1 {
                if let Some(part) = placed.part_at(f64::from(x) + 0.5, f64::from(y) + 0.5) {
                    let c = pose.color(part, &coat);
                    rgb.set(x, y, c.map(|v| v.round().clamp(0.0, 255.0) as u8));
                    depth.set(x, y, pose.depth(part).round() as u16);
                    mask.set(x, y, true);
                }
            }
        }
        rng.fill_bytes(&mut jitter);
        for (v, &j) in rgb.as_bytes_mut().iter_mut().zip(&jitter) {
            let offset = if noise > 0 { i16::from(j) % (2 * noise + 1) - noise } else { 0 };
            *v = (lut[usize::from(*v)] + offset).clamp(0, 255) as u8;
        }
        rgb_frames.push(rgb);
        depth_frames.push(depth);
        mask_frames.push(mask);
    }
    Ok(SynthFragment {
        rgb: Clip::new(rgb_frames, scene.frame_rate)?,
        depth: Clip::new(depth_frames, scene.frame_rate)?,
        mask: Clip::new(mask_frames, scene.frame_rate)?,
        view,
        score,
        params: *params,
    })
}

/// Back-arch height of a silhouette in pixels: the largest rise of the top
/// contour above its chord over the middle half of occupied columns.
pub fn silhouette_bow(mask: &MaskFrame) -> Option<f64> {
    let (w, h) = mask.dims();
    let tops: Vec<(u32, u32)> = (0..w)
        .filter_map(|x| (0..h).find(|&y| mask.get(x, y)).map(|y| (x, y)))
        .collect();
    if tops.len() < 5 {
        return None;
    }
    let span = tops.len();
    let inner = &tops[span / 4..span - span / 4];
    let (&(xa, ya), &(xb, yb)) = (inner.first()?, inner.last()?);
    let bow = inner
        .iter()
        .map(|&(x, y)| {
            let t = if xb > xa { f64::from(x - xa) / f64::from(xb - xa) } else { 0.0 };
            let chord = f64::from(ya) + t * (f64::from(yb) - f64::from(ya));
            chord - f64::from(y)
        })
        .fold(0.0, f64::max);
    Some(bow)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_cows: usize,
    pub visits_per_cow: usize,
    pub lame_fraction: f64,
    pub seed: u64,
    pub views: Vec<View>,
    /// Probability that a lame visit scores 2 rather than 3.
    pub score2_weight: f64,
    pub scene: SceneConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_cows: 40,
            visits_per_cow: 8,
            lame_fraction: 0.5,
            seed: 0,
            views: View::ALL.to_vec(),
            score2_weight: 0.75,
            scene: SceneConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("corpus config: {m}")));
        if self.n_cows < 2 {
            return bad("n_cows must be at least 2");
        }
        if self.visits_per_cow == 0 {
            return bad("visits_per_cow must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lame_fraction) {
            return bad("lame_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.score2_weight) {
            return bad("score2_weight must lie in [0, 1]");
        }
        if self.views.is_empty() {
            return bad("at least one view is required");
        }
        self.scene.validate()
    }

    pub fn lame_cows(&self) -> usize {
        (self.n_cows as f64 * self.lame_fraction).round() as usize
    }
}

pub fn cow_id(index: usize) -> String {
    format!("cow{index:03}")
}

/// Fragment directory of one visit and view, relative to the clip root.
pub fn fragment_dir(cow: usize, visit: usize, view: View) -> String {
    format!("{}/visit{visit:02}/{view}", cow_id(cow))
}

/// One planned visit: everything needed to render it, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitPlan {
    pub cow: usize,
    pub visit: usize,
    pub score: LocomotionScore,
    pub params: GaitParams,
}

/// Scores and gait parameters for every visit, in cow then visit order.
pub fn plan_corpus(config: &CorpusConfig) -> Result<Vec<VisitPlan>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cows: Vec<usize> = (0..config.n_cows).collect();
    rand::seq::SliceRandom::shuffle(cows.as_mut_slice(), &mut rng);
    let mut lame = vec![false; config.n_cows];
    for &c in &cows[..config.lame_cows()] {
        lame[c] = true;
    }
    let jitter = Normal::new(0.0, 0.15).expect("positive std");
    let mut plans = Vec::with_capacity(config.n_cows * config.visits_per_cow);
    for (cow, &is_lame) in lame.iter().enumerate() {
        let mut crng = ChaCha8Rng::seed_from_u64(config.seed);
        crng.set_stream(cow as u64 + 1);
        let severity: f64 = crng.random_range(0.0..1.0);
        let body_scale = crng.random_range(0.36..0.44);
        let coat_seed: u64 = crng.random();
        for visit in 0..config.visits_per_cow {
            let score = if is_lame {
                LocomotionScore::new(if crng.random_bool(config.score2_weight) { 2 } else { 3 })?
            } else {
                LocomotionScore::new(1)?
            };
            let (kappa, stride) = gait_for_score(score, severity + jitter.sample(&mut crng));
            let travel = crng.random_range(0.35..0.5) * f64::from(config.scene.width);
            let speed = travel / (config.scene.frames.max(2) - 1) as f64;
            plans.push(VisitPlan {
                cow,
                visit,
                score,
                params: GaitParams {
                    spine_curvature: kappa,
                    stride_ratio: stride,
                    speed,
                    body_scale,
                    seed: crng.random(),
                    coat_seed,
                },
            });
        }
    }
    Ok(plans)
}

/// Manifest records of a planned corpus: for each visit and view an rgb and
/// a depth record sharing one fragment directory.
pub fn corpus_records(config: &CorpusConfig, plans: &[VisitPlan]) -> Vec<FragmentRecord> {
    let mut out = Vec::with_capacity(plans.len() * config.views.len() * 2);
    for plan in plans {
        for &view in &config.views {
            for &modality in Modality::ALL {
                out.push(FragmentRecord {
                    fragment_id: format!("{}-v{:02}-{view}-{modality}", cow_id(plan.cow), plan.visit),
                    cow_id: cow_id(plan.cow),
                    view,
                    modality,
                    score: plan.score,
                    clip_path: fragment_dir(plan.cow, plan.visit, view),
                });
            }
        }
    }
    out
}

/// Render and write every fragment under `clip_root`, returning the
/// manifest records. Existing fragment directories are replaced.
pub fn generate_corpus(config: &CorpusConfig, clip_root: &Path) -> Result<Vec<FragmentRecord>> {
    let plans = plan_corpus(config)?;
    fs::create_dir_all(clip_root).map_err(|e| Error::io(clip_root, e))?;
    plans
        .par_iter()
        .flat_map_iter(|plan| config.views.iter().map(move |&view| (plan, view)))
        .try_for_each(|(plan, view)| {
            let frag = generate_fragment(&plan.params, view, plan.score, &config.scene)?;
            frag.write(&clip_root.join(fragment_dir(plan.cow, plan.visit, view)))
        })?;
    Ok(corpus_records(config, &plans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_codec::DepthRange;

    fn small_scene(frames: usize) -> SceneConfig {
        SceneConfig {
            frames,
            ..SceneConfig::default()
        }
    }

    fn score(v: u8) -> LocomotionScore {
        LocomotionScore::new(v).unwrap()
    }

    #[test]
    fn params_are_validated() {
        let mut p = GaitParams::healthy_prototype(0);
        assert!(p.validate().is_ok());
        p.stride_ratio = 0.0;
        assert!(p.validate().is_err());
        p.stride_ratio = 1.0;
        p.spine_curvature = -0.1;
        assert!(generate_fragment(&p, View::Side, score(1), &small_scene(2)).is_err());
    }

    #[test]
    fn score_ranges() {
        assert_eq!(gait_ranges(score(1)), ((0.0, 0.08), (0.9, 1.0)));
        let ((k0, _), (_, s1)) = gait_ranges(score(3));
        assert!((k0 - 0.2).abs() < 1e-12 && (s1 - 0.75).abs() < 1e-12);
        for s in 2..=5 {
            let (k, r) = gait_for_score(score(s), 1.0);
            assert!(k > 0.08 && r > 0.0 && r < 0.9);
        }
    }

    #[test]
    fn mask_is_exact_silhouette_in_depth() {
        let p = GaitParams::healthy_prototype(3);
        let f = generate_fragment(&p, View::Side, score(1), &small_scene(6)).unwrap();
        let range = DepthRange::default();
        let step = range.step();
        for (d, m) in f.depth.frames().iter().zip(f.mask.frames()) {
            assert!(m.count() > 300);
            for (&z, &on) in d.values().iter().zip(m.values()) {
                if on == 1 {
                    assert!((1300..=1750).contains(&z), "body depth {z}");
                } else {
                    assert!(z >= 2200, "background depth {z}");
                }
                assert!(range.contains(z));
            }
        }
        assert!(450.0 > 10.0 * step);
    }

    #[test]
    fn straight_spine_has_no_bow_and_lame_spine_does() {
        let healthy = GaitParams::healthy_prototype(1);
        let lame = GaitParams {
            spine_curvature: 0.2,
            stride_ratio: 0.8,
            ..healthy
        };
        let bow = |p: &GaitParams| {
            let f = generate_fragment(p, View::Side, score(1), &small_scene(1)).unwrap();
            silhouette_bow(&f.mask.frames()[0]).unwrap()
        };
        assert!(bow(&healthy) <= 1.0);
        assert!(bow(&lame) > 3.0);
    }

    #[test]
    fn symmetric_legs_for_unit_stride() {
        let p = GaitParams::healthy_prototype(0);
        let pose = Pose {
            view: View::Side,
            length: 50.0,
            thickness: 18.0,
            ground_y: 80.0,
            cx: 60.0,
            cy: 50.0,
            kappa: p.spine_curvature,
            stride_ratio: p.stride_ratio,
            phase: 0.7,
        };
        let legs = pose.legs();
        // the near front and far rear legs share a phase and swing equally
        let angle = |(hip, foot, _): ((f64, f64), (f64, f64), bool)| (foot.0 - hip.0).atan2(foot.1 - hip.1);
        assert!((angle(legs[0]) - angle(legs[3])).abs() < 1e-12);
    }

    #[test]
    fn zero_speed_is_static() {
        let p = GaitParams {
            speed: 0.0,
            ..GaitParams::healthy_prototype(4)
        };
        let f = generate_fragment(&p, View::Side, score(1), &small_scene(5)).unwrap();
        let masks = f.mask.frames();
        assert!(masks.iter().all(|m| m == &masks[0]));
        assert!(f.depth.frames().iter().all(|d| d == &f.depth.frames()[0]));
    }

    #[test]
    fn deterministic_per_seed() {
        let p = GaitParams::healthy_prototype(8);
        let scene = small_scene(3);
        for view in View::ALL {
            let a = generate_fragment(&p, *view, score(2), &scene).unwrap();
            let b = generate_fragment(&p, *view, score(2), &scene).unwrap();
            assert_eq!(a, b);
        }
        let c = generate_fragment(&GaitParams::healthy_prototype(9), View::Top, score(2), &scene).unwrap();
        assert_ne!(c.rgb, generate_fragment(&p, View::Top, score(2), &scene).unwrap().rgb);
    }

    #[test]
    fn plan_marks_lame_cows_consistently() {
        let cfg = CorpusConfig {
            n_cows: 10,
            visits_per_cow: 4,
            ..CorpusConfig::default()
        };
        let plans = plan_corpus(&cfg).unwrap();
        assert_eq!(plans.len(), 40);
        let mut lame_cows = std::collections::BTreeSet::new();
        for cow in 0..10 {
            let visits: Vec<_> = plans.iter().filter(|p| p.cow == cow).collect();
            let lame: Vec<bool> = visits.iter().map(|p| p.score.value() >= 2).collect();
            assert!(lame.iter().all(|&l| l == lame[0]));
            if lame[0] {
                lame_cows.insert(cow);
                assert!(visits.iter().all(|p| matches!(p.score.value(), 2 | 3)));
            }
            assert!(visits.iter().all(|p| p.params.coat_seed == visits[0].params.coat_seed));
        }
        assert_eq!(lame_cows.len(), 5);
        assert_eq!(plans, plan_corpus(&cfg).unwrap());
        let records = corpus_records(&cfg, &plans);
        assert_eq!(records.len(), 40 * 2 * 2);
    }

    #[test]
    fn corpus_config_bounds() {
        let mut cfg = CorpusConfig {
            n_cows: 1,
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.n_cows = 4;
        cfg.lame_fraction = 0.0;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.lame_cows(), 0);
        cfg.lame_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }
}
