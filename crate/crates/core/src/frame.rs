//! Per-frame raster types, clips, and their on-disk representation.
//!
//! A clip directory holds numerically ordered PNG frames (`000000.png`,
//! `000001.png`, ...) next to a `clip.json` sidecar carrying the frame rate
//! and frame count.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Common surface of the raster types.
pub trait Raster: Clone {
    fn width(&self) -> u32;
    fn height(&self) -> u32;

    fn dims(&self) -> (u32, u32) {
        (self.width(), self.height())
    }
}

fn check_dims(width: u32, height: u32, len: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Shape(format!("empty frame {width}x{height}")));
    }
    let want = width as usize * height as usize * channels;
    if len != want {
        return Err(Error::Shape(format!(
            "{width}x{height}x{channels} frame needs {want} values, got {len}"
        )));
    }
    Ok(())
}

/// Metric depth in millimetres, 0 meaning no sensor return.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthFrame {
    width: u32,
    height: u32,
    data: Vec<u16>,
}

impl DepthFrame {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self> {
        check_dims(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: u16) -> Self {
        Self::new(width, height, vec![value; (width * height) as usize]).expect("positive dims")
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u16) {
        self.data[(y * self.width + x) as usize] = value;
    }

    pub fn values(&self) -> &[u16] {
        &self.data
    }
}

impl Raster for DepthFrame {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
}

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorFrame {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ColorFrame {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len(), 3)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take((width * height * 3) as usize)
            .collect();
        Self::new(width, height, data).expect("positive dims")
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

impl Raster for ColorFrame {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
}

/// Strictly binary per-pixel mask (values 0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFrame {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl MaskFrame {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len(), 1)?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} is not binary"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![0; (width * height) as usize]).expect("positive dims")
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![1; (width * height) as usize]).expect("positive dims")
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.data[(y * self.width + x) as usize] = on as u8;
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

impl Raster for MaskFrame {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
}

/// Ordered frames sharing one size, with a frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<F> {
    frames: Vec<F>,
    frame_rate: f64,
}

impl<F: Raster> Clip<F> {
    pub fn new(frames: Vec<F>, frame_rate: f64) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        if let Some(first) = frames.first() {
            let dims = first.dims();
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{}, clip is {}x{}",
                    f.width(),
                    f.height(),
                    dims.0,
                    dims.1
                )));
            }
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[F] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<F> {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame size, `None` for an empty clip.
    pub fn dims(&self) -> Option<(u32, u32)> {
        self.frames.first().map(Raster::dims)
    }

    /// Apply `f` to every frame, keeping the rate.
    pub fn try_map<G: Raster>(&self, f: impl FnMut(&F) -> Result<G>) -> Result<Clip<G>> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Clip::new(frames, self.frame_rate)
    }
}

/// Frame kinds that can be stored as PNG.
pub trait PngFrame: Raster + Sized {
    const KIND: &'static str;
    fn save_png(&self, path: &Path) -> Result<()>;
    fn load_png(path: &Path) -> Result<Self>;
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

impl PngFrame for DepthFrame {
    const KIND: &'static str = "depth16";

    fn save_png(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .expect("buffer sized by constructor");
        img.save(path).map_err(image_err(path))
    }

    fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(image_err(path))?.into_luma16();
        let (w, h) = img.dimensions();
        DepthFrame::new(w, h, img.into_raw())
    }
}

impl PngFrame for ColorFrame {
    const KIND: &'static str = "rgb8";

    fn save_png(&self, path: &Path) -> Result<()> {
        let img = RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer sized by constructor");
        img.save(path).map_err(image_err(path))
    }

    fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(image_err(path))?.into_rgb8();
        let (w, h) = img.dimensions();
        ColorFrame::new(w, h, img.into_raw())
    }
}

impl PngFrame for MaskFrame {
    const KIND: &'static str = "mask8";

    /// Stored as 0/255 single-channel images.
    fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        let img =
            GrayImage::from_raw(self.width, self.height, raw).expect("buffer sized by constructor");
        img.save(path).map_err(image_err(path))
    }

    fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(image_err(path))?.into_luma8();
        let (w, h) = img.dimensions();
        let mut data = img.into_raw();
        for v in &mut data {
            *v = match *v {
                0 => 0,
                1 | 255 => 1,
                other => {
                    return Err(Error::Format(format!(
                        "{}: non-binary mask value {other}",
                        path.display()
                    )))
                }
            };
        }
        MaskFrame::new(w, h, data)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipMeta {
    pub kind: String,
    pub frame_rate: f64,
    pub frame_count: usize,
}

pub const CLIP_META: &str = "clip.json";

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

pub fn read_clip_meta(dir: &Path) -> Result<ClipMeta> {
    let path = dir.join(CLIP_META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write a clip as a frame directory, replacing any previous frames.
pub fn write_clip<F: PngFrame>(dir: &Path, clip: &Clip<F>) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in clip.frames().iter().enumerate() {
        frame.save_png(&frame_path(dir, i))?;
    }
    let meta = ClipMeta {
        kind: F::KIND.to_string(),
        frame_rate: clip.frame_rate(),
        frame_count: clip.len(),
    };
    let path = dir.join(CLIP_META);
    let text = serde_json::to_string_pretty(&meta).expect("plain struct");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_clip<F: PngFrame>(dir: &Path) -> Result<Clip<F>> {
    let meta = read_clip_meta(dir)?;
    if meta.kind != F::KIND {
        return Err(Error::Format(format!(
            "{}: clip holds {} frames, expected {}",
            dir.display(),
            meta.kind,
            F::KIND
        )));
    }
    let frames = (0..meta.frame_count)
        .map(|i| F::load_png(&frame_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(frames, meta.frame_rate)
}

/// Load a subset of frames by index, in the order given.
pub fn read_frames<F: PngFrame>(dir: &Path, indices: &[usize]) -> Result<Vec<F>> {
    indices
        .iter()
        .map(|&i| F::load_png(&frame_path(dir, i)))
        .collect()
}
