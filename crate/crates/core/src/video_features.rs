//! Clip standardization and two-pathway clip descriptors.
//!
//! Clips are resized to 340x256 and their frame rate halved. From the
//! standardized clip 64 frames are sampled for the fast pathway and every
//! eighth of those for the slow pathway. A backend turns the two frame sets
//! into a 400-value fast feature and a 1904-value slow feature, which are
//! concatenated into the 2304-value clip descriptor.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frame::{Clip, ColorFrame, Raster};

pub const TARGET_WIDTH: u32 = 340;
pub const TARGET_HEIGHT: u32 = 256;
pub const FAST_FRAMES: usize = 64;
pub const SLOW_FRAMES: usize = 8;
pub const FAST_DIM: usize = 400;
pub const SLOW_DIM: usize = 1904;
pub const FEATURE_DIM: usize = FAST_DIM + SLOW_DIM;

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(frame: &ColorFrame, width: u32, height: u32) -> ColorFrame {
    let (sw, sh) = (frame.width(), frame.height());
    if (sw, sh) == (width, height) {
        return frame.clone();
    }
    let taps = |n_out: u32, n_in: u32| -> Vec<(u32, u32, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as u32).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let (tx, ty) = (taps(width, sw), taps(height, sh));
    let src = frame.as_bytes();
    // horizontal pass over every source row, then blend rows
    let row_len = width as usize * 3;
    let mut rows = vec![0f32; sh as usize * row_len];
    for (y, out) in rows.chunks_exact_mut(row_len).enumerate() {
        let line = &src[y * sw as usize * 3..(y + 1) * sw as usize * 3];
        for (o, &(x0, x1, fx)) in out.chunks_exact_mut(3).zip(&tx) {
            for c in 0..3 {
                let a = f32::from(line[x0 as usize * 3 + c]);
                let b = f32::from(line[x1 as usize * 3 + c]);
                o[c] = a * (1.0 - fx) + b * fx;
            }
        }
    }
    let mut data = Vec::with_capacity(row_len * height as usize);
    for &(y0, y1, fy) in &ty {
        let top = &rows[y0 as usize * row_len..(y0 as usize + 1) * row_len];
        let bot = &rows[y1 as usize * row_len..(y1 as usize + 1) * row_len];
        data.extend(
            top.iter()
                .zip(bot)
                .map(|(&t, &b)| (t * (1.0 - fy) + b * fy + 0.5) as u8),
        );
    }
    ColorFrame::new(width, height, data).expect("target dims are positive")
}

/// Resize to 340x256 and keep every second frame starting at 0.
pub fn preprocess(clip: &Clip<ColorFrame>) -> Result<Clip<ColorFrame>> {
    if clip.is_empty() {
        return Err(Error::InvalidArgument("cannot preprocess an empty clip".into()));
    }
    let frames = clip
        .frames()
        .iter()
        .step_by(2)
        .map(|f| resize_bilinear(f, TARGET_WIDTH, TARGET_HEIGHT))
        .collect();
    Clip::new(frames, clip.frame_rate() / 2.0)
}

/// Fast indices `round(i * (n - 1) / 63)` and the slow subset taking every
/// eighth fast entry.
pub fn pathway_indices(n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample an empty clip".into()));
    }
    let last = (n - 1) as f64;
    let fast: Vec<usize> = (0..FAST_FRAMES)
        .map(|i| (i as f64 * last / (FAST_FRAMES - 1) as f64).round() as usize)
        .collect();
    let slow = fast.iter().step_by(FAST_FRAMES / SLOW_FRAMES).copied().collect();
    Ok((fast, slow))
}

/// Frames of both pathways, borrowed from the clip.
#[derive(Debug, Clone)]
pub struct PathwaySample<'a> {
    pub fast: Vec<&'a ColorFrame>,
    pub slow: Vec<&'a ColorFrame>,
    pub fast_indices: Vec<usize>,
    pub slow_indices: Vec<usize>,
}

pub fn sample_pathways(clip: &Clip<ColorFrame>) -> Result<PathwaySample<'_>> {
    let (fast_indices, slow_indices) = pathway_indices(clip.len())?;
    let frames = clip.frames();
    Ok(PathwaySample {
        fast: fast_indices.iter().map(|&i| &frames[i]).collect(),
        slow: slow_indices.iter().map(|&i| &frames[i]).collect(),
        fast_indices,
        slow_indices,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::Shape(format!(
                "feature vector needs {FEATURE_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Extraction("non-finite feature value".into()));
        }
        Ok(Self(values))
    }

    pub fn from_parts(fast: &[f32], slow: &[f32]) -> Result<Self> {
        if fast.len() != FAST_DIM || slow.len() != SLOW_DIM {
            return Err(Error::Shape(format!(
                "pathway features must be {FAST_DIM} + {SLOW_DIM}, got {} + {}",
                fast.len(),
                slow.len()
            )));
        }
        Self::new([fast, slow].concat())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn fast_part(&self) -> &[f32] {
        &self.0[..FAST_DIM]
    }

    pub fn slow_part(&self) -> &[f32] {
        &self.0[FAST_DIM..]
    }
}

/// Maps the two pathways of a clip to `(fast, slow)` features.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn seed(&self) -> u64;
    fn extract(&self, sample: &PathwaySample<'_>) -> Result<(Vec<f32>, Vec<f32>)>;
}

/// Standardized clip in, 2304-value descriptor out.
pub fn extract_features(clip: &Clip<ColorFrame>, backend: &dyn FeatureBackend) -> Result<FeatureVector> {
    match clip.dims() {
        Some((TARGET_WIDTH, TARGET_HEIGHT)) => {}
        Some((w, h)) => {
            return Err(Error::Shape(format!(
                "extractor expects {TARGET_WIDTH}x{TARGET_HEIGHT} frames, got {w}x{h}"
            )))
        }
        None => return Err(Error::InvalidArgument("cannot extract from an empty clip".into())),
    }
    let sample = sample_pathways(clip)?;
    let (fast, slow) = backend
        .extract(&sample)
        .map_err(|e| Error::Extraction(format!("{} backend: {e}", backend.name())))?;
    FeatureVector::from_parts(&fast, &slow)
}

pub const GRID: usize = 4;
/// Grid cells x channels x (mean, std).
pub const SPATIAL_DIM: usize = GRID * GRID * 3 * 2;
pub const TEMPORAL_SEGMENTS: usize = 8;
pub const DESCRIPTOR_DIM: usize = SPATIAL_DIM + TEMPORAL_SEGMENTS;

/// Per-cell channel means and standard deviations of one frame, values in
/// [0, 1]. Layout: `((cell_y * 4 + cell_x) * 3 + channel) * 2 + {0: mean, 1: std}`.
pub fn grid_statistics(frame: &ColorFrame) -> [f64; SPATIAL_DIM] {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let mut sum = [0u64; GRID * GRID * 3];
    let mut sq = [0u64; GRID * GRID * 3];
    let mut count = [0u64; GRID * GRID];
    let col_of: Vec<usize> = (0..w).map(|x| (x * GRID / w).min(GRID - 1)).collect();
    let bytes = frame.as_bytes();
    for y in 0..h {
        let gy = (y * GRID / h).min(GRID - 1);
        let row = &bytes[y * w * 3..(y + 1) * w * 3];
        for (x, px) in row.chunks_exact(3).enumerate() {
            let cell = gy * GRID + col_of[x];
            count[cell] += 1;
            for c in 0..3 {
                let v = u64::from(px[c]);
                sum[cell * 3 + c] += v;
                sq[cell * 3 + c] += v * v;
            }
        }
    }
    let mut out = [0.0f64; SPATIAL_DIM];
    for cell in 0..GRID * GRID {
        let n = count[cell].max(1) as f64;
        for c in 0..3 {
            let i = cell * 3 + c;
            let mean = sum[i] as f64 / n;
            let var = (sq[i] as f64 / n - mean * mean).max(0.0);
            out[i * 2] = mean / 255.0;
            out[i * 2 + 1] = var.sqrt() / 255.0;
        }
    }
    out
}

/// Mean absolute per-channel difference of two frames, in [0, 1].
pub fn frame_difference(a: &ColorFrame, b: &ColorFrame) -> f64 {
    if std::ptr::eq(a, b) {
        return 0.0;
    }
    let total: u64 = a
        .as_bytes()
        .iter()
        .zip(b.as_bytes())
        .map(|(&x, &y)| u64::from(x.abs_diff(y)))
        .sum();
    total as f64 / (a.as_bytes().len() as f64 * 255.0)
}

/// Mean consecutive-frame difference over eight uniform segments of the
/// difference sequence. Segments shorter than one difference reuse the
/// difference at their start.
pub fn temporal_energies(frames: &[&ColorFrame]) -> [f64; TEMPORAL_SEGMENTS] {
    let mut out = [0.0; TEMPORAL_SEGMENTS];
    let m = frames.len().saturating_sub(1);
    if m == 0 {
        return out;
    }
    let diffs: Vec<f64> = frames
        .windows(2)
        .map(|p| frame_difference(p[0], p[1]))
        .collect();
    for (s, e) in out.iter_mut().enumerate() {
        let a = (s * m / TEMPORAL_SEGMENTS).min(m - 1);
        let b = ((s + 1) * m / TEMPORAL_SEGMENTS).clamp(a + 1, m);
        *e = diffs[a..b].iter().sum::<f64>() / (b - a) as f64;
    }
    out
}

/// Reference backend: a pooled spatiotemporal descriptor per pathway (grid
/// statistics averaged over the pathway frames plus eight temporal
/// difference energies) projected by a fixed seeded Gaussian matrix with no
/// bias.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    seed: u64,
    fast_projection: Array2<f64>,
    slow_projection: Array2<f64>,
}

pub fn toy_backend(seed: u64) -> ToyBackend {
    ToyBackend::new(seed)
}

impl ToyBackend {
    pub fn new(seed: u64) -> Self {
        let normal =
            Normal::new(0.0, 1.0 / (DESCRIPTOR_DIM as f64).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fast_projection =
            Array2::from_shape_simple_fn((FAST_DIM, DESCRIPTOR_DIM), || normal.sample(&mut rng));
        let slow_projection =
            Array2::from_shape_simple_fn((SLOW_DIM, DESCRIPTOR_DIM), || normal.sample(&mut rng));
        Self {
            seed,
            fast_projection,
            slow_projection,
        }
    }

    pub fn fast_projection(&self) -> &Array2<f64> {
        &self.fast_projection
    }

    pub fn slow_projection(&self) -> &Array2<f64> {
        &self.slow_projection
    }

    /// Descriptor of one pathway; `stats` caches grid statistics by frame index.
    fn descriptor(
        frames: &[&ColorFrame],
        indices: &[usize],
        stats: &mut HashMap<usize, [f64; SPATIAL_DIM]>,
    ) -> Array1<f64> {
        let mut d = Array1::<f64>::zeros(DESCRIPTOR_DIM);
        for (&frame, &idx) in frames.iter().zip(indices) {
            let s = stats.entry(idx).or_insert_with(|| grid_statistics(frame));
            for (acc, v) in d.iter_mut().zip(s.iter()) {
                *acc += v;
            }
        }
        d.slice_mut(ndarray::s![..SPATIAL_DIM])
            .mapv_inplace(|v| v / frames.len() as f64);
        for (i, e) in temporal_energies(frames).into_iter().enumerate() {
            d[SPATIAL_DIM + i] = e;
        }
        d
    }

    /// Pooled descriptors `(fast, slow)` before projection.
    pub fn descriptors(&self, sample: &PathwaySample<'_>) -> (Array1<f64>, Array1<f64>) {
        let mut stats = HashMap::new();
        let fast = Self::descriptor(&sample.fast, &sample.fast_indices, &mut stats);
        let slow = Self::descriptor(&sample.slow, &sample.slow_indices, &mut stats);
        (fast, slow)
    }
}

impl FeatureBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn extract(&self, sample: &PathwaySample<'_>) -> Result<(Vec<f32>, Vec<f32>)> {
        if sample.fast.is_empty() || sample.slow.is_empty() {
            return Err(Error::Extraction("empty pathway".into()));
        }
        let (fast, slow) = self.descriptors(sample);
        let project = |m: &Array2<f64>, d: &Array1<f64>| -> Vec<f32> {
            m.dot(d).iter().map(|&v| v as f32).collect()
        };
        Ok((
            project(&self.fast_projection, &fast),
            project(&self.slow_projection, &slow),
        ))
    }
}

/// Header of a feature file: backend identity and seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub backend: String,
    pub seed: u64,
}

impl FeatureFileHeader {
    fn line(&self) -> String {
        format!("# backend={} seed={} dims={FEATURE_DIM}", self.backend, self.seed)
    }

    fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ")?;
        let mut backend = None;
        let mut seed = None;
        let mut dims = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=')? {
                ("backend", v) => backend = Some(v.to_string()),
                ("seed", v) => seed = v.parse().ok(),
                ("dims", v) => dims = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        (dims? == FEATURE_DIM).then_some(())?;
        Some(Self {
            backend: backend?,
            seed: seed?,
        })
    }
}

/// Append records to a feature file, writing the header if the file is new.
/// An existing file must carry the same header.
pub fn append_features(
    path: &Path,
    header: &FeatureFileHeader,
    records: &[(String, FeatureVector)],
) -> Result<()> {
    let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    if exists {
        let (existing, _) = read_features(path)?;
        if &existing != header {
            return Err(Error::Format(format!(
                "{}: written by backend {} seed {}, appending from {} seed {}",
                path.display(),
                existing.backend,
                existing.seed,
                header.backend,
                header.seed
            )));
        }
    } else if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if !exists {
        out.push_str(&header.line());
        out.push('\n');
    }
    for (id, fv) in records {
        if id.contains([',', '\n']) {
            return Err(Error::InvalidArgument(format!("fragment id `{id}` contains a separator")));
        }
        out.push_str(id);
        for v in fv.values() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(FeatureFileHeader, Vec<(String, FeatureVector)>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, msg: &str| Error::Format(format!("{} line {line}: {msg}", path.display()));
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| bad(1, "missing header"))?;
    let header = FeatureFileHeader::parse(&first).ok_or_else(|| bad(1, "malformed header"))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 2, "non-numeric feature value"))?;
        let fv = FeatureVector::new(values).map_err(|e| bad(i + 2, &e.to_string()))?;
        records.push((id, fv));
    }
    Ok((header, records))
}
