//! Pipeline stages over one config file.
//!
//! Each stage reads the artifacts of earlier stages from the output root,
//! writes its own directory and drops a `run.json` there recording the
//! config hash and seeds. Missing upstream artifacts produce an error that
//! names the command to run first.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, feature_matrix, ClsTrainConfig, TrainedClassifier};
use crate::corpus::{self, BinaryLabel, FragmentRecord, Modality, SplitResult, View};
use crate::depth_codec::{encode_clip, DepthRange};
use crate::error::{Error, Result};
use crate::evaluation::{self, confusion, metrics, EvalReport, InputType};
use crate::frame::{read_clip, read_clip_meta, read_frames, write_clip, Clip, ColorFrame, DepthFrame, MaskFrame};
use crate::segmentation::{
    self, build_mask_input, build_masked_depth_input, predict_clip, SegTrainConfig, TrainedSegmenter,
};
use crate::synthgen::{self, CorpusConfig, DEPTH_DIR, MASK_DIR, RGB_DIR};
use crate::video_features::{
    append_features, extract_features, preprocess, read_features, toy_backend, FeatureBackend,
    FeatureFileHeader, FeatureVector,
};
use crate::weights::fingerprint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: PathBuf,
    pub clip_root: PathBuf,
    pub output_root: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            manifest: "corpus/manifest.csv".into(),
            clip_root: "corpus/clips".into(),
            output_root: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub min: u16,
    pub max: u16,
}

impl Default for DepthConfig {
    fn default() -> Self {
        let r = DepthRange::default();
        Self {
            min: r.min(),
            max: r.max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_healthy: usize,
    pub n_lame: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_healthy: 10,
            n_lame: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Annotated frames drawn per view across the whole corpus.
    pub annotated_frames: usize,
    pub sample_seed: u64,
    pub train: SegTrainConfig,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            annotated_frames: 250,
            sample_seed: 0,
            train: SegTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub backend: String,
    pub seed: u64,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub views: Vec<View>,
    pub inputs: Vec<InputType>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            views: View::ALL.to_vec(),
            inputs: InputType::ALL.to_vec(),
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> Vec<(View, InputType)> {
        self.views
            .iter()
            .flat_map(|&v| self.inputs.iter().map(move |&i| (v, i)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub depth: DepthConfig,
    pub synth: CorpusConfig,
    pub split: SplitConfig,
    pub segmentation: SegmentationConfig,
    pub features: FeaturesConfig,
    pub classifier: ClsTrainConfig,
    pub grid: GridConfig,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.depth_range()?;
        self.synth.validate()?;
        self.segmentation.train.validate()?;
        self.classifier.validate()?;
        self.backend()?;
        if self.segmentation.annotated_frames < 2 {
            return Err(Error::Config("segmentation.annotated_frames must be at least 2".into()));
        }
        if self.grid.views.is_empty() || self.grid.inputs.is_empty() {
            return Err(Error::Config("grid needs at least one view and one input".into()));
        }
        Ok(())
    }

    pub fn depth_range(&self) -> Result<DepthRange> {
        DepthRange::new(self.depth.min, self.depth.max)
    }

    pub fn backend(&self) -> Result<Box<dyn FeatureBackend>> {
        match self.features.backend.as_str() {
            "toy" => Ok(Box::new(toy_backend(self.features.seed))),
            other => Err(Error::Config(format!("unknown feature backend `{other}`"))),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.paths.manifest)
    }

    pub fn clip_root(&self) -> PathBuf {
        self.resolve(&self.paths.clip_root)
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.paths.output_root)
    }

    pub fn hash(&self) -> String {
        fingerprint(self)
    }

    fn seeds(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("synth", self.synth.seed),
            ("split", self.split.seed),
            ("segmentation_sample", self.segmentation.sample_seed),
            ("segmentation", self.segmentation.train.seed),
            ("features", self.features.seed),
            ("classifier", self.classifier.seed),
        ])
    }
}

/// Output layout below the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

pub fn input_dir_name(input: InputType) -> String {
    input.as_str().to_ascii_lowercase()
}

impl Layout {
    pub fn new(config: &PipelineConfig) -> Self {
        Self {
            root: config.output_root(),
        }
    }

    pub fn depth_color_dir(&self) -> PathBuf {
        self.root.join("depth_color")
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join("split")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.split_dir().join("train.csv")
    }

    pub fn validation_manifest(&self) -> PathBuf {
        self.split_dir().join("validation.csv")
    }

    pub fn segmentation_dir(&self) -> PathBuf {
        self.root.join("segmentation")
    }

    pub fn segmenter(&self, view: View) -> PathBuf {
        self.segmentation_dir().join(view.as_str()).join("model.bin")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn feature_file(&self, view: View, input: InputType, part: SplitPart) -> PathBuf {
        self.features_dir()
            .join(view.as_str())
            .join(input_dir_name(input))
            .join(format!("{}.csv", part.as_str()))
    }

    pub fn classifier_dir(&self) -> PathBuf {
        self.root.join("classifier")
    }

    pub fn classifier(&self, view: View, input: InputType) -> PathBuf {
        self.classifier_dir()
            .join(view.as_str())
            .join(input_dir_name(input))
            .join("model.bin")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn report(&self) -> PathBuf {
        self.evaluation_dir().join("report.txt")
    }

    pub fn records(&self) -> PathBuf {
        self.evaluation_dir().join("records.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.evaluation_dir().join("predictions.csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
}

impl SplitPart {
    pub const ALL: [SplitPart; 2] = [SplitPart::Train, SplitPart::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seeds: BTreeMap<&'static str, u64>,
    details: serde_json::Value,
}

pub const RUN_MANIFEST: &str = "run.json";

fn write_run_manifest(dir: &Path, command: &str, config: &PipelineConfig, details: serde_json::Value) -> Result<()> {
    let manifest = RunManifest {
        command,
        config_hash: config.hash(),
        seeds: config.seeds(),
        details,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&dir.join(RUN_MANIFEST), &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn load_manifest(config: &PipelineConfig) -> Result<Vec<FragmentRecord>> {
    let path = config.manifest_path();
    require(&path, "synth")?;
    corpus::load_manifest(&path)
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate the synthetic corpus and its manifest.
pub fn cmd_synth(config: &PipelineConfig) -> Result<Vec<FragmentRecord>> {
    let root = config.clip_root();
    let records = synthgen::generate_corpus(&config.synth, &root)?;
    corpus::write_manifest(&config.manifest_path(), &records)?;
    let dist = corpus::distribution(&records);
    write_run_manifest(
        &root,
        "synth",
        config,
        serde_json::json!({ "records": records.len(), "per_score": dist.per_score }),
    )?;
    Ok(records)
}

fn depth_records(records: &[FragmentRecord]) -> Vec<&FragmentRecord> {
    records.iter().filter(|r| r.modality == Modality::Depth).collect()
}

/// Hue-encode every raw depth fragment. Returns the number of clips.
pub fn cmd_encode_depth(config: &PipelineConfig) -> Result<usize> {
    let records = load_manifest(config)?;
    let range = config.depth_range()?;
    let out = Layout::new(config).depth_color_dir();
    let clip_root = config.clip_root();
    reset_dir(&out)?;
    let depth = depth_records(&records);
    depth.par_iter().try_for_each(|r| -> Result<()> {
        let src = clip_root.join(&r.clip_path).join(DEPTH_DIR);
        let raw: Clip<DepthFrame> = read_clip(&src)?;
        write_clip(&out.join(&r.clip_path), &encode_clip(&raw, &range))
    })?;
    write_run_manifest(
        &out,
        "encode-depth",
        config,
        serde_json::json!({ "clips": depth.len(), "range_mm": [range.min(), range.max()] }),
    )?;
    Ok(depth.len())
}

/// Cow-disjoint train/validation manifests.
pub fn cmd_split(config: &PipelineConfig) -> Result<SplitResult> {
    let records = load_manifest(config)?;
    let s = &config.split;
    let split = corpus::split_by_cow(&records, s.n_healthy, s.n_lame, s.seed)?;
    let layout = Layout::new(config);
    reset_dir(&layout.split_dir())?;
    corpus::write_manifest(&layout.train_manifest(), &split.train)?;
    corpus::write_manifest(&layout.validation_manifest(), &split.validation)?;
    write_run_manifest(
        &layout.split_dir(),
        "split",
        config,
        serde_json::json!({
            "train": split.train.len(),
            "validation": split.validation.len(),
            "validation_cows": split.validation_cows,
        }),
    )?;
    Ok(split)
}

fn rgb_records_for(records: &[FragmentRecord], view: View) -> Vec<&FragmentRecord> {
    records
        .iter()
        .filter(|r| r.view == view && r.modality == Modality::Rgb)
        .collect()
}

/// Annotated `(image, mask)` pairs for one view, drawn across the corpus.
pub fn annotated_frames(
    config: &PipelineConfig,
    records: &[FragmentRecord],
    view: View,
) -> Result<(Vec<ColorFrame>, Vec<MaskFrame>)> {
    let mut pool = rgb_records_for(records, view);
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest has no {view} rgb fragments")));
    }
    let view_index = View::ALL.iter().position(|&v| v == view).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.segmentation.sample_seed);
    rng.set_stream(view_index);
    pool.shuffle(&mut rng);
    let clip_root = config.clip_root();
    let n = config.segmentation.annotated_frames;
    let mut picks = Vec::with_capacity(n);
    for i in 0..n {
        let r = pool[i % pool.len()];
        let dir = clip_root.join(&r.clip_path);
        require(&dir.join(MASK_DIR), "synth")?;
        let count = read_clip_meta(&dir.join(RGB_DIR))?.frame_count;
        if count == 0 {
            return Err(Error::InvalidArgument(format!("{} has no frames", dir.display())));
        }
        picks.push((dir, rng.random_range(0..count)));
    }
    let pairs = picks
        .par_iter()
        .map(|(dir, idx)| -> Result<(ColorFrame, MaskFrame)> {
            let img = read_frames::<ColorFrame>(&dir.join(RGB_DIR), &[*idx])?.remove(0);
            let mask = read_frames::<MaskFrame>(&dir.join(MASK_DIR), &[*idx])?.remove(0);
            Ok((img, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

pub const SEG_HISTORY_HEADER: &str = "epoch,loss,val_iou";

/// Train one segmenter per grid view.
pub fn cmd_train_seg(config: &PipelineConfig) -> Result<Vec<(View, TrainedSegmenter)>> {
    let records = load_manifest(config)?;
    let layout = Layout::new(config);
    let dir = layout.segmentation_dir();
    reset_dir(&dir)?;
    let mut out = Vec::new();
    let mut summary = BTreeMap::new();
    for &view in &config.grid.views {
        let (images, masks) = annotated_frames(config, &records, view)?;
        let trained = segmentation::train_segmenter(&images, &masks, &config.segmentation.train)?;
        segmentation::save_model(
            &layout.segmenter(view),
            &trained.model,
            &config.segmentation.train,
            serde_json::json!({
                "best_epoch": trained.best_epoch,
                "best_val_iou": trained.best_val_iou,
                "annotated_frames": images.len(),
            }),
        )?;
        let mut log = format!("{SEG_HISTORY_HEADER}\n");
        for r in &trained.history {
            log.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_iou));
        }
        write_text(&dir.join(view.as_str()).join("history.csv"), &log)?;
        summary.insert(
            view.as_str(),
            serde_json::json!({ "best_epoch": trained.best_epoch, "best_val_iou": trained.best_val_iou }),
        );
        out.push((view, trained));
    }
    write_run_manifest(&dir, "train-seg", config, serde_json::json!(summary))?;
    Ok(out)
}

pub const MASK_INPUT_DIR: &str = "mask_input";
pub const SEGM_OVER_DEPTH_DIR: &str = "segm_over_depth";

/// Predicted masks plus the Mask and SegmOverDepth input clips for every
/// fragment of the grid views. Returns the number of fragments.
pub fn cmd_masks(config: &PipelineConfig) -> Result<usize> {
    let records = load_manifest(config)?;
    let layout = Layout::new(config);
    let depth_dir = layout.depth_color_dir();
    require(&depth_dir.join(RUN_MANIFEST), "encode-depth")?;
    let mut models = HashMap::new();
    for &view in &config.grid.views {
        let path = layout.segmenter(view);
        require(&path, "train-seg")?;
        models.insert(view, segmentation::load_model(&path)?);
    }
    let depth_paths: HashMap<(&str, View), ()> = depth_records(&records)
        .into_iter()
        .map(|r| ((r.clip_path.as_str(), r.view), ()))
        .collect();
    let work: Vec<&FragmentRecord> = records
        .iter()
        .filter(|r| r.modality == Modality::Rgb && models.contains_key(&r.view))
        .collect();
    let out = layout.masks_dir();
    reset_dir(&out)?;
    let clip_root = config.clip_root();
    work.par_iter().try_for_each(|r| -> Result<()> {
        let (model, seg_cfg) = &models[&r.view];
        let rgb: Clip<ColorFrame> = read_clip(&clip_root.join(&r.clip_path).join(RGB_DIR))?;
        let masks = predict_clip(model, &rgb, seg_cfg.threshold)?;
        let dst = out.join(&r.clip_path);
        write_clip(&dst.join(MASK_DIR), &masks)?;
        write_clip(&dst.join(MASK_INPUT_DIR), &build_mask_input(&masks))?;
        if depth_paths.contains_key(&(r.clip_path.as_str(), r.view)) {
            let depth: Clip<ColorFrame> = read_clip(&depth_dir.join(&r.clip_path))?;
            write_clip(&dst.join(SEGM_OVER_DEPTH_DIR), &build_masked_depth_input(&depth, &masks)?)?;
        }
        Ok(())
    })?;
    write_run_manifest(&out, "masks", config, serde_json::json!({ "fragments": work.len() }))?;
    Ok(work.len())
}

/// Modality of the manifest records that feed an input type.
pub fn input_modality(input: InputType) -> Modality {
    match input {
        InputType::Depth => Modality::Depth,
        _ => Modality::Rgb,
    }
}

/// Clip directory for an input type and fragment, with the command that
/// produces it.
fn input_clip_dir(config: &PipelineConfig, input: InputType, record: &FragmentRecord) -> (PathBuf, &'static str) {
    let layout = Layout::new(config);
    match input {
        InputType::Rgb => (config.clip_root().join(&record.clip_path).join(RGB_DIR), "synth"),
        InputType::Depth => (layout.depth_color_dir().join(&record.clip_path), "encode-depth"),
        InputType::Mask => (layout.masks_dir().join(&record.clip_path).join(MASK_INPUT_DIR), "masks"),
        InputType::SegmOverDepth => (
            layout.masks_dir().join(&record.clip_path).join(SEGM_OVER_DEPTH_DIR),
            "masks",
        ),
    }
}

fn split_manifest(config: &PipelineConfig, part: SplitPart) -> Result<Vec<FragmentRecord>> {
    let layout = Layout::new(config);
    let path = match part {
        SplitPart::Train => layout.train_manifest(),
        SplitPart::Validation => layout.validation_manifest(),
    };
    require(&path, "split")?;
    corpus::load_manifest(&path)
}

/// Extract features for the given inputs over every grid view and split part.
/// Returns the number of feature vectors written.
pub fn cmd_features(config: &PipelineConfig, inputs: &[InputType]) -> Result<usize> {
    let backend = config.backend()?;
    let layout = Layout::new(config);
    let header = FeatureFileHeader {
        backend: backend.name().to_string(),
        seed: backend.seed(),
    };
    let parts = [
        (SplitPart::Train, split_manifest(config, SplitPart::Train)?),
        (SplitPart::Validation, split_manifest(config, SplitPart::Validation)?),
    ];
    let mut written = 0;
    for &input in inputs {
        for &view in &config.grid.views {
            for (part, records) in &parts {
                let selected: Vec<&FragmentRecord> = records
                    .iter()
                    .filter(|r| r.view == view && r.modality == input_modality(input))
                    .collect();
                for r in &selected {
                    let (dir, command) = input_clip_dir(config, input, r);
                    require(&dir, command)?;
                }
                let vectors = selected
                    .par_iter()
                    .map(|r| -> Result<(String, FeatureVector)> {
                        let (dir, _) = input_clip_dir(config, input, r);
                        let clip: Clip<ColorFrame> = read_clip(&dir)?;
                        let fv = extract_features(&preprocess(&clip)?, backend.as_ref())?;
                        Ok((r.fragment_id.clone(), fv))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let path = layout.feature_file(view, input, *part);
                if path.exists() {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                append_features(&path, &header, &vectors)?;
                written += vectors.len();
            }
        }
    }
    write_run_manifest(
        &layout.features_dir(),
        "features",
        config,
        serde_json::json!({
            "backend": header.backend,
            "inputs": inputs.iter().map(|i| i.as_str()).collect::<Vec<_>>(),
        }),
    )?;
    Ok(written)
}

/// Feature matrix and labels for one grid cell and split part, in feature
/// file order.
pub fn load_cell(
    config: &PipelineConfig,
    view: View,
    input: InputType,
    part: SplitPart,
) -> Result<(Vec<String>, Vec<FeatureVector>, Vec<BinaryLabel>)> {
    let labels: HashMap<String, BinaryLabel> = split_manifest(config, part)?
        .into_iter()
        .map(|r| (r.fragment_id.clone(), r.label()))
        .collect();
    let path = Layout::new(config).feature_file(view, input, part);
    require(&path, "features")?;
    let (header, rows) = read_features(&path)?;
    let backend = config.backend()?;
    if header.backend != backend.name() || header.seed != backend.seed() {
        return Err(Error::Prerequisite { path, command: "features" });
    }
    let mut ids = Vec::with_capacity(rows.len());
    let mut feats = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for (id, fv) in rows {
        let y = *labels.get(&id).ok_or_else(|| {
            Error::Format(format!("{}: fragment `{id}` is not in the split", path.display()))
        })?;
        ids.push(id);
        feats.push(fv);
        ys.push(y);
    }
    Ok((ids, feats, ys))
}

/// Train one classifier per grid view for each input.
pub fn cmd_train_cls(
    config: &PipelineConfig,
    inputs: &[InputType],
) -> Result<Vec<(View, InputType, TrainedClassifier)>> {
    let layout = Layout::new(config);
    let mut out = Vec::new();
    let mut summary = Vec::new();
    for &input in inputs {
        for &view in &config.grid.views {
            let (_, train_f, train_y) = load_cell(config, view, input, SplitPart::Train)?;
            let (_, val_f, val_y) = load_cell(config, view, input, SplitPart::Validation)?;
            let (tx, vx) = (feature_matrix(&train_f), feature_matrix(&val_f));
            let trained = classifier::train_classifier(tx.view(), &train_y, vx.view(), &val_y, &config.classifier)?;
            let path = layout.classifier(view, input);
            classifier::save_model(&path, &trained, &config.classifier)?;
            write_text(
                &path.with_file_name("history.csv"),
                &classifier::render_history(&trained.history),
            )?;
            summary.push(serde_json::json!({
                "view": view.as_str(),
                "input": input.as_str(),
                "best_epoch": trained.best_epoch,
                "best_val_accuracy": trained.best_val_accuracy,
            }));
            out.push((view, input, trained));
        }
    }
    write_run_manifest(&layout.classifier_dir(), "train-cls", config, serde_json::json!(summary))?;
    Ok(out)
}

pub const PREDICTIONS_HEADER: &str = "view,input,fragment_id,label,prediction,p_healthy,p_lame";

fn label_name(l: BinaryLabel) -> &'static str {
    if l.is_lame() {
        "lame"
    } else {
        "healthy"
    }
}

/// Validation metrics for every grid cell.
pub fn cmd_evaluate(config: &PipelineConfig) -> Result<EvalReport> {
    let layout = Layout::new(config);
    let mut report = EvalReport::default();
    let mut predictions = format!("{PREDICTIONS_HEADER}\n");
    for (view, input) in config.grid.cells() {
        let path = layout.classifier(view, input);
        require(&path, "train-cls")?;
        let (model, _, _) = classifier::load_model(&path)?;
        let (ids, feats, labels) = load_cell(config, view, input, SplitPart::Validation)?;
        let probs = model.forward_batch(feature_matrix(&feats).view())?;
        let preds: Vec<BinaryLabel> = probs
            .rows()
            .into_iter()
            .map(|p| classifier::decide([p[0], p[1]]))
            .collect();
        for (((id, y), p), row) in ids.iter().zip(&labels).zip(&preds).zip(probs.rows()) {
            predictions.push_str(&format!(
                "{view},{input},{id},{},{},{},{}\n",
                label_name(*y),
                label_name(*p),
                row[0],
                row[1]
            ));
        }
        report.insert(view, input, metrics(&confusion(&preds, &labels)?)?);
    }
    let dir = layout.evaluation_dir();
    reset_dir(&dir)?;
    write_text(&layout.report(), &evaluation::render_report(&report))?;
    write_text(&layout.records(), &evaluation::render_records(&report))?;
    write_text(&layout.predictions(), &predictions)?;
    write_run_manifest(
        &dir,
        "evaluate",
        config,
        serde_json::json!({ "cells": report.cells.len() }),
    )?;
    Ok(report)
}

/// Every stage in order, from corpus generation to the report.
pub fn run_all(config: &PipelineConfig) -> Result<EvalReport> {
    cmd_synth(config)?;
    cmd_encode_depth(config)?;
    cmd_split(config)?;
    run_from_split(config)
}

/// The stages after the split manifests exist.
pub fn run_from_split(config: &PipelineConfig) -> Result<EvalReport> {
    let inputs = config.grid.inputs.clone();
    let needs_masks = inputs
        .iter()
        .any(|i| matches!(i, InputType::Mask | InputType::SegmOverDepth));
    if needs_masks {
        cmd_train_seg(config)?;
        cmd_masks(config)?;
    }
    cmd_features(config, &inputs)?;
    cmd_train_cls(config, &inputs)?;
    cmd_evaluate(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text, Path::new("")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn config_errors_are_reported() {
        assert!(matches!(
            PipelineConfig::from_toml("[split]\nbogus = 1\n", Path::new("")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[depth]\nmin = 10\nmax = 5\n", Path::new("")),
            Err(Error::DepthRange { .. })
        ));
        assert!(PipelineConfig::from_toml("[features]\nbackend = \"slowfast\"\n", Path::new("")).is_err());
        let cfg = PipelineConfig::from_toml(
            "[grid]\nviews = [\"side\"]\ninputs = [\"Mask\", \"RGB\"]\n",
            Path::new("/tmp/x"),
        )
        .unwrap();
        assert_eq!(cfg.grid.cells(), vec![(View::Side, InputType::Mask), (View::Side, InputType::Rgb)]);
        assert_eq!(cfg.manifest_path(), Path::new("/tmp/x/corpus/manifest.csv"));
    }

    #[test]
    fn hash_tracks_seeds() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.split.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_manifest_names_synth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            base_dir: dir.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        match cmd_split(&cfg) {
            Err(Error::Prerequisite { command, .. }) => assert_eq!(command, "synth"),
            other => panic!("unexpected {other:?}"),
        }
        match cmd_evaluate(&cfg) {
            Err(Error::Prerequisite { command, .. }) => assert_eq!(command, "train-cls"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
