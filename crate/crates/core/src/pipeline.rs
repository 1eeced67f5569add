//! Stage orchestration: configuration, run-directory artifacts, the feature
//! cache, and the in-memory chain the stages are built from.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{
    detect_from_features, format_detections, parse_detections, refine, DetectParams, Detection, FeatureMatrix,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, format_pr_curves, format_report, fp_analysis, ApMode, EvalReport, FpBreakdown, FpRules, FP_OVERLAP_FLOOR,
};
use crate::features::{
    prepare_patch, render_montage, top_activations, ConvExtractor, ConvStack, ConvStackConfig, FeatureExtractor,
    HogConfig, HogExtractor, Region, UnitRef,
};
use crate::geometry::BoxCorners;
use crate::imaging::{
    decode_netpbm, encode_netpbm, image_mean, load_image, save_image, warp_region, write_atomic, Image, WarpConfig,
};
use crate::proposals::{
    format_proposals, parse_proposals, proposal_recall, CombinedProposer, GridProposer, GridProposerConfig,
    JitterConfig, JitterProposer, ProposalSet, RegionProposer,
};
use crate::synthdata::{
    balanced_split, format_annotations, generate_scene, parse_annotations, Annotation, SceneConfig, SplitResult,
};
use crate::training::{
    max_iou, mine_class, train_bbox_regressor, BBoxConfig, BBoxRegressor, ClassifierModel, ImageWindows, MiningResult,
    RegressionSample, SvmConfig,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_images: usize,
    /// Held-out images used only by NMS tuning.
    pub val_images: usize,
    pub test_images: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_images: 200,
            val_images: 0,
            test_images: 100,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub use_grid: bool,
    pub grid: GridProposerConfig,
    /// Perturbed ground truth; stands in for a category-independent proposer
    /// that finds most objects.
    pub use_jitter: bool,
    pub jitter: JitterConfig,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            use_grid: true,
            grid: GridProposerConfig::default(),
            use_jitter: true,
            jitter: JitterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    Hog,
    Conv,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Hog => "hog",
            FeatureKind::Conv => "conv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub hog: HogConfig,
    pub conv: ConvStackConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub nms_thresh: f64,
    pub score_floor: f64,
    /// Apply the box regressor to the detections.
    pub refine: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        let p = DetectParams::default();
        DetectConfig {
            nms_thresh: p.nms_thresh,
            score_floor: p.score_floor,
            refine: true,
        }
    }
}

impl DetectConfig {
    pub fn params(&self) -> DetectParams {
        DetectParams {
            nms_thresh: self.nms_thresh,
            score_floor: self.score_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub mode: ApMode,
    /// False positives per class examined by the error analysis.
    pub fp_top_n: usize,
    /// Minimum overlap for attributing a false positive to an object.
    pub fp_overlap_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            mode: ApMode::AllPoints,
            fp_top_n: 100,
            fp_overlap_floor: FP_OVERLAP_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    /// Units of the conv stack's final map; empty means the center unit of
    /// the first four channels.
    pub units: Vec<UnitRef>,
    pub top_k: usize,
    pub nms_thresh: f64,
    pub columns: usize,
    /// Test images whose proposals are searched.
    pub max_images: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        VisualizeConfig {
            units: Vec::new(),
            top_k: 16,
            nms_thresh: 0.3,
            columns: 4,
            max_images: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub feature_kinds: Vec<FeatureKind>,
    /// Report each variant with and without box refinement.
    pub with_refinement: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            feature_kinds: vec![FeatureKind::Hog, FeatureKind::Conv],
            with_refinement: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub candidates: usize,
    pub local_search_steps: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            candidates: 8,
            local_search_steps: 2000,
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub nms_grid: Vec<f64>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            nms_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

/// Every knob of a run. Seeds live next to the component they drive:
/// `dataset.scene.seed`, `proposals.jitter.seed`, `features.conv.seed`,
/// `svm.seed` and `split.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub proposals: ProposalConfig,
    pub features: FeatureConfig,
    pub warp: WarpConfig,
    pub svm: SvmConfig,
    pub bbox: BBoxConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
    pub visualize: VisualizeConfig,
    pub ablate: AblateConfig,
    pub split: SplitConfig,
    pub tune: TuneConfig,
}

impl Default for PipelineConfig {
    /// Patches sized for the small synthetic scenes rather than full-size
    /// photographs; 32 pixels divides evenly into HOG cells.
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetConfig::default(),
            proposals: ProposalConfig::default(),
            features: FeatureConfig::default(),
            warp: WarpConfig {
                out_size: 32,
                padding: 4,
                ..WarpConfig::default()
            },
            svm: SvmConfig::default(),
            bbox: BBoxConfig::default(),
            detect: DetectConfig::default(),
            eval: EvalConfig::default(),
            visualize: VisualizeConfig::default(),
            ablate: AblateConfig::default(),
            split: SplitConfig::default(),
            tune: TuneConfig::default(),
        }
    }
}

/// Split `a.b.c=value` into its path and raw value.
pub fn parse_override(s: &str) -> Result<(Vec<String>, String)> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    Ok((path, value.trim().to_string()))
}

/// Interpret an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

impl PipelineConfig {
    /// Parse config text and apply dotted overrides. Unknown keys and
    /// ill-typed values are config errors.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = parse_override(o)?;
            let (last, parents) = path.split_last().expect("non-empty path");
            let mut table = &mut root;
            for p in parents {
                let entry = table
                    .entry(p.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override `{o}`: `{p}` is not a section")))?;
            }
            table.insert(last.clone(), override_value(&raw));
        }
        let cfg: PipelineConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.scene.validate()?;
        if d.train_images == 0 || d.test_images == 0 {
            return Err(Error::Config("dataset needs train and test images".into()));
        }
        if !self.proposals.use_grid && !self.proposals.use_jitter {
            return Err(Error::Config("at least one proposer must be enabled".into()));
        }
        self.proposals.grid.validate()?;
        self.warp.validate()?;
        self.svm.validate()?;
        if self.bbox.lambda.is_nan() || self.bbox.lambda <= 0.0 || !(0.0..1.0).contains(&self.bbox.assign_iou) {
            return Err(Error::Config(
                "bbox lambda must be positive and assign_iou in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.detect.nms_thresh) || self.detect.score_floor.is_nan() {
            return Err(Error::Config("detect nms_thresh must be in [0, 1]".into()));
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::Config("eval iou_thresh must be in (0, 1]".into()));
        }
        if !(0.0..self.eval.iou_thresh).contains(&self.eval.fp_overlap_floor) {
            return Err(Error::Config("eval fp_overlap_floor must be in [0, iou_thresh)".into()));
        }
        if self.tune.nms_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("tune nms_grid values must be in [0, 1]".into()));
        }
        build_extractor(&self.features, &self.warp, d.scene.channels).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical serialization: independent of comments, key order and
    /// formatting of the source file.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical()))
    }
}

fn canonical_part<T: Serialize>(value: &T) -> String {
    #[derive(Serialize)]
    struct Wrap<'a, T> {
        v: &'a T,
    }
    toml::to_string(&Wrap { v: value }).expect("config serializes")
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    Propose,
    Extract,
    TrainSvm,
    TrainBbreg,
    Detect,
    Evaluate,
    Analyze,
    Visualize,
    Ablate,
    Split,
    TuneNms,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::GenData,
        Stage::Propose,
        Stage::Extract,
        Stage::TrainSvm,
        Stage::TrainBbreg,
        Stage::Detect,
        Stage::Evaluate,
        Stage::Analyze,
        Stage::Visualize,
        Stage::Ablate,
        Stage::Split,
        Stage::TuneNms,
    ];

    /// The main detection chain, in order.
    pub const CHAIN: [Stage; 8] = [
        Stage::GenData,
        Stage::Propose,
        Stage::Extract,
        Stage::TrainSvm,
        Stage::TrainBbreg,
        Stage::Detect,
        Stage::Evaluate,
        Stage::Analyze,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Propose => "propose",
            Stage::Extract => "extract",
            Stage::TrainSvm => "train-svm",
            Stage::TrainBbreg => "train-bbreg",
            Stage::Detect => "detect",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
            Stage::Visualize => "visualize",
            Stage::Ablate => "ablate",
            Stage::Split => "split",
            Stage::TuneNms => "tune-nms",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(&self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::GenData => vec![],
            Stage::Propose | Stage::Split => vec![Stage::GenData],
            Stage::Extract | Stage::Visualize | Stage::Ablate => vec![Stage::Propose],
            Stage::TrainSvm | Stage::TrainBbreg => vec![Stage::Extract],
            Stage::Detect if cfg.detect.refine => vec![Stage::TrainSvm, Stage::TrainBbreg],
            Stage::Detect | Stage::TuneNms => vec![Stage::TrainSvm],
            Stage::Evaluate | Stage::Analyze => vec![Stage::Detect],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Content hash of the configuration a stage's outputs depend on, chained
/// through its upstream stages.
pub fn stage_hash(cfg: &PipelineConfig, stage: Stage) -> String {
    let mut h = Sha256::new();
    h.update(stage.name());
    for up in stage.upstream(cfg) {
        h.update(stage_hash(cfg, up));
    }
    let part = match stage {
        Stage::GenData => canonical_part(&cfg.dataset),
        Stage::Propose => canonical_part(&cfg.proposals),
        Stage::Extract => canonical_part(&(&cfg.warp, &cfg.features)),
        Stage::TrainSvm => canonical_part(&cfg.svm),
        Stage::TrainBbreg => canonical_part(&cfg.bbox),
        Stage::Detect => canonical_part(&cfg.detect),
        Stage::Evaluate | Stage::Analyze => canonical_part(&cfg.eval),
        Stage::Visualize => canonical_part(&(&cfg.warp, &cfg.features.conv, &cfg.visualize)),
        Stage::Ablate => canonical_part(&(
            &cfg.warp,
            &cfg.features,
            &cfg.svm,
            &cfg.bbox,
            &cfg.detect,
            &cfg.eval,
            &cfg.ablate,
        )),
        Stage::Split => canonical_part(&cfg.split),
        Stage::TuneNms => canonical_part(&(&cfg.detect, &cfg.eval, &cfg.tune)),
    };
    h.update(part);
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// In-memory data and chain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub image: Image,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub similarity_groups: Vec<String>,
    pub splits: BTreeMap<Split, Vec<Sample>>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        self.splits.get(&s).map_or(&[], Vec::as_slice)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-channel mean of the training images, used for mean subtraction
    /// and for filling patch samples outside the image.
    pub fn train_mean(&self) -> Result<Vec<f32>> {
        let imgs: Vec<Image> = self.split(Split::Train).iter().map(|s| s.image.clone()).collect();
        image_mean(&imgs)
    }
}

/// Generate every split. Image ids run train, then val, then test; pixels
/// are quantized to 8 bits so the in-memory dataset equals its files.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.scene.validate()?;
    let counts = [cfg.train_images, cfg.val_images, cfg.test_images];
    let mut splits = BTreeMap::new();
    let mut next = 0u64;
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        let ids: Vec<u64> = (next..next + n as u64).collect();
        next += n as u64;
        let samples = ids
            .par_iter()
            .map(|&id| {
                let (img, annotation) = generate_scene(&cfg.scene, id);
                let image = decode_netpbm(&encode_netpbm(&img), Path::new("<memory>"))?;
                Ok(Sample {
                    image_id: id,
                    image,
                    annotation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        splits.insert(split, samples);
    }
    Ok(Dataset {
        class_names: cfg.scene.class_names(),
        similarity_groups: cfg.scene.similarity_groups(),
        splits,
    })
}

pub fn build_proposer(cfg: &ProposalConfig, samples: &[Sample]) -> CombinedProposer {
    let mut parts: Vec<Box<dyn RegionProposer>> = Vec::new();
    if cfg.use_grid {
        parts.push(Box::new(GridProposer { cfg: cfg.grid.clone() }));
    }
    if cfg.use_jitter {
        parts.push(Box::new(JitterProposer {
            cfg: cfg.jitter.clone(),
            gt: samples.iter().map(|s| (s.image_id, s.annotation.all_boxes())).collect(),
        }));
    }
    CombinedProposer::new(parts)
}

pub fn propose_split(cfg: &ProposalConfig, samples: &[Sample]) -> Vec<ProposalSet> {
    let proposer = build_proposer(cfg, samples);
    samples
        .par_iter()
        .map(|s| proposer.propose(s.image_id, s.image.width(), s.image.height()))
        .collect()
}

pub fn build_extractor(cfg: &FeatureConfig, warp: &WarpConfig, channels: usize) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match cfg.kind {
        FeatureKind::Hog => Box::new(HogExtractor::new(cfg.hog, warp.out_size)?),
        FeatureKind::Conv => Box::new(ConvExtractor::new(&cfg.conv, warp.out_size, channels)?),
    })
}

/// Features of one image: one row per proposal, one row per annotated object.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub proposals: FeatureMatrix,
    pub gt: FeatureMatrix,
}

fn extract_boxes(
    extractor: &dyn FeatureExtractor,
    img: &Image,
    boxes: &[BoxCorners],
    warp: &WarpConfig,
    mean: &[f32],
) -> Result<FeatureMatrix> {
    let rows = boxes
        .iter()
        .map(|b| Ok(extractor.extract(&prepare_patch(img, b, warp, mean)?)?.values))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_rows(&rows, extractor.dim())
}

pub fn extract_split(
    extractor: &dyn FeatureExtractor,
    samples: &[Sample],
    proposals: &[ProposalSet],
    warp: &WarpConfig,
    mean: &[f32],
    with_gt: bool,
) -> Result<Vec<ImageFeatures>> {
    samples
        .par_iter()
        .zip(proposals)
        .map(|(s, p)| {
            let gt = if with_gt {
                extract_boxes(extractor, &s.image, &s.annotation.all_boxes(), warp, mean)?
            } else {
                FeatureMatrix::empty(extractor.dim())
            };
            Ok(ImageFeatures {
                proposals: extract_boxes(extractor, &s.image, &p.boxes, warp, mean)?,
                gt,
            })
        })
        .collect()
}

/// Per-class mining results plus the assembled model.
pub fn train_svms(
    samples: &[Sample],
    proposals: &[ProposalSet],
    feats: &[ImageFeatures],
    num_classes: usize,
    cfg: &SvmConfig,
) -> Result<(ClassifierModel, Vec<MiningResult>)> {
    let windows: Vec<ImageWindows<'_>> = samples
        .iter()
        .zip(proposals)
        .zip(feats)
        .map(|((s, p), f)| ImageWindows {
            annotation: &s.annotation,
            proposals: &p.boxes,
            proposal_features: &f.proposals,
            gt_features: &f.gt,
        })
        .collect();
    let results = (0..num_classes)
        .into_par_iter()
        .map(|c| mine_class(&windows, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let svms: Vec<_> = results.iter().map(|r| r.svm.clone()).collect();
    let model = ClassifierModel::from_svms((0..num_classes).collect(), &svms)?;
    Ok((model, results))
}

/// Each proposal goes to the class of its max-IoU object; the regressor
/// then keeps only pairs above the assignment threshold.
pub fn train_regressor(
    samples: &[Sample],
    proposals: &[ProposalSet],
    feats: &[ImageFeatures],
    num_classes: usize,
    dim: usize,
    cfg: &BBoxConfig,
) -> Result<BBoxRegressor> {
    let gts: Vec<Vec<Vec<BoxCorners>>> = samples
        .iter()
        .map(|s| (0..num_classes).map(|c| s.annotation.boxes_of(c)).collect())
        .collect();
    let mut per_class: Vec<Vec<RegressionSample<'_>>> = vec![Vec::new(); num_classes];
    for (k, s) in samples.iter().enumerate() {
        let all = s.annotation.all_boxes();
        for (i, p) in proposals[k].boxes.iter().enumerate() {
            let Some((gi, _)) = max_iou(p, &all) else { continue };
            let c = s.annotation.objects[gi].class_id;
            per_class[c].push(RegressionSample {
                features: feats[k].proposals.row(i),
                proposal: *p,
                gt_boxes: &gts[k][c],
            });
        }
    }
    train_bbox_regressor(&per_class, dim, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub raw: Vec<Detection>,
    /// Present when a regressor was supplied.
    pub refined: Option<Vec<Detection>>,
}

impl Detections {
    /// Refined detections when available, raw otherwise.
    pub fn final_dets(&self) -> &[Detection] {
        self.refined.as_deref().unwrap_or(&self.raw)
    }
}

pub fn detect_split(
    samples: &[Sample],
    proposals: &[ProposalSet],
    feats: &[ImageFeatures],
    model: &ClassifierModel,
    regressor: Option<&BBoxRegressor>,
    params: &DetectParams,
) -> Result<Detections> {
    let per_image = samples
        .par_iter()
        .zip(proposals)
        .zip(feats)
        .map(|((s, p), f)| {
            let sourced = detect_from_features(s.image_id, &p.boxes, &f.proposals, model, params)?;
            let raw: Vec<Detection> = sourced.iter().map(|d| d.detection).collect();
            let refined = match regressor {
                Some(r) => {
                    let rows: Vec<&[f64]> = sourced.iter().map(|d| f.proposals.row(d.row)).collect();
                    Some(refine(&raw, r, &rows)?)
                }
                None => None,
            };
            Ok((raw, refined))
        })
        .collect::<Result<Vec<_>>>()?;
    let raw = per_image.iter().flat_map(|(r, _)| r.iter().copied()).collect();
    let refined = regressor.map(|_| {
        per_image
            .iter()
            .flat_map(|(_, r)| r.as_deref().unwrap_or(&[]).iter().copied())
            .collect()
    });
    Ok(Detections { raw, refined })
}

fn annotations_of(samples: &[Sample]) -> Vec<Annotation> {
    samples.iter().map(|s| s.annotation.clone()).collect()
}

/// Outcome of the full chain for one configuration.
#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub raw: EvalReport,
    pub refined: Option<EvalReport>,
    pub model: ClassifierModel,
    pub mining: Vec<MiningResult>,
    pub regressor: Option<BBoxRegressor>,
    pub detections: Detections,
}

impl ChainOutcome {
    pub fn map_raw(&self) -> f64 {
        self.raw.map.unwrap_or(0.0)
    }

    pub fn map_refined(&self) -> Option<f64> {
        self.refined.as_ref().map(|r| r.map.unwrap_or(0.0))
    }
}

/// Train on the train split and evaluate on the test split, from
/// precomputed proposals and features. The regressor is trained and applied
/// only when `cfg.detect.refine` is set.
pub fn chain_from_features(
    cfg: &PipelineConfig,
    data: &Dataset,
    proposals: &SplitProposals,
    feats: &SplitFeatures,
) -> Result<ChainOutcome> {
    let nc = data.num_classes();
    let (train, test) = (data.split(Split::Train), data.split(Split::Test));
    let (model, mining) = train_svms(train, &proposals[&Split::Train], &feats[&Split::Train], nc, &cfg.svm)?;
    let regressor = if cfg.detect.refine {
        Some(train_regressor(
            train,
            &proposals[&Split::Train],
            &feats[&Split::Train],
            nc,
            model.dim,
            &cfg.bbox,
        )?)
    } else {
        None
    };
    let detections = detect_split(
        test,
        &proposals[&Split::Test],
        &feats[&Split::Test],
        &model,
        regressor.as_ref(),
        &cfg.detect.params(),
    )?;
    let anns = annotations_of(test);
    let raw = evaluate(&detections.raw, &anns, nc, cfg.eval.iou_thresh, cfg.eval.mode)?;
    let refined = match &detections.refined {
        Some(d) => Some(evaluate(d, &anns, nc, cfg.eval.iou_thresh, cfg.eval.mode)?),
        None => None,
    };
    Ok(ChainOutcome {
        raw,
        refined,
        model,
        mining,
        regressor,
        detections,
    })
}

pub type SplitProposals = BTreeMap<Split, Vec<ProposalSet>>;
pub type SplitFeatures = BTreeMap<Split, Vec<ImageFeatures>>;

/// Proposals and features for the train and test splits, in memory.
pub fn prepare_features(cfg: &PipelineConfig, data: &Dataset) -> Result<(SplitProposals, SplitFeatures)> {
    let extractor = build_extractor(&cfg.features, &cfg.warp, cfg.dataset.scene.channels)?;
    let mean = data.train_mean()?;
    let mut props = BTreeMap::new();
    let mut feats = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let p = propose_split(&cfg.proposals, data.split(split));
        let f = extract_split(
            extractor.as_ref(),
            data.split(split),
            &p,
            &cfg.warp,
            &mean,
            split == Split::Train,
        )?;
        props.insert(split, p);
        feats.insert(split, f);
    }
    Ok((props, feats))
}

/// The whole chain without touching the filesystem.
pub fn run_in_memory(cfg: &PipelineConfig) -> Result<ChainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.dataset)?;
    let (props, feats) = prepare_features(cfg, &data)?;
    chain_from_features(cfg, &data, &props, &feats)
}

// ---------------------------------------------------------------------------
// On-disk formats
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 8] = b"RDETFEA1";

/// Magic `RDETFEA1`, u32 version, u64 rows, u64 cols, then row-major
/// little-endian f64 values.
pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 8 * m.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    if bytes.len() < 28 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::decode(path, "not a feature block"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != 1 {
        return Err(Error::decode(
            path,
            format!("unsupported feature block version {version}"),
        ));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let body = &bytes[28..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
        return Err(Error::decode(path, "feature block size does not match its header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cols == 0 {
        return Ok(FeatureMatrix::empty(0));
    }
    FeatureMatrix::new(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    class_names: Vec<String>,
    similarity_groups: Vec<String>,
    splits: BTreeMap<Split, Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureManifest {
    hash: String,
    tag: String,
    dim: usize,
    /// `(image_id, proposal rows)` per split.
    splits: BTreeMap<Split, Vec<(u64, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    hash: String,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Outputs were already current; nothing was recomputed.
    pub cached: bool,
    /// Paths relative to the run directory.
    pub outputs: Vec<PathBuf>,
    /// The data product printed by `--stdout`.
    pub primary: Option<PathBuf>,
    pub summary: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path, stage: Stage) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_bytes(path: &Path, stage: Stage) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::decode(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// A configuration bound to a run directory. Every stage reads its inputs
/// from and writes its outputs under the run directory, and records a stamp
/// with the hash of the configuration it ran under.
pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, root: root.into() })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.path(format!("stamps/{}.json", stage.name()))
    }

    fn read_stamp(&self, stage: Stage) -> Result<Option<Stamp>> {
        let p = self.stamp_path(stage);
        match fs::read_to_string(&p) {
            Ok(t) => Ok(Some(from_json(&t, &p)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    }

    fn is_current(&self, stage: Stage) -> Result<bool> {
        Ok(match self.read_stamp(stage)? {
            Some(s) => s.hash == stage_hash(&self.cfg, stage) && s.outputs.iter().all(|o| self.path(o).exists()),
            None => false,
        })
    }

    /// Every transitive upstream stage must have run under this configuration.
    /// Direct inputs are checked before their own inputs, so the error names
    /// the nearest stage that needs to run.
    fn require_upstream(&self, stage: Stage) -> Result<()> {
        for up in stage.upstream(&self.cfg) {
            let path = self.stamp_path(up);
            match self.read_stamp(up)? {
                None => {
                    return Err(Error::MissingArtifact {
                        stage: up.name().into(),
                        path,
                    })
                }
                Some(s) if s.hash != stage_hash(&self.cfg, up) => {
                    return Err(Error::StaleArtifact {
                        stage: up.name().into(),
                        path,
                    })
                }
                Some(s) => {
                    if let Some(o) = s.outputs.iter().find(|o| !self.path(o).exists()) {
                        return Err(Error::MissingArtifact {
                            stage: up.name().into(),
                            path: self.path(o),
                        });
                    }
                }
            }
            self.require_upstream(up)?;
        }
        Ok(())
    }

    fn finish(
        &self,
        stage: Stage,
        outputs: Vec<PathBuf>,
        primary: Option<PathBuf>,
        summary: String,
    ) -> Result<StageReport> {
        let stamp = Stamp {
            stage: stage.name().into(),
            hash: stage_hash(&self.cfg, stage),
            outputs: outputs.clone(),
        };
        write_text(&self.stamp_path(stage), &to_json(&stamp))?;
        Ok(StageReport {
            stage,
            cached: false,
            outputs,
            primary,
            summary,
        })
    }

    fn primary_output(stage: Stage, cfg: &PipelineConfig) -> Option<PathBuf> {
        let p = match stage {
            Stage::GenData => "dataset/manifest.json",
            Stage::Propose => "proposals/test.txt",
            Stage::Extract => return None,
            Stage::TrainSvm => "models/svm.txt",
            Stage::TrainBbreg => "models/bbreg.txt",
            Stage::Detect if cfg.detect.refine => "detections/refined.txt",
            Stage::Detect => "detections/raw.txt",
            Stage::Evaluate => "eval/report.txt",
            Stage::Analyze => "analysis/fp_report.txt",
            Stage::Visualize => "visualize/index.tsv",
            Stage::Ablate => "ablate/table.txt",
            Stage::Split => "split/split.json",
            Stage::TuneNms => "tune/nms.txt",
        };
        Some(PathBuf::from(p))
    }

    /// Run one stage; a stage whose stamp and outputs are current is skipped.
    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        self.require_upstream(stage)?;
        if self.is_current(stage)? {
            let stamp = self.read_stamp(stage)?.expect("current stamp");
            return Ok(StageReport {
                stage,
                cached: true,
                outputs: stamp.outputs,
                primary: Self::primary_output(stage, &self.cfg),
                summary: format!("{stage}: up to date"),
            });
        }
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::Propose => self.propose(),
            Stage::Extract => self.extract(),
            Stage::TrainSvm => self.train_svm(),
            Stage::TrainBbreg => self.train_bbreg(),
            Stage::Detect => self.detect(),
            Stage::Evaluate => self.evaluate(),
            Stage::Analyze => self.analyze(),
            Stage::Visualize => self.visualize(),
            Stage::Ablate => self.ablate(),
            Stage::Split => self.split(),
            Stage::TuneNms => self.tune_nms(),
        }
    }

    /// Run the main chain from dataset generation through error analysis.
    pub fn run_chain(&self) -> Result<Vec<StageReport>> {
        Stage::CHAIN
            .into_iter()
            .filter(|s| *s != Stage::TrainBbreg || self.cfg.detect.refine)
            .map(|s| self.run_stage(s))
            .collect()
    }

    // -- loading ------------------------------------------------------------

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mpath = self.path("dataset/manifest.json");
        let manifest: DatasetManifest = from_json(&read_text(&mpath, Stage::GenData)?, &mpath)?;
        let nc = manifest.class_names.len();
        let mut splits = BTreeMap::new();
        for (split, ids) in &manifest.splits {
            let apath = self.path(format!("dataset/annotations/{}.txt", split.name()));
            let anns = parse_annotations(&read_text(&apath, Stage::GenData)?, ids, nc, &apath)?;
            let samples = ids
                .par_iter()
                .zip(anns)
                .map(|(&id, annotation)| {
                    let ipath = self.path(format!("dataset/images/{id}.pgm"));
                    if !ipath.exists() {
                        return Err(Error::MissingArtifact {
                            stage: Stage::GenData.name().into(),
                            path: ipath,
                        });
                    }
                    Ok(Sample {
                        image_id: id,
                        image: load_image(&ipath)?,
                        annotation,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.insert(*split, samples);
        }
        Ok(Dataset {
            class_names: manifest.class_names,
            similarity_groups: manifest.similarity_groups,
            splits,
        })
    }

    pub fn load_proposals(&self, data: &Dataset) -> Result<SplitProposals> {
        let mut out = BTreeMap::new();
        for (split, samples) in &data.splits {
            let path = self.path(format!("proposals/{}.txt", split.name()));
            let sets = parse_proposals(&read_text(&path, Stage::Propose)?, &path)?;
            let by_id: BTreeMap<u64, ProposalSet> = sets.into_iter().map(|s| (s.image_id, s)).collect();
            let aligned = samples
                .iter()
                .map(|s| {
                    by_id.get(&s.image_id).cloned().unwrap_or_else(|| ProposalSet {
                        image_id: s.image_id,
                        boxes: Vec::new(),
                        source_tag: String::new(),
                    })
                })
                .collect();
            out.insert(*split, aligned);
        }
        Ok(out)
    }

    fn feature_dir(&self, cfg: &PipelineConfig) -> PathBuf {
        PathBuf::from(format!("features/{}", &stage_hash(cfg, Stage::Extract)[..16]))
    }

    /// Load the feature cache for `cfg`, computing and writing it on a miss.
    /// Returns the features and whether the cache was hit.
    fn ensure_features(
        &self,
        cfg: &PipelineConfig,
        data: &Dataset,
        proposals: &SplitProposals,
    ) -> Result<(SplitFeatures, bool, Vec<PathBuf>)> {
        let dir = self.feature_dir(cfg);
        let mpath = self.path(dir.join("manifest.json"));
        let hash = stage_hash(cfg, Stage::Extract);
        if let Ok(text) = fs::read_to_string(&mpath) {
            let manifest: FeatureManifest = from_json(&text, &mpath)?;
            if manifest.hash == hash {
                let feats = self.load_features(&dir, data)?;
                return Ok((feats, true, vec![dir.join("manifest.json")]));
            }
        }
        let extractor = build_extractor(&cfg.features, &cfg.warp, cfg.dataset.scene.channels)?;
        let mean = data.train_mean()?;
        let mut feats = BTreeMap::new();
        let mut manifest = FeatureManifest {
            hash,
            tag: extractor.tag().to_string(),
            dim: extractor.dim(),
            splits: BTreeMap::new(),
        };
        for (split, samples) in &data.splits {
            let f = extract_split(
                extractor.as_ref(),
                samples,
                &proposals[split],
                &cfg.warp,
                &mean,
                *split == Split::Train,
            )?;
            samples.par_iter().zip(&f).try_for_each(|(s, imf)| -> Result<()> {
                let base = self.path(dir.join(split.name()));
                write_atomic(
                    &base.join(format!("{}.bin", s.image_id)),
                    &encode_features(&imf.proposals),
                )?;
                if *split == Split::Train {
                    write_atomic(&base.join(format!("{}.gt.bin", s.image_id)), &encode_features(&imf.gt))?;
                }
                Ok(())
            })?;
            manifest.splits.insert(
                *split,
                samples
                    .iter()
                    .zip(&f)
                    .map(|(s, imf)| (s.image_id, imf.proposals.rows()))
                    .collect(),
            );
            feats.insert(*split, f);
        }
        // manifest last: its presence marks a complete cache
        write_text(&mpath, &to_json(&manifest))?;
        Ok((feats, false, vec![dir.join("manifest.json")]))
    }

    fn load_features(&self, dir: &Path, data: &Dataset) -> Result<SplitFeatures> {
        let mut out = BTreeMap::new();
        for (split, samples) in &data.splits {
            let base = self.path(dir.join(split.name()));
            let f = samples
                .par_iter()
                .map(|s| {
                    let p = base.join(format!("{}.bin", s.image_id));
                    let proposals = decode_features(&read_bytes(&p, Stage::Extract)?, &p)?;
                    let gt = if *split == Split::Train {
                        let g = base.join(format!("{}.gt.bin", s.image_id));
                        decode_features(&read_bytes(&g, Stage::Extract)?, &g)?
                    } else {
                        FeatureMatrix::empty(proposals.cols())
                    };
                    Ok(ImageFeatures { proposals, gt })
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(*split, f);
        }
        Ok(out)
    }

    pub fn load_svm(&self) -> Result<ClassifierModel> {
        let p = self.path("models/svm.bin");
        ClassifierModel::from_bytes(&read_bytes(&p, Stage::TrainSvm)?, &p)
    }

    pub fn load_regressor(&self) -> Result<BBoxRegressor> {
        let p = self.path("models/bbreg.bin");
        BBoxRegressor::from_bytes(&read_bytes(&p, Stage::TrainBbreg)?, &p)
    }

    fn load_detections(&self, refined: bool) -> Result<Vec<Detection>> {
        let p = self.path(if refined {
            "detections/refined.txt"
        } else {
            "detections/raw.txt"
        });
        parse_detections(&read_text(&p, Stage::Detect)?, &p)
    }

    // -- stages ---------------------------------------------------------------

    fn gen_data(&self) -> Result<StageReport> {
        let data = generate_dataset(&self.cfg.dataset)?;
        let mut outputs = vec![];
        for (split, samples) in &data.splits {
            samples
                .par_iter()
                .try_for_each(|s| save_image(&s.image, self.path(format!("dataset/images/{}.pgm", s.image_id))))?;
            let rel = PathBuf::from(format!("dataset/annotations/{}.txt", split.name()));
            write_text(&self.path(&rel), &format_annotations(&annotations_of(samples)))?;
            outputs.push(rel);
        }
        let manifest = DatasetManifest {
            class_names: data.class_names.clone(),
            similarity_groups: data.similarity_groups.clone(),
            splits: data
                .splits
                .iter()
                .map(|(k, v)| (*k, v.iter().map(|s| s.image_id).collect()))
                .collect(),
        };
        write_text(&self.path("dataset/manifest.json"), &to_json(&manifest))?;
        outputs.push("dataset/manifest.json".into());
        let counts: Vec<String> = data
            .splits
            .iter()
            .map(|(k, v)| format!("{} {}", v.len(), k.name()))
            .collect();
        let total: usize = data.splits.values().map(Vec::len).sum();
        let summary = format!("gen-data: {total} images ({})", counts.join(", "));
        self.finish(
            Stage::GenData,
            outputs,
            Self::primary_output(Stage::GenData, &self.cfg),
            summary,
        )
    }

    fn propose(&self) -> Result<StageReport> {
        let data = self.load_dataset()?;
        let mut outputs = vec![];
        let mut summary = String::from("propose:");
        for (split, samples) in &data.splits {
            let sets = propose_split(&self.cfg.proposals, samples);
            let rel = PathBuf::from(format!("proposals/{}.txt", split.name()));
            write_text(&self.path(&rel), &format_proposals(&sets))?;
            outputs.push(rel);
            let total: usize = sets.iter().map(ProposalSet::len).sum();
            let recall = mean_recall(samples, &sets);
            write!(summary, " {} {total} boxes (recall@0.5 {recall:.3});", split.name()).unwrap();
        }
        self.finish(
            Stage::Propose,
            outputs,
            Self::primary_output(Stage::Propose, &self.cfg),
            summary,
        )
    }

    fn extract(&self) -> Result<StageReport> {
        let data = self.load_dataset()?;
        let props = self.load_proposals(&data)?;
        let (feats, hit, outputs) = self.ensure_features(&self.cfg, &data, &props)?;
        let rows: usize = feats.values().flatten().map(|f| f.proposals.rows()).sum();
        let summary = format!(
            "extract: {} windows, {} features{}",
            rows,
            self.cfg.features.kind,
            if hit { " (cache hit)" } else { "" }
        );
        let mut report = self.finish(Stage::Extract, outputs, None, summary)?;
        report.cached = hit;
        Ok(report)
    }

    fn training_inputs(&self) -> Result<(Dataset, SplitProposals, SplitFeatures)> {
        let data = self.load_dataset()?;
        let props = self.load_proposals(&data)?;
        let dir = self.feature_dir(&self.cfg);
        let feats = self.load_features(&dir, &data)?;
        Ok((data, props, feats))
    }

    fn train_svm(&self) -> Result<StageReport> {
        let (data, props, feats) = self.training_inputs()?;
        let (model, mining) = train_svms(
            data.split(Split::Train),
            &props[&Split::Train],
            &feats[&Split::Train],
            data.num_classes(),
            &self.cfg.svm,
        )?;
        write_atomic(&self.path("models/svm.bin"), &model.to_bytes())?;
        let mut text = model.summary(&data.class_names);
        text.push_str("\nclass\trounds\tcache\tunseen\tobjective\tduality_gap\tconverged\tadded_per_round\n");
        for (c, m) in mining.iter().enumerate() {
            writeln!(
                text,
                "{c}\t{}\t{}\t{}\t{:.6}\t{:.3e}\t{}\t{:?}",
                m.rounds,
                m.cache_size,
                m.unseen,
                m.svm.objective,
                m.svm.duality_gap,
                m.svm.converged,
                m.added_per_round
            )
            .unwrap();
        }
        write_text(&self.path("models/svm.txt"), &text)?;
        let summary = format!(
            "train-svm: {} classes, dim {}, mining rounds {:?}",
            model.class_ids.len(),
            model.dim,
            mining.iter().map(|m| m.rounds).collect::<Vec<_>>()
        );
        self.finish(
            Stage::TrainSvm,
            vec!["models/svm.bin".into(), "models/svm.txt".into()],
            Self::primary_output(Stage::TrainSvm, &self.cfg),
            summary,
        )
    }

    fn train_bbreg(&self) -> Result<StageReport> {
        let (data, props, feats) = self.training_inputs()?;
        let dim = feats[&Split::Train].first().map_or(0, |f| f.proposals.cols());
        let reg = train_regressor(
            data.split(Split::Train),
            &props[&Split::Train],
            &feats[&Split::Train],
            data.num_classes(),
            dim,
            &self.cfg.bbox,
        )?;
        write_atomic(&self.path("models/bbreg.bin"), &reg.to_bytes())?;
        write_text(&self.path("models/bbreg.txt"), &reg.summary(&data.class_names))?;
        let summary = format!(
            "train-bbreg: pairs per class {:?}",
            reg.classes.iter().map(|c| c.pairs).collect::<Vec<_>>()
        );
        self.finish(
            Stage::TrainBbreg,
            vec!["models/bbreg.bin".into(), "models/bbreg.txt".into()],
            Self::primary_output(Stage::TrainBbreg, &self.cfg),
            summary,
        )
    }

    fn detect(&self) -> Result<StageReport> {
        let model = self.load_svm()?;
        let regressor = if self.cfg.detect.refine {
            Some(self.load_regressor()?)
        } else {
            None
        };
        let (data, props, feats) = self.training_inputs()?;
        let dets = detect_split(
            data.split(Split::Test),
            &props[&Split::Test],
            &feats[&Split::Test],
            &model,
            regressor.as_ref(),
            &self.cfg.detect.params(),
        )?;
        write_text(&self.path("detections/raw.txt"), &format_detections(&dets.raw))?;
        let mut outputs = vec![PathBuf::from("detections/raw.txt")];
        if let Some(r) = &dets.refined {
            write_text(&self.path("detections/refined.txt"), &format_detections(r))?;
            outputs.push("detections/refined.txt".into());
        }
        let summary = format!(
            "detect: {} detections on {} test images",
            dets.raw.len(),
            data.split(Split::Test).len()
        );
        self.finish(
            Stage::Detect,
            outputs,
            Self::primary_output(Stage::Detect, &self.cfg),
            summary,
        )
    }

    fn test_annotations(&self) -> Result<(Dataset, Vec<Annotation>)> {
        let data = self.load_dataset()?;
        let anns = annotations_of(data.split(Split::Test));
        Ok((data, anns))
    }

    fn evaluate(&self) -> Result<StageReport> {
        let (data, anns) = self.test_annotations()?;
        let nc = data.num_classes();
        let e = &self.cfg.eval;
        let raw = evaluate(&self.load_detections(false)?, &anns, nc, e.iou_thresh, e.mode)?;
        let refined = if self.cfg.detect.refine {
            Some(evaluate(&self.load_detections(true)?, &anns, nc, e.iou_thresh, e.mode)?)
        } else {
            None
        };
        let primary = refined.as_ref().unwrap_or(&raw);
        let mut text = format_report(primary, None, &data.class_names);
        let fmt = |r: &EvalReport| r.map.map_or("n/a".into(), |m| format!("{:.2}", 100.0 * m));
        writeln!(text, "\nmAP without box refinement\t{}", fmt(&raw)).unwrap();
        if let Some(r) = &refined {
            writeln!(text, "mAP with box refinement\t{}", fmt(r)).unwrap();
        }
        #[derive(Serialize)]
        struct Record<'a> {
            config_hash: String,
            raw: &'a EvalReport,
            refined: Option<&'a EvalReport>,
        }
        let record = Record {
            config_hash: self.cfg.hash(),
            raw: &raw,
            refined: refined.as_ref(),
        };
        write_text(&self.path("eval/report.txt"), &text)?;
        write_text(&self.path("eval/report.json"), &to_json(&record))?;
        write_text(&self.path("eval/pr_curves.tsv"), &format_pr_curves(primary))?;
        let summary = format!("evaluate: mAP {}", fmt(primary));
        self.finish(
            Stage::Evaluate,
            vec![
                "eval/report.txt".into(),
                "eval/report.json".into(),
                "eval/pr_curves.tsv".into(),
            ],
            Self::primary_output(Stage::Evaluate, &self.cfg),
            summary,
        )
    }

    fn analyze(&self) -> Result<StageReport> {
        let (data, anns) = self.test_annotations()?;
        let dets = self.load_detections(self.cfg.detect.refine)?;
        let e = &self.cfg.eval;
        let report = evaluate(&dets, &anns, data.num_classes(), e.iou_thresh, e.mode)?;
        let fp: FpBreakdown = fp_analysis(
            &dets,
            &anns,
            &data.similarity_groups,
            e.fp_top_n,
            &FpRules {
                iou_thresh: e.iou_thresh,
                overlap_floor: e.fp_overlap_floor,
            },
        )?;
        write_text(
            &self.path("analysis/fp_report.txt"),
            &format_report(&report, Some(&fp), &data.class_names),
        )?;
        write_text(&self.path("analysis/fp.json"), &to_json(&fp))?;
        let t = &fp.total;
        let summary = format!("analyze: Loc {} Sim {} Oth {} BG {}", t.loc, t.sim, t.oth, t.bg);
        self.finish(
            Stage::Analyze,
            vec!["analysis/fp_report.txt".into(), "analysis/fp.json".into()],
            Self::primary_output(Stage::Analyze, &self.cfg),
            summary,
        )
    }

    fn visualize(&self) -> Result<StageReport> {
        let data = self.load_dataset()?;
        let props = self.load_proposals(&data)?;
        let stack = ConvStack::new(
            &self.cfg.features.conv,
            self.cfg.warp.out_size,
            self.cfg.dataset.scene.channels,
        )?;
        let mean = data.train_mean()?;
        let test = data.split(Split::Test);
        let n = test.len().min(self.cfg.visualize.max_images);
        let regions: Vec<Region<'_>> = test[..n]
            .iter()
            .zip(&props[&Split::Test])
            .flat_map(|(s, p)| {
                p.boxes.iter().map(move |b| Region {
                    image_id: s.image_id,
                    image: &s.image,
                    bbox: *b,
                })
            })
            .collect();
        let units = if self.cfg.visualize.units.is_empty() {
            let (size, channels) = stack.output_shape();
            (0..channels.min(4))
                .map(|c| UnitRef {
                    y: size / 2,
                    x: size / 2,
                    channel: c,
                })
                .collect()
        } else {
            self.cfg.visualize.units.clone()
        };
        let v = &self.cfg.visualize;
        let mut outputs = vec![];
        let mut index = String::from("unit\tmontage\tsidecar\ttop_activation\n");
        for unit in &units {
            let ranked = top_activations(&stack, unit, &regions, &self.cfg.warp, &mean, v.top_k, v.nms_thresh)?;
            let patches = ranked
                .iter()
                .map(|r| warp_region(regions[r.index].image, &r.bbox, &self.cfg.warp, &mean))
                .collect::<Result<Vec<_>>>()?;
            let field = stack.receptive_field(unit)?;
            let (montage, sidecar) = render_montage(&patches, &ranked, &field, v.columns)?;
            let stem = format!("visualize/unit_y{}_x{}_c{}", unit.y, unit.x, unit.channel);
            save_image(&montage, self.path(format!("{stem}.ppm")))?;
            write_text(&self.path(format!("{stem}.tsv")), &sidecar)?;
            writeln!(
                index,
                "{},{},{}\t{stem}.ppm\t{stem}.tsv\t{}",
                unit.y,
                unit.x,
                unit.channel,
                ranked.first().map_or(0.0, |r| r.activation)
            )
            .unwrap();
            outputs.push(PathBuf::from(format!("{stem}.ppm")));
            outputs.push(PathBuf::from(format!("{stem}.tsv")));
        }
        write_text(&self.path("visualize/index.tsv"), &index)?;
        outputs.push("visualize/index.tsv".into());
        let summary = format!("visualize: {} montages over {} regions", units.len(), regions.len());
        self.finish(
            Stage::Visualize,
            outputs,
            Self::primary_output(Stage::Visualize, &self.cfg),
            summary,
        )
    }

    fn ablate(&self) -> Result<StageReport> {
        let data = self.load_dataset()?;
        let props = self.load_proposals(&data)?;
        #[derive(Serialize)]
        struct Row {
            features: FeatureKind,
            refinement: bool,
            map: Option<f64>,
        }
        let mut rows = Vec::new();
        for kind in &self.cfg.ablate.feature_kinds {
            let mut cfg = self.cfg.clone();
            cfg.features.kind = *kind;
            if self.cfg.ablate.with_refinement {
                cfg.detect.refine = true;
            }
            let (feats, _, _) = self.ensure_features(&cfg, &data, &props)?;
            let out = chain_from_features(&cfg, &data, &props, &feats)?;
            if self.cfg.ablate.with_refinement {
                rows.push(Row {
                    features: *kind,
                    refinement: false,
                    map: out.raw.map,
                });
                rows.push(Row {
                    features: *kind,
                    refinement: true,
                    map: out.refined.as_ref().and_then(|r| r.map),
                });
            } else {
                rows.push(Row {
                    features: *kind,
                    refinement: cfg.detect.refine,
                    map: out.refined.as_ref().unwrap_or(&out.raw).map,
                });
            }
        }
        let mut text = String::from("# mAP (%) per variant\nfeatures\trefinement\tmAP\n");
        for r in &rows {
            let m = r.map.map_or("n/a".into(), |m| format!("{:.2}", 100.0 * m));
            writeln!(text, "{}\t{}\t{m}", r.features, if r.refinement { "yes" } else { "no" }).unwrap();
        }
        write_text(&self.path("ablate/table.txt"), &text)?;
        write_text(&self.path("ablate/table.json"), &to_json(&rows))?;
        self.finish(
            Stage::Ablate,
            vec!["ablate/table.txt".into(), "ablate/table.json".into()],
            Self::primary_output(Stage::Ablate, &self.cfg),
            format!("ablate: {} rows", rows.len()),
        )
    }

    fn split(&self) -> Result<StageReport> {
        let data = self.load_dataset()?;
        let nc = data.num_classes();
        let images: Vec<(u64, Vec<usize>)> = data
            .split(Split::Train)
            .iter()
            .map(|s| (s.image_id, s.annotation.class_counts(nc)))
            .collect();
        let s = &self.cfg.split;
        let result: SplitResult = balanced_split(&images, s.candidates, s.local_search_steps, s.seed)?;
        write_text(&self.path("split/split.json"), &to_json(&result))?;
        let summary = format!(
            "split: {} / {} images, max relative imbalance {:.4}, median {:.4}",
            result.side_a.len(),
            result.side_b.len(),
            result.max_relative_imbalance,
            result.median_relative_imbalance
        );
        self.finish(
            Stage::Split,
            vec!["split/split.json".into()],
            Self::primary_output(Stage::Split, &self.cfg),
            summary,
        )
    }

    fn tune_nms(&self) -> Result<StageReport> {
        let model = self.load_svm()?;
        let (data, props, feats) = self.training_inputs()?;
        let val = data.split(Split::Val);
        if val.is_empty() {
            return Err(Error::Config("tune-nms needs dataset.val_images > 0".into()));
        }
        let nc = data.num_classes();
        let anns = annotations_of(val);
        let e = &self.cfg.eval;
        // ap[t][c]
        let mut ap = Vec::new();
        for &t in &self.cfg.tune.nms_grid {
            let params = DetectParams {
                nms_thresh: t,
                ..self.cfg.detect.params()
            };
            let dets = detect_split(val, &props[&Split::Val], &feats[&Split::Val], &model, None, &params)?;
            let r = evaluate(&dets.raw, &anns, nc, e.iou_thresh, e.mode)?;
            ap.push(r.per_class.iter().map(|c| c.ap.unwrap_or(0.0)).collect::<Vec<_>>());
        }
        #[derive(Serialize)]
        struct Choice {
            class_id: usize,
            nms_thresh: f64,
            ap: f64,
        }
        let grid = &self.cfg.tune.nms_grid;
        let choices: Vec<Choice> = (0..nc)
            .map(|c| {
                let mut best = 0;
                for t in 1..grid.len() {
                    if ap[t][c] > ap[best][c] {
                        best = t;
                    }
                }
                Choice {
                    class_id: c,
                    nms_thresh: grid.get(best).copied().unwrap_or(self.cfg.detect.nms_thresh),
                    ap: ap.get(best).map_or(0.0, |a| a[c]),
                }
            })
            .collect();
        let mut text = String::from("# validation AP (%) per NMS threshold\nclass");
        for t in grid {
            write!(text, "\t{t}").unwrap();
        }
        text.push_str("\tbest\n");
        for ch in &choices {
            write!(text, "{}", data.class_names[ch.class_id]).unwrap();
            for row in &ap {
                write!(text, "\t{:.2}", 100.0 * row[ch.class_id]).unwrap();
            }
            writeln!(text, "\t{}", ch.nms_thresh).unwrap();
        }
        write_text(&self.path("tune/nms.txt"), &text)?;
        write_text(&self.path("tune/nms.json"), &to_json(&choices))?;
        self.finish(
            Stage::TuneNms,
            vec!["tune/nms.txt".into(), "tune/nms.json".into()],
            Self::primary_output(Stage::TuneNms, &self.cfg),
            format!(
                "tune-nms: best thresholds {:?}",
                choices.iter().map(|c| c.nms_thresh).collect::<Vec<_>>()
            ),
        )
    }
}

fn mean_recall(samples: &[Sample], sets: &[ProposalSet]) -> f64 {
    let (mut hit, mut total) = (0.0, 0usize);
    for (s, p) in samples.iter().zip(sets) {
        let gts = s.annotation.all_boxes();
        hit += proposal_recall(&p.boxes, &gts, 0.5) * gts.len() as f64;
        total += gts.len();
    }
    if total == 0 {
        1.0
    } else {
        hit / total as f64
    }
}
