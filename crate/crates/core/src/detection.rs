//! Test-time detection: batched scoring, per-class greedy NMS, one-shot box refinement.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{prepare_patch, FeatureExtractor};
use crate::geometry::{apply_deltas, iou, BoxCorners};
use crate::imaging::{Image, WarpConfig};
use crate::proposals::RegionProposer;
use crate::training::{BBoxRegressor, ClassifierModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BoxCorners,
    pub score: f64,
}

/// Dense row-major matrix; rows are regions, columns feature dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Proposals x classes.
pub type ScoreMatrix = FeatureMatrix;

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite matrix entry".into()));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn empty(cols: usize) -> Self {
        FeatureMatrix {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Result<Self> {
        let mut m = FeatureMatrix::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// New matrix from a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `S = F W + b`: every proposal scored against every class at once.
///
/// Each entry is the left-to-right dot product plus the class bias, so it
/// matches an element-wise loop with the same order exactly.
pub fn score_all(features: &FeatureMatrix, model: &ClassifierModel) -> Result<ScoreMatrix> {
    if features.cols() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            actual: features.cols(),
        });
    }
    let classes = model.weights.len();
    let mut data = vec![0.0; features.rows() * classes];
    data.par_chunks_mut(classes.max(1))
        .take(features.rows())
        .enumerate()
        .for_each(|(i, out)| {
            let row = features.row(i);
            for (c, o) in out.iter_mut().enumerate() {
                *o = dot(row, &model.weights[c]) + model.biases[c];
            }
        });
    Ok(FeatureMatrix {
        rows: features.rows(),
        cols: classes,
        data,
    })
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score (ties: lower index first); a box is
/// kept iff its IoU with every already-kept box is `<= overlap_thresh`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BoxCorners], scores: &[f64], overlap_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // + 0.0 folds -0.0 into 0.0 so the two tie like any other equal scores
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= overlap_thresh) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub nms_thresh: f64,
    /// Detections scoring below this are dropped before NMS.
    pub score_floor: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            nms_thresh: 0.3,
            score_floor: -1.0,
        }
    }
}

/// A detection together with the feature row of the proposal it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourcedDetection {
    pub detection: Detection,
    pub row: usize,
}

/// Score precomputed proposal features, then per-class floor + NMS.
/// Output is ordered by class, then by descending score.
pub fn detect_from_features(
    image_id: u64,
    boxes: &[BoxCorners],
    features: &FeatureMatrix,
    model: &ClassifierModel,
    params: &DetectParams,
) -> Result<Vec<SourcedDetection>> {
    if boxes.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: boxes.len(),
            actual: features.rows(),
        });
    }
    let scores = score_all(features, model)?;
    let mut out = Vec::new();
    for (c, &class_id) in model.class_ids.iter().enumerate() {
        let rows: Vec<usize> = (0..boxes.len())
            .filter(|&i| scores.get(i, c) >= params.score_floor)
            .collect();
        let b: Vec<BoxCorners> = rows.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = rows.iter().map(|&i| scores.get(i, c)).collect();
        for k in nms(&b, &s, params.nms_thresh) {
            out.push(SourcedDetection {
                detection: Detection {
                    image_id,
                    class_id,
                    bbox: b[k],
                    score: s[k],
                },
                row: rows[k],
            });
        }
    }
    Ok(out)
}

/// Proposals, warp + mean subtraction, features, scores, per-class NMS.
#[allow(clippy::too_many_arguments)]
pub fn detect_image(
    image_id: u64,
    image: &Image,
    proposer: &dyn RegionProposer,
    extractor: &dyn FeatureExtractor,
    model: &ClassifierModel,
    warp: &WarpConfig,
    mean: &[f32],
    params: &DetectParams,
) -> Result<(Vec<SourcedDetection>, FeatureMatrix)> {
    let proposals = proposer.propose(image_id, image.width(), image.height());
    let rows = proposals
        .boxes
        .iter()
        .map(|b| Ok(extractor.extract(&prepare_patch(image, b, warp, mean)?)?.values))
        .collect::<Result<Vec<_>>>()?;
    let features = FeatureMatrix::from_rows(&rows, extractor.dim())?;
    let dets = detect_from_features(image_id, &proposals.boxes, &features, model, params)?;
    Ok((dets, features))
}

/// Predict and apply class-specific deltas exactly once per detection.
/// Scores are untouched; classes without a trained regressor keep their box.
pub fn refine(dets: &[Detection], regressor: &BBoxRegressor, features: &[&[f64]]) -> Result<Vec<Detection>> {
    if dets.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: dets.len(),
            actual: features.len(),
        });
    }
    dets.iter()
        .zip(features)
        .map(|(d, f)| {
            let Some(deltas) = regressor.predict(d.class_id, f)? else {
                return Ok(*d);
            };
            let refined = apply_deltas(&d.bbox.to_center(), &deltas).to_corners();
            Ok(Detection { bbox: refined, ..*d })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Line format: image_id class_id score x_min y_min x_max y_max
// ---------------------------------------------------------------------------

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            d.image_id, d.class_id, d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
        )
        .unwrap();
    }
    out
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::decode(path, format!("line {}: malformed detection record", lineno + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let nums: Vec<f64> = f[2..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if !nums[0].is_finite() {
            return Err(bad());
        }
        out.push(Detection {
            image_id: f[0].parse().map_err(|_| bad())?,
            class_id: f[1].parse().map_err(|_| bad())?,
            score: nums[0],
            bbox: BoxCorners::new(nums[1], nums[2], nums[3], nums[4]).map_err(|_| bad())?,
        });
    }
    Ok(out)
}
