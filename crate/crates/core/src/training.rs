//! Region labeling, linear SVMs with hard-negative mining, and box regression.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{dot, FeatureMatrix};
use crate::error::{Error, Result};
use crate::geometry::{iou, regression_targets, BoxCorners, RegressionDeltas};
use crate::synthdata::Annotation;

// ---------------------------------------------------------------------------
// Labeling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionLabel {
    Positive(usize),
    Negative(usize),
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmLabels {
    /// One label per input proposal; proposals are never positive.
    pub proposal_labels: Vec<RegionLabel>,
    /// Ground-truth boxes of the class, the only positives.
    pub positives: Vec<BoxCorners>,
}

/// Largest IoU of `b` against `gts`, with the index of the first maximizer.
pub fn max_iou(b: &BoxCorners, gts: &[BoxCorners]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

/// Labels for training the detector of `class_id`: ground-truth boxes are
/// positive, proposals overlapping every instance of the class by less than
/// `neg_thresh` are negative, everything else is ignored.
pub fn label_for_svm(proposals: &[BoxCorners], annotation: &Annotation, class_id: usize, neg_thresh: f64) -> SvmLabels {
    let gts = annotation.boxes_of(class_id);
    let proposal_labels = proposals
        .iter()
        .map(|p| {
            let best = max_iou(p, &gts).map_or(0.0, |(_, v)| v);
            if best < neg_thresh {
                RegionLabel::Negative(class_id)
            } else {
                RegionLabel::Ignore
            }
        })
        .collect();
    SvmLabels {
        proposal_labels,
        positives: gts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FinetuneLabel {
    Foreground { class_id: usize, gt_index: usize, iou: f64 },
    Background,
}

/// Assign each proposal to its max-IoU ground truth (any class); foreground
/// for that class iff the overlap is at least `pos_thresh`.
pub fn label_for_finetune(proposals: &[BoxCorners], annotation: &Annotation, pos_thresh: f64) -> Vec<FinetuneLabel> {
    let gts = annotation.all_boxes();
    proposals
        .iter()
        .map(|p| match max_iou(p, &gts) {
            Some((gi, v)) if v >= pos_thresh => FinetuneLabel::Foreground {
                class_id: annotation.objects[gi].class_id,
                gt_index: gi,
                iou: v,
            },
            _ => FinetuneLabel::Background,
        })
        .collect()
}

/// Draw `n_pos` foreground and `n_bg` background indices, uniformly without
/// replacement when a pool is large enough and with replacement otherwise.
/// The combined batch is shuffled.
pub fn sample_minibatch(labels: &[FinetuneLabel], n_pos: usize, n_bg: usize, seed: u64) -> Result<Vec<usize>> {
    let (fg, bg): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| matches!(labels[i], FinetuneLabel::Foreground { .. }));
    if (n_pos > 0 && fg.is_empty()) || (n_bg > 0 && bg.is_empty()) {
        return Err(Error::Training(format!(
            "empty sampling pool: {} foreground, {} background",
            fg.len(),
            bg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |pool: &[usize], quota: usize| -> Vec<usize> {
        if pool.len() >= quota {
            pool.choose_multiple(&mut rng, quota).copied().collect()
        } else {
            (0..quota).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    };
    let mut batch = draw(&fg, n_pos);
    batch.extend(draw(&bg, n_bg));
    batch.shuffle(&mut rng);
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Linear SVM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Hinge-loss weight against the `1/2 |w|^2` regularizer.
    pub c: f64,
    /// Proposals below this IoU with every instance are negatives.
    pub neg_iou_thresh: f64,
    /// Target relative duality gap.
    pub tolerance: f64,
    /// Cap on Newton iterations per solve.
    pub max_iters: usize,
    /// Unseen negatives scoring above this join the cache.
    pub hard_threshold: f64,
    pub max_mining_rounds: usize,
    pub initial_negatives_per_image: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            neg_iou_thresh: 0.3,
            tolerance: 1e-6,
            max_iters: 500,
            hard_threshold: -1.0,
            max_mining_rounds: 20,
            initial_negatives_per_image: 4,
            seed: 5,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config("svm c must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.neg_iou_thresh) {
            return Err(Error::Config("svm neg_iou_thresh must be in [0, 0.5]".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iters == 0 {
            return Err(Error::Config("svm tolerance and max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Primal objective of the returned solution.
    pub objective: f64,
    /// Best primal objective seen after each solver iteration.
    pub history: Vec<f64>,
    pub duality_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearSvm {
    #[inline]
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(x, &self.weights) + self.bias
    }
}

/// `1/2 (|w|^2 + b^2) + C sum_i max(0, 1 - y_i (w.x_i + b))`.
///
/// The bias is regularized like any other weight (constant-1 feature).
pub fn svm_objective(weights: &[f64], bias: f64, x: &FeatureMatrix, y: &[f64], c: f64) -> f64 {
    let reg = 0.5 * (dot(weights, weights) + bias * bias);
    let hinge: f64 = x
        .iter_rows()
        .zip(y)
        .map(|(row, yi)| (1.0 - yi * (dot(row, weights) + bias)).max(0.0))
        .sum();
    reg + c * hinge
}

/// Quadratically smoothed hinge of slack `t = 1 - z`: value and derivative.
#[inline]
fn smooth_hinge(t: f64, mu: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= mu {
        (t - 0.5 * mu, 1.0)
    } else {
        (t * t / (2.0 * mu), t / mu)
    }
}

struct SvmProblem<'a> {
    x: &'a FeatureMatrix,
    y: &'a [f64],
    c: f64,
}

impl SvmProblem<'_> {
    /// Slacks `1 - y_i (w.x_i + b)` for augmented `w` (bias last).
    fn slacks(&self, w: &[f64]) -> Vec<f64> {
        let d = self.x.cols();
        (0..self.x.rows())
            .into_par_iter()
            .map(|i| 1.0 - self.y[i] * (dot(self.x.row(i), &w[..d]) + w[d]))
            .collect()
    }

    fn primal(&self, w: &[f64], slacks: &[f64]) -> f64 {
        0.5 * dot(w, w) + self.c * slacks.iter().map(|t| t.max(0.0)).sum::<f64>()
    }

    fn smoothed(&self, w: &[f64], slacks: &[f64], mu: f64) -> f64 {
        0.5 * dot(w, w) + self.c * slacks.iter().map(|&t| smooth_hinge(t, mu).0).sum::<f64>()
    }

    /// `sum_i coef_i * y_i * [x_i, 1]`.
    fn combine(&self, coef: &[f64]) -> Vec<f64> {
        let d = self.x.cols();
        let mut v = vec![0.0; d + 1];
        for (i, &a) in coef.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let s = a * self.y[i];
            for (vj, xj) in v[..d].iter_mut().zip(self.x.row(i)) {
                *vj += s * xj;
            }
            v[d] += s;
        }
        v
    }

    /// Solve `(I + k sum_{i in band} x_i x_i^T) out = rhs` over augmented rows.
    fn newton_solve(&self, band: &[usize], k: f64, rhs: &[f64]) -> Option<Vec<f64>> {
        let d = self.x.cols();
        let dim = d + 1;
        if band.is_empty() {
            return Some(rhs.to_vec());
        }
        let aug = |i: usize, j: usize| if j < d { self.x.get(i, j) } else { 1.0 };
        if band.len() <= dim {
            // Woodbury: H^-1 v = v - X^T (I/k + X X^T)^-1 X v
            let nb = band.len();
            let gram = DMatrix::from_fn(nb, nb, |a, b| {
                let (i, j) = (band[a], band[b]);
                dot(self.x.row(i), self.x.row(j)) + 1.0 + if a == b { 1.0 / k } else { 0.0 }
            });
            let u = DVector::from_fn(nb, |a, _| dot(self.x.row(band[a]), &rhs[..d]) + rhs[d]);
            let s = gram.cholesky()?.solve(&u);
            let mut out = rhs.to_vec();
            for (a, &i) in band.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o -= s[a] * aug(i, j);
                }
            }
            Some(out)
        } else {
            let mut h = DMatrix::<f64>::identity(dim, dim);
            for &i in band {
                let row: Vec<f64> = (0..dim).map(|j| aug(i, j)).collect();
                for a in 0..dim {
                    let ra = k * row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in 0..dim {
                        h[(a, b)] += ra * row[b];
                    }
                }
            }
            let sol = h.cholesky()?.solve(&DVector::from_column_slice(rhs));
            Some(sol.iter().copied().collect())
        }
    }
}

/// Train a linear SVM on rows of `x` with labels `y` in {-1, +1}.
///
/// The solver is deterministic and full-batch: Newton's method on a
/// quadratically smoothed hinge whose smoothing width shrinks by 10x per
/// stage until the duality gap of the exact problem, relative to the primal
/// objective, drops below `cfg.tolerance`. The returned weights are the best
/// primal iterate seen, so `history` never increases.
pub fn train_linear_svm(x: &FeatureMatrix, y: &[f64], cfg: &SvmConfig) -> Result<LinearSvm> {
    train_linear_svm_from(x, y, cfg, None)
}

/// As [`train_linear_svm`], optionally warm-started from `(weights, bias)`.
pub fn train_linear_svm_from(
    x: &FeatureMatrix,
    y: &[f64],
    cfg: &SvmConfig,
    init: Option<(&[f64], f64)>,
) -> Result<LinearSvm> {
    cfg.validate()?;
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: y.len(),
        });
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Training("labels must be +1 or -1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Training("need at least one example of each sign".into()));
    }
    let d = x.cols();
    let prob = SvmProblem { x, y, c: cfg.c };
    let mut w = match init {
        Some((wi, b)) if wi.len() == d => {
            let mut v = wi.to_vec();
            v.push(b);
            v
        }
        _ => vec![0.0; d + 1],
    };

    let mut slacks = prob.slacks(&w);
    let mut best_w = w.clone();
    let mut best_p = prob.primal(&w, &slacks);
    let mut history = vec![best_p];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut mu = 1.0;

    'stages: loop {
        // Newton iterations on the smoothed objective at width `mu`
        for _ in 0..100 {
            if iterations >= cfg.max_iters {
                break 'stages;
            }
            let coef: Vec<f64> = slacks.iter().map(|&t| smooth_hinge(t, mu).1).collect();
            let pull = prob.combine(&coef);
            let grad: Vec<f64> = w.iter().zip(&pull).map(|(wi, pi)| wi - cfg.c * pi).collect();
            let gnorm = dot(&grad, &grad).sqrt();
            if gnorm <= 1e-12 * (1.0 + dot(&w, &w).sqrt()) {
                break;
            }
            let band: Vec<usize> = (0..slacks.len())
                .filter(|&i| slacks[i] > 0.0 && slacks[i] < mu)
                .collect();
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            let dir = prob.newton_solve(&band, cfg.c / mu, &neg).unwrap_or(neg.clone());
            let slope = dot(&grad, &dir);
            if slope >= 0.0 {
                break;
            }
            let f0 = prob.smoothed(&w, &slacks, mu);
            let mut step = 1.0;
            let mut accepted = None;
            while step > 1e-14 {
                let cand: Vec<f64> = w.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
                let cs = prob.slacks(&cand);
                let f = prob.smoothed(&cand, &cs, mu);
                if f <= f0 + 1e-4 * step * slope {
                    accepted = Some((cand, cs, f));
                    break;
                }
                step *= 0.5;
            }
            iterations += 1;
            let Some((nw, ns, f)) = accepted else { break };
            w = nw;
            slacks = ns;
            let p = prob.primal(&w, &slacks);
            if p < best_p {
                best_p = p;
                best_w.clone_from(&w);
            }
            history.push(best_p);
            if f0 - f <= 1e-15 * (1.0 + f0.abs()) {
                break;
            }
        }

        // duality gap from the dual-feasible multipliers C * h'(t) in [0, C]
        let alpha: Vec<f64> = slacks.iter().map(|&t| cfg.c * smooth_hinge(t, mu).1).collect();
        let v = prob.combine(&alpha);
        let dual = alpha.iter().sum::<f64>() - 0.5 * dot(&v, &v);
        let p = prob.primal(&w, &slacks);
        gap = (best_p.min(p) - dual).max(0.0);
        if gap <= cfg.tolerance * best_p.abs().max(1.0) {
            converged = true;
            break;
        }
        if mu < 1e-13 {
            break;
        }
        mu *= 0.1;
    }

    let bias = best_w.pop().expect("augmented weights");
    Ok(LinearSvm {
        weights: best_w,
        bias,
        objective: best_p,
        history,
        duality_gap: gap,
        iterations,
        converged,
    })
}

// ---------------------------------------------------------------------------
// Hard negative mining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub svm: LinearSvm,
    /// Training rounds run.
    pub rounds: usize,
    /// Hard negatives added after each round.
    pub added_per_round: Vec<usize>,
    pub cache_size: usize,
    /// Final cache as `(image, row)` pairs.
    pub cache: BTreeSet<(usize, usize)>,
    /// Negatives that were never cached.
    pub unseen: usize,
}

/// Train one class by growing a negative cache until no unseen negative
/// scores above `cfg.hard_threshold`.
///
/// `negatives[k]` holds the negative-eligible windows of image `k`. The
/// initial cache is a seeded sample of `initial_negatives_per_image` per
/// image; the cache is never pruned.
pub fn mine_hard_negatives(
    positives: &FeatureMatrix,
    negatives: &[FeatureMatrix],
    cfg: &SvmConfig,
) -> Result<MiningResult> {
    let mut initial = BTreeSet::new();
    for (k, m) in negatives.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let idx: Vec<usize> = (0..m.rows()).collect();
        for &i in idx.choose_multiple(&mut rng, cfg.initial_negatives_per_image.min(m.rows())) {
            initial.insert((k, i));
        }
    }
    mine_hard_negatives_from(positives, negatives, initial, cfg)
}

/// Mining loop starting from an explicit cache of `(image, row)` pairs.
pub fn mine_hard_negatives_from(
    positives: &FeatureMatrix,
    negatives: &[FeatureMatrix],
    mut cache: BTreeSet<(usize, usize)>,
    cfg: &SvmConfig,
) -> Result<MiningResult> {
    if positives.rows() == 0 {
        return Err(Error::Training("no positives for class".into()));
    }
    let dim = positives.cols();
    if let Some(m) = negatives.iter().find(|m| m.cols() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: m.cols(),
        });
    }
    let total: usize = negatives.iter().map(FeatureMatrix::rows).sum();
    if total == 0 {
        return Err(Error::Training("no negatives for class".into()));
    }
    if cache.is_empty() {
        // the solver needs both signs; seed with the first available negative
        let k = negatives.iter().position(|m| m.rows() > 0).expect("total > 0");
        cache.insert((k, 0));
    }

    let mut prev: Option<LinearSvm> = None;
    let mut added_per_round = Vec::new();
    let mut rounds = 0;
    loop {
        let mut x = positives.clone();
        for &(k, i) in &cache {
            x.push_row(negatives[k].row(i))?;
        }
        let mut y = vec![1.0; positives.rows()];
        y.resize(x.rows(), -1.0);
        let svm = train_linear_svm_from(&x, &y, cfg, prev.as_ref().map(|s| (s.weights.as_slice(), s.bias)))?;
        rounds += 1;

        let hard: Vec<(usize, usize)> = negatives
            .par_iter()
            .enumerate()
            .flat_map_iter(|(k, m)| {
                let svm = &svm;
                let cache = &cache;
                (0..m.rows()).filter_map(move |i| {
                    (!cache.contains(&(k, i)) && svm.score(m.row(i)) > cfg.hard_threshold).then_some((k, i))
                })
            })
            .collect();
        added_per_round.push(hard.len());
        let done = hard.is_empty() || rounds >= cfg.max_mining_rounds;
        cache.extend(hard);
        prev = Some(svm);
        if done {
            break;
        }
    }
    let svm = prev.expect("at least one round");
    let cache_size = cache.len();
    Ok(MiningResult {
        svm,
        rounds,
        added_per_round,
        cache_size,
        cache,
        unseen: total - cache_size,
    })
}

/// Windows of one training image for one class's mining run.
#[derive(Debug, Clone, Copy)]
pub struct ImageWindows<'a> {
    pub annotation: &'a Annotation,
    pub proposals: &'a [BoxCorners],
    /// One row per proposal.
    pub proposal_features: &'a FeatureMatrix,
    /// One row per annotated object, in annotation order.
    pub gt_features: &'a FeatureMatrix,
}

/// Label every image for `class_id` and run the mining loop.
pub fn mine_class(images: &[ImageWindows<'_>], class_id: usize, cfg: &SvmConfig) -> Result<MiningResult> {
    let dim = images
        .first()
        .map(|w| w.proposal_features.cols())
        .ok_or_else(|| Error::Training("no training images".into()))?;
    let mut positives = FeatureMatrix::empty(dim);
    let mut negatives = Vec::with_capacity(images.len());
    for w in images {
        let labels = label_for_svm(w.proposals, w.annotation, class_id, cfg.neg_iou_thresh);
        for (o, obj) in w.annotation.objects.iter().enumerate() {
            if obj.class_id == class_id {
                positives.push_row(w.gt_features.row(o))?;
            }
        }
        let rows: Vec<usize> = labels
            .proposal_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, RegionLabel::Negative(_)))
            .map(|(i, _)| i)
            .collect();
        negatives.push(w.proposal_features.select_rows(&rows));
    }
    mine_hard_negatives(&positives, &negatives, cfg)
}

// ---------------------------------------------------------------------------
// Multi-class model
// ---------------------------------------------------------------------------

/// One linear scorer per class: `score_c(x) = w_c . x + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub class_ids: Vec<usize>,
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

const SVM_MAGIC: &[u8; 8] = b"RDETSVM1";
const BBR_MAGIC: &[u8; 8] = b"RDETBBR1";
const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::decode(self.path, "truncated model file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::decode(self.path, "non-finite value in model file"))
        }
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::decode(self.path, "bad magic bytes"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::decode(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::decode(self.path, "trailing bytes in model file"));
        }
        Ok(())
    }
}

impl ClassifierModel {
    pub fn from_svms(class_ids: Vec<usize>, svms: &[LinearSvm]) -> Result<Self> {
        let dim = svms.first().map_or(0, |s| s.weights.len());
        if svms.len() != class_ids.len() || svms.iter().any(|s| s.weights.len() != dim) {
            return Err(Error::Training("inconsistent per-class models".into()));
        }
        Ok(ClassifierModel {
            class_ids,
            dim,
            weights: svms.iter().map(|s| s.weights.clone()).collect(),
            biases: svms.iter().map(|s| s.bias).collect(),
        })
    }

    /// Binary layout (little-endian): magic `RDETSVM1`, u32 version, u64 dim,
    /// u64 class count, then per class u64 class id, `dim` f64 weights, f64 bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.weights.len() * (16 + 8 * self.dim));
        out.extend_from_slice(SVM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.class_ids.len() as u64).to_le_bytes());
        for ((id, w), b) in self.class_ids.iter().zip(&self.weights).zip(&self.biases) {
            out.extend_from_slice(&(*id as u64).to_le_bytes());
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        r.header(SVM_MAGIC)?;
        let dim = r.u64()? as usize;
        let n = r.u64()? as usize;
        if n.checked_mul(dim.saturating_add(2).saturating_mul(8))
            .is_none_or(|b| b > bytes.len())
        {
            return Err(Error::decode(path, "truncated model file"));
        }
        let mut m = ClassifierModel {
            class_ids: Vec::with_capacity(n),
            dim,
            weights: Vec::with_capacity(n),
            biases: Vec::with_capacity(n),
        };
        for _ in 0..n {
            m.class_ids.push(r.u64()? as usize);
            m.weights.push((0..dim).map(|_| r.f64()).collect::<Result<_>>()?);
            m.biases.push(r.f64()?);
        }
        r.finish()?;
        Ok(m)
    }

    pub fn summary(&self, class_names: &[String]) -> String {
        let mut s = format!(
            "# linear classifier, dim {}, {} classes\n",
            self.dim,
            self.class_ids.len()
        );
        s.push_str("class\tname\tweight_norm\tbias\n");
        for ((id, w), b) in self.class_ids.iter().zip(&self.weights).zip(&self.biases) {
            let name = class_names.get(*id).map_or("?", String::as_str);
            writeln!(s, "{id}\t{name}\t{:.6}\t{:.6}", dot(w, w).sqrt(), b).unwrap();
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Bounding-box regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BBoxConfig {
    pub lambda: f64,
    /// A proposal trains the regressor only if its best IoU exceeds this.
    pub assign_iou: f64,
}

impl Default for BBoxConfig {
    fn default() -> Self {
        BBoxConfig {
            lambda: 1000.0,
            assign_iou: 0.6,
        }
    }
}

/// A candidate training pair before assignment.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample<'a> {
    pub features: &'a [f64],
    pub proposal: BoxCorners,
    /// Ground truth of the class in the proposal's image.
    pub gt_boxes: &'a [BoxCorners],
}

/// Max-IoU ground truth of `proposal`, kept only when the overlap is
/// strictly greater than `assign_iou`.
pub fn assign_regression_target(proposal: &BoxCorners, gt_boxes: &[BoxCorners], assign_iou: f64) -> Option<BoxCorners> {
    match max_iou(proposal, gt_boxes) {
        Some((i, v)) if v > assign_iou => Some(gt_boxes[i]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRegressor {
    /// Weights for `dx, dy, dw, dh` over `[features, 1]`.
    pub weights: [Vec<f64>; 4],
    /// False for classes that had no usable pair; weights are then zero.
    pub trained: bool,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BBoxRegressor {
    pub dim: usize,
    pub lambda: f64,
    pub assign_iou: f64,
    pub classes: Vec<ClassRegressor>,
}

/// Closed-form ridge regression on constant-1-augmented features:
/// `(Phi^T Phi + lambda I) w = Phi^T t` for each of the four targets,
/// solved with one Cholesky factorization.
pub fn ridge_solve(features: &FeatureMatrix, targets: &[[f64; 4]], lambda: f64) -> Result<[Vec<f64>; 4]> {
    if features.rows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            actual: targets.len(),
        });
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config("ridge lambda must be positive".into()));
    }
    let d = features.cols();
    let dim = d + 1;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DMatrix::<f64>::zeros(dim, 4);
    let mut phi = vec![0.0; dim];
    for (row, t) in features.iter_rows().zip(targets) {
        phi[..d].copy_from_slice(row);
        phi[d] = 1.0;
        for i in 0..dim {
            let pi = phi[i];
            if pi == 0.0 {
                continue;
            }
            for j in i..dim {
                a[(i, j)] += pi * phi[j];
            }
            for (k, tk) in t.iter().enumerate() {
                b[(i, k)] += pi * tk;
            }
        }
    }
    for i in 0..dim {
        a[(i, i)] += lambda;
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Training("ridge system not positive definite".into()))?;
    let w = chol.solve(&b);
    Ok(std::array::from_fn(|k| w.column(k).iter().copied().collect()))
}

/// Fit one regressor per class from its candidate samples. Samples whose
/// best overlap does not exceed `assign_iou` are discarded; a class left
/// with no pairs gets zero weights and `trained = false`.
pub fn train_bbox_regressor(
    per_class: &[Vec<RegressionSample<'_>>],
    dim: usize,
    cfg: &BBoxConfig,
) -> Result<BBoxRegressor> {
    let classes = per_class
        .par_iter()
        .map(|samples| {
            let mut feats = FeatureMatrix::empty(dim);
            let mut targets = Vec::new();
            for s in samples {
                let Some(g) = assign_regression_target(&s.proposal, s.gt_boxes, cfg.assign_iou) else {
                    continue;
                };
                let t = regression_targets(&s.proposal.to_center(), &g.to_center())?;
                feats.push_row(s.features)?;
                targets.push([t.dx, t.dy, t.dw, t.dh]);
            }
            if targets.is_empty() {
                return Ok(ClassRegressor {
                    weights: std::array::from_fn(|_| vec![0.0; dim + 1]),
                    trained: false,
                    pairs: 0,
                });
            }
            Ok(ClassRegressor {
                weights: ridge_solve(&feats, &targets, cfg.lambda)?,
                trained: true,
                pairs: targets.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BBoxRegressor {
        dim,
        lambda: cfg.lambda,
        assign_iou: cfg.assign_iou,
        classes,
    })
}

impl BBoxRegressor {
    /// All classes untrained: every prediction leaves boxes alone.
    pub fn identity(dim: usize, num_classes: usize, lambda: f64, assign_iou: f64) -> Self {
        BBoxRegressor {
            dim,
            lambda,
            assign_iou,
            classes: (0..num_classes)
                .map(|_| ClassRegressor {
                    weights: std::array::from_fn(|_| vec![0.0; dim + 1]),
                    trained: false,
                    pairs: 0,
                })
                .collect(),
        }
    }

    /// Deltas for one region; `None` when the class has no trained regressor.
    pub fn predict(&self, class_id: usize, features: &[f64]) -> Result<Option<RegressionDeltas>> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: features.len(),
            });
        }
        let Some(reg) = self.classes.get(class_id).filter(|r| r.trained) else {
            return Ok(None);
        };
        let f = |w: &Vec<f64>| dot(features, &w[..self.dim]) + w[self.dim];
        Ok(Some(RegressionDeltas {
            dx: f(&reg.weights[0]),
            dy: f(&reg.weights[1]),
            dw: f(&reg.weights[2]),
            dh: f(&reg.weights[3]),
        }))
    }

    /// Binary layout (little-endian): magic `RDETBBR1`, u32 version, u64 dim,
    /// u64 class count, f64 lambda, f64 assign_iou, then per class u8 trained,
    /// u64 pair count, 4 x (dim + 1) f64 weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BBR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.assign_iou.to_le_bytes());
        for c in &self.classes {
            out.push(c.trained as u8);
            out.extend_from_slice(&(c.pairs as u64).to_le_bytes());
            for w in &c.weights {
                for v in w {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        r.header(BBR_MAGIC)?;
        let dim = r.u64()? as usize;
        let n = r.u64()? as usize;
        let lambda = r.f64()?;
        let assign_iou = r.f64()?;
        let per = dim.saturating_add(1).saturating_mul(32).saturating_add(9);
        if n.checked_mul(per).is_none_or(|b| b > bytes.len()) {
            return Err(Error::decode(path, "truncated model file"));
        }
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let trained = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(Error::decode(path, "bad trained flag")),
            };
            let pairs = r.u64()? as usize;
            let mut weights: [Vec<f64>; 4] = Default::default();
            for w in weights.iter_mut() {
                *w = (0..=dim).map(|_| r.f64()).collect::<Result<_>>()?;
            }
            classes.push(ClassRegressor {
                weights,
                trained,
                pairs,
            });
        }
        r.finish()?;
        Ok(BBoxRegressor {
            dim,
            lambda,
            assign_iou,
            classes,
        })
    }

    pub fn summary(&self, class_names: &[String]) -> String {
        let mut s = format!(
            "# box regressor, dim {}, lambda {}, assign_iou {}\n",
            self.dim, self.lambda, self.assign_iou
        );
        s.push_str("class\tname\ttrained\tpairs\n");
        for (id, c) in self.classes.iter().enumerate() {
            let name = class_names.get(id).map_or("?", String::as_str);
            let flag = if c.trained { "yes" } else { "no (identity)" };
            writeln!(s, "{id}\t{name}\t{flag}\t{}", c.pairs).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::AnnotatedObject;

    fn ann(objs: &[(usize, BoxCorners)]) -> Annotation {
        Annotation {
            image_id: 0,
            objects: objs
                .iter()
                .map(|&(class_id, bbox)| AnnotatedObject {
                    class_id,
                    bbox,
                    difficult: false,
                })
                .collect(),
        }
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoxCorners {
        BoxCorners::new_unchecked(a, b, c, d)
    }

    #[test]
    fn svm_labels_partition() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let a = ann(&[(0, gt), (1, bx(50.0, 50.0, 60.0, 60.0))]);
        let props = [
            bx(0.0, 0.0, 2.0, 10.0),    // iou 0.2 -> negative
            bx(0.0, 0.0, 4.0, 10.0),    // iou 0.4 -> ignore
            gt,                         // exact GT as proposal -> ignore
            bx(50.0, 50.0, 60.0, 60.0), // other class object -> negative for 0
        ];
        let l = label_for_svm(&props, &a, 0, 0.3);
        assert_eq!(
            l.proposal_labels,
            vec![
                RegionLabel::Negative(0),
                RegionLabel::Ignore,
                RegionLabel::Ignore,
                RegionLabel::Negative(0)
            ]
        );
        assert_eq!(l.positives, vec![gt]);
    }

    #[test]
    fn finetune_labels() {
        let a = ann(&[(0, bx(0.0, 0.0, 10.0, 10.0)), (1, bx(4.0, 0.0, 14.0, 10.0))]);
        let half = bx(0.0, 0.0, 5.0, 10.0); // iou 0.5 with GT 0
        let l = label_for_finetune(&[half], &a, 0.5);
        assert!(matches!(
            l[0],
            FinetuneLabel::Foreground {
                class_id: 0,
                gt_index: 0,
                ..
            }
        ));
        let under = bx(0.0, 0.0, 4.9, 10.0);
        assert_eq!(label_for_finetune(&[under], &a, 0.5)[0], FinetuneLabel::Background);
        // closer to the second GT -> its class
        let right = bx(4.0, 0.0, 13.0, 10.0);
        assert!(matches!(
            label_for_finetune(&[right], &a, 0.5)[0],
            FinetuneLabel::Foreground { class_id: 1, .. }
        ));
    }

    fn fg() -> FinetuneLabel {
        FinetuneLabel::Foreground {
            class_id: 0,
            gt_index: 0,
            iou: 0.7,
        }
    }

    #[test]
    fn minibatch_sampling() {
        let mut labels = vec![fg(); 32];
        labels.extend(vec![FinetuneLabel::Background; 96]);
        let mut b = sample_minibatch(&labels, 32, 96, 3).unwrap();
        assert_eq!(b.len(), 128);
        assert_eq!(b, sample_minibatch(&labels, 32, 96, 3).unwrap());
        b.sort();
        assert_eq!(b, (0..128).collect::<Vec<_>>());

        let few = vec![fg(), FinetuneLabel::Background, FinetuneLabel::Background];
        let b = sample_minibatch(&few, 32, 96, 1).unwrap();
        assert_eq!(b.len(), 128);
        assert_eq!(b.iter().filter(|&&i| i == 0).count(), 32);
        assert!(sample_minibatch(&[FinetuneLabel::Background], 32, 96, 1).is_err());
    }

    #[test]
    fn svm_hard_margin_analytic() {
        let x = FeatureMatrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let cfg = SvmConfig {
            c: 1e4,
            ..SvmConfig::default()
        };
        let s = train_linear_svm(&x, &[1.0, -1.0], &cfg).unwrap();
        assert!((s.weights[0] - 1.0).abs() < 1e-3, "{s:?}");
        assert!(s.weights[1].abs() < 1e-3);
        assert!(s.bias.abs() < 1e-3);
        // zero hinge loss at the separable optimum
        let hinge = s.objective - 0.5 * (dot(&s.weights, &s.weights) + s.bias * s.bias);
        assert!(hinge < 1e-6 * cfg.c);
        assert!(s.converged);
    }

    #[test]
    fn svm_history_monotone_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let x = FeatureMatrix::new(n, 5, (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                if x.get(i, 0) + 0.3 * x.get(i, 1) > 0.1 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let s = train_linear_svm(&x, &y, &SvmConfig::default()).unwrap();
        assert!(s.history.windows(2).all(|w| w[1] <= w[0]));
        assert!((svm_objective(&s.weights, s.bias, &x, &y, 1.0) - s.objective).abs() < 1e-9);
        assert!(train_linear_svm(&x, &vec![1.0; n], &SvmConfig::default()).is_err());
        assert!(train_linear_svm(&x, &y[1..], &SvmConfig::default()).is_err());
    }

    #[test]
    fn mining_terminates_after_one_round_when_cache_complete() {
        let pos = FeatureMatrix::new(2, 1, vec![2.0, 3.0]).unwrap();
        let negs = vec![FeatureMatrix::new(3, 1, vec![-2.0, -3.0, -4.0]).unwrap()];
        let cache: BTreeSet<(usize, usize)> = (0..3).map(|i| (0, i)).collect();
        let r = mine_hard_negatives_from(&pos, &negs, cache, &SvmConfig::default()).unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.added_per_round, vec![0]);
        assert!(mine_hard_negatives(&FeatureMatrix::empty(1), &negs, &SvmConfig::default()).is_err());
    }

    #[test]
    fn ridge_interpolation_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d) = (40, 6);
        let x = FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let truth: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<[f64; 4]> = x
            .iter_rows()
            .map(|r| std::array::from_fn(|k| dot(r, &truth[k][..d]) + truth[k][d]))
            .collect();
        let w = ridge_solve(&x, &targets, 1e-9).unwrap();
        for k in 0..4 {
            for j in 0..=d {
                assert!((w[k][j] - truth[k][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ridge_normal_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (80, 9);
        let x = FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let targets: Vec<[f64; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        for lambda in [1e-3, 1.0, 1000.0] {
            let w = ridge_solve(&x, &targets, lambda).unwrap();
            for k in 0..4 {
                // r = (Phi^T Phi + lambda I) w - Phi^T t
                let mut r = vec![0.0; d + 1];
                let mut rhs = vec![0.0; d + 1];
                for (row, t) in x.iter_rows().zip(&targets) {
                    let phi: Vec<f64> = row.iter().copied().chain([1.0]).collect();
                    let p = dot(&phi, &w[k]);
                    for j in 0..=d {
                        r[j] += phi[j] * p;
                        rhs[j] += phi[j] * t[k];
                    }
                }
                for j in 0..=d {
                    r[j] += lambda * w[k][j] - rhs[j];
                }
                assert!(dot(&r, &r).sqrt() <= 1e-8 * dot(&rhs, &rhs).sqrt());
            }
        }
    }

    #[test]
    fn regression_assignment_threshold() {
        let gt = [bx(0.0, 0.0, 10.0, 10.0)];
        // iou 0.55
        let p = bx(0.0, 0.0, 5.5, 10.0);
        assert_eq!(assign_regression_target(&p, &gt, 0.6), None);
        let q = bx(0.0, 0.0, 7.0, 10.0);
        assert_eq!(assign_regression_target(&q, &gt, 0.6), Some(gt[0]));
        let f = [1.0, 2.0];
        let samples = vec![vec![RegressionSample {
            features: &f,
            proposal: p,
            gt_boxes: &gt,
        }]];
        let reg = train_bbox_regressor(&samples, 2, &BBoxConfig::default()).unwrap();
        assert!(!reg.classes[0].trained);
        assert_eq!(reg.predict(0, &f).unwrap(), None);
    }

    #[test]
    fn model_files_round_trip_and_reject_corruption() {
        let m = ClassifierModel {
            class_ids: vec![0, 2],
            dim: 3,
            weights: vec![vec![1.0, -2.0, 0.5], vec![0.0, 1e-300, 3.25]],
            biases: vec![-0.5, 7.0],
        };
        let bytes = m.to_bytes();
        assert_eq!(ClassifierModel::from_bytes(&bytes, Path::new("m")).unwrap(), m);
        assert!(ClassifierModel::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ClassifierModel::from_bytes(&bad, Path::new("m")).is_err());

        let mut r = BBoxRegressor::identity(2, 2, 1000.0, 0.6);
        r.classes[1] = ClassRegressor {
            weights: [vec![0.1, 0.2, 0.3], vec![0.0; 3], vec![-1.0, 0.0, 1.0], vec![0.5; 3]],
            trained: true,
            pairs: 12,
        };
        let b = r.to_bytes();
        assert_eq!(BBoxRegressor::from_bytes(&b, Path::new("r")).unwrap(), r);
        assert!(BBoxRegressor::from_bytes(&b[..b.len() - 3], Path::new("r")).is_err());
        assert!(r.summary(&["a".into(), "b".into()]).contains("identity"));
    }
}
