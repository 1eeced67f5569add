//! Category-independent region proposals.
//!
//! A dense multi-scale grid and a ground-truth jitter proposer stand behind
//! one [`RegionProposer`] contract; downstream stages never know which one
//! produced a box.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCenter, BoxCorners};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: u64,
    pub boxes: Vec<BoxCorners>,
    pub source_tag: String,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub trait RegionProposer: Send + Sync {
    fn tag(&self) -> &str;
    fn propose(&self, image_id: u64, width: usize, height: usize) -> ProposalSet;
}

/// Clip every box to the image, drop empty ones, and merge boxes whose
/// coordinates agree after rounding to 1e-6. First occurrence wins.
pub fn clip_and_dedup(boxes: impl IntoIterator<Item = BoxCorners>, width: f64, height: f64) -> Vec<BoxCorners> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for b in boxes {
        let c = b.clip(width, height);
        if !c.is_valid() || !c.has_positive_area() {
            continue;
        }
        let key = [c.x_min, c.y_min, c.x_max, c.y_max].map(|v| (v * 1e6).round() as i64);
        if seen.insert(key) {
            out.push(c);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridProposerConfig {
    /// Box side lengths (square-root of area) in resized-image pixels.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Step between neighbouring boxes as a fraction of the box side.
    pub stride_fraction: f64,
    /// Images are conceptually resized to this width before placing the
    /// grid; `0` disables the resize.
    pub resize_width: usize,
}

impl Default for GridProposerConfig {
    fn default() -> Self {
        GridProposerConfig {
            scales: vec![16.0, 24.0, 32.0, 48.0],
            aspect_ratios: vec![1.0],
            stride_fraction: 0.5,
            resize_width: 0,
        }
    }
}

impl GridProposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("grid scales must be positive".into()));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("grid aspect ratios must be positive".into()));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::Config("grid stride_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Number of window positions along one axis: `ceil((extent - side) / stride + 1)`, at least one.
pub fn grid_positions(extent: f64, side: f64, stride: f64) -> usize {
    let n = ((extent - side) / stride + 1.0).ceil();
    if n < 1.0 {
        1
    } else {
        n as usize
    }
}

pub fn grid_propose(cfg: &GridProposerConfig, width: usize, height: usize) -> ProposalSet {
    let factor = if cfg.resize_width > 0 {
        cfg.resize_width as f64 / width as f64
    } else {
        1.0
    };
    let (rw, rh) = (width as f64 * factor, height as f64 * factor);
    let mut raw = Vec::new();
    for &scale in &cfg.scales {
        for &aspect in &cfg.aspect_ratios {
            let bw = scale * aspect.sqrt();
            let bh = scale / aspect.sqrt();
            let (sx, sy) = (bw * cfg.stride_fraction, bh * cfg.stride_fraction);
            let nx = grid_positions(rw, bw, sx);
            let ny = grid_positions(rh, bh, sy);
            for j in 0..ny {
                for i in 0..nx {
                    let (x, y) = (i as f64 * sx, j as f64 * sy);
                    raw.push(
                        BoxCorners::new_unchecked(x, y, x + bw, y + bh)
                            .clip(rw, rh)
                            .scale(1.0 / factor),
                    );
                }
            }
        }
    }
    ProposalSet {
        image_id: 0,
        boxes: clip_and_dedup(raw, width as f64, height as f64),
        source_tag: "grid".into(),
    }
}

#[derive(Debug, Clone)]
pub struct GridProposer {
    pub cfg: GridProposerConfig,
}

impl RegionProposer for GridProposer {
    fn tag(&self) -> &str {
        "grid"
    }

    fn propose(&self, image_id: u64, width: usize, height: usize) -> ProposalSet {
        ProposalSet {
            image_id,
            ..grid_propose(&self.cfg, width, height)
        }
    }
}

// ---------------------------------------------------------------------------
// Jitter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Noise levels, as a fraction of box width/height (center) and in log
    /// units (size). `count` proposals are drawn per ground-truth box per level.
    pub sigmas: Vec<f64>,
    pub count: usize,
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            sigmas: vec![0.15],
            count: 8,
            seed: 11,
        }
    }
}

/// Perturb each ground-truth box in center and log-size with seeded
/// Gaussian noise. The stream is keyed on `(seed, image_id)`.
pub fn jitter_propose(
    image_id: u64,
    gt_boxes: &[BoxCorners],
    sigmas: &[f64],
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
) -> ProposalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    let mut raw = Vec::with_capacity(gt_boxes.len() * sigmas.len() * count);
    for gt in gt_boxes {
        let c = gt.to_center();
        for &sigma in sigmas {
            for _ in 0..count {
                let n: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let j = BoxCenter {
                    x: c.x + sigma * c.w * n[0],
                    y: c.y + sigma * c.h * n[1],
                    w: c.w * (sigma * n[2]).exp(),
                    h: c.h * (sigma * n[3]).exp(),
                };
                raw.push(j.to_corners());
            }
        }
    }
    ProposalSet {
        image_id,
        boxes: clip_and_dedup(raw, width as f64, height as f64),
        source_tag: "jitter".into(),
    }
}

/// Jitter proposer holding the ground truth it perturbs, keyed by image id.
#[derive(Debug, Clone)]
pub struct JitterProposer {
    pub cfg: JitterConfig,
    pub gt: BTreeMap<u64, Vec<BoxCorners>>,
}

impl RegionProposer for JitterProposer {
    fn tag(&self) -> &str {
        "jitter"
    }

    fn propose(&self, image_id: u64, width: usize, height: usize) -> ProposalSet {
        let gt = self.gt.get(&image_id).map(Vec::as_slice).unwrap_or(&[]);
        jitter_propose(
            image_id,
            gt,
            &self.cfg.sigmas,
            self.cfg.count,
            self.cfg.seed,
            width,
            height,
        )
    }
}

/// Concatenation of several proposers, deduplicated.
pub struct CombinedProposer {
    pub parts: Vec<Box<dyn RegionProposer>>,
    tag: String,
}

impl CombinedProposer {
    pub fn new(parts: Vec<Box<dyn RegionProposer>>) -> Self {
        let tag = parts.iter().map(|p| p.tag()).collect::<Vec<_>>().join("+");
        CombinedProposer { parts, tag }
    }
}

impl RegionProposer for CombinedProposer {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn propose(&self, image_id: u64, width: usize, height: usize) -> ProposalSet {
        let boxes = self.parts.iter().flat_map(|p| p.propose(image_id, width, height).boxes);
        ProposalSet {
            image_id,
            boxes: clip_and_dedup(boxes, width as f64, height as f64),
            source_tag: self.tag.clone(),
        }
    }
}

/// A proposer that never proposes anything.
pub struct EmptyProposer;

impl RegionProposer for EmptyProposer {
    fn tag(&self) -> &str {
        "empty"
    }

    fn propose(&self, image_id: u64, _: usize, _: usize) -> ProposalSet {
        ProposalSet {
            image_id,
            boxes: Vec::new(),
            source_tag: "empty".into(),
        }
    }
}

/// Fraction of ground-truth boxes hit by at least one proposal at
/// `IoU >= iou_thresh`. No ground truth counts as full recall.
pub fn proposal_recall(proposals: &[BoxCorners], gt_boxes: &[BoxCorners], iou_thresh: f64) -> f64 {
    if gt_boxes.is_empty() {
        return 1.0;
    }
    let hit = gt_boxes
        .iter()
        .filter(|g| proposals.iter().any(|p| iou(p, g) >= iou_thresh))
        .count();
    hit as f64 / gt_boxes.len() as f64
}

// ---------------------------------------------------------------------------
// Line format: image_id x_min y_min x_max y_max source_tag
// ---------------------------------------------------------------------------

pub fn format_proposals(sets: &[ProposalSet]) -> String {
    let mut out = String::new();
    for s in sets {
        for b in &s.boxes {
            writeln!(
                out,
                "{} {} {} {} {} {}",
                s.image_id, b.x_min, b.y_min, b.x_max, b.y_max, s.source_tag
            )
            .unwrap();
        }
    }
    out
}

/// Parse the line format back into per-image sets, ordered by image id.
/// Images without any proposals do not appear.
pub fn parse_proposals(text: &str, path: &Path) -> Result<Vec<ProposalSet>> {
    let mut sets: BTreeMap<u64, ProposalSet> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::decode(path, format!("line {}: malformed proposal record", lineno + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let id: u64 = f[0].parse().map_err(|_| bad())?;
        let c: Vec<f64> = f[1..5]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let b = BoxCorners::new(c[0], c[1], c[2], c[3]).map_err(|_| bad())?;
        sets.entry(id)
            .or_insert_with(|| ProposalSet {
                image_id: id,
                boxes: Vec::new(),
                source_tag: f[5].to_string(),
            })
            .boxes
            .push(b);
    }
    Ok(sets.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(scales: Vec<f64>, stride: f64) -> GridProposerConfig {
        GridProposerConfig {
            scales,
            aspect_ratios: vec![1.0],
            stride_fraction: stride,
            resize_width: 0,
        }
    }

    #[test]
    fn grid_example() {
        let set = grid_propose(&cfg(vec![50.0], 1.0), 100, 100);
        let expect = [(0.0, 0.0), (50.0, 0.0), (0.0, 50.0), (50.0, 50.0)]
            .map(|(x, y)| BoxCorners::new_unchecked(x, y, x + 50.0, y + 50.0));
        assert_eq!(set.boxes, expect.to_vec());
    }

    #[test]
    fn grid_oversized_scale_is_full_image() {
        let set = grid_propose(&cfg(vec![400.0], 0.1), 100, 80);
        assert_eq!(set.boxes, vec![BoxCorners::new_unchecked(0.0, 0.0, 100.0, 80.0)]);
    }

    #[test]
    fn grid_count_matches_formula_before_dedup() {
        for (w, h, s, f) in [
            (100usize, 70usize, 30.0, 0.5),
            (128, 128, 24.0, 0.5),
            (97, 61, 16.0, 1.0),
        ] {
            let set = grid_propose(&cfg(vec![s], f), w, h);
            let n = grid_positions(w as f64, s, s * f) * grid_positions(h as f64, s, s * f);
            // clipped trailing boxes are distinct here, so no dedup happens
            assert_eq!(set.len(), n, "{w}x{h} s={s}");
        }
    }

    #[test]
    fn grid_resize_maps_back() {
        let mut c = cfg(vec![50.0], 1.0);
        c.resize_width = 50;
        let set = grid_propose(&c, 100, 100);
        // a 50px box in the half-size image is 100px in the original
        assert_eq!(set.boxes, vec![BoxCorners::new_unchecked(0.0, 0.0, 100.0, 100.0)]);
    }

    #[test]
    fn jitter_zero_noise_is_identity() {
        let gt = vec![BoxCorners::new_unchecked(10.0, 10.0, 30.0, 40.0)];
        let set = jitter_propose(3, &gt, &[0.0], 5, 1, 100, 100);
        assert_eq!(set.boxes, gt);
    }

    #[test]
    fn jitter_deterministic_and_small_noise_overlaps() {
        let gt = vec![
            BoxCorners::new_unchecked(10.0, 10.0, 40.0, 40.0),
            BoxCorners::new_unchecked(50.0, 20.0, 90.0, 45.0),
        ];
        let a = jitter_propose(7, &gt, &[0.05], 50, 42, 100, 100);
        let b = jitter_propose(7, &gt, &[0.05], 50, 42, 100, 100);
        assert_eq!(a, b);
        assert_ne!(a, jitter_propose(8, &gt, &[0.05], 50, 42, 100, 100));
        for p in &a.boxes {
            let best = gt.iter().map(|g| iou(p, g)).fold(0.0, f64::max);
            assert!(best > 0.5, "{p:?} best {best}");
        }
    }

    #[test]
    fn recall_examples() {
        let gt = vec![
            BoxCorners::new_unchecked(0.0, 0.0, 10.0, 10.0),
            BoxCorners::new_unchecked(50.0, 50.0, 60.0, 60.0),
        ];
        assert_eq!(proposal_recall(&gt, &gt, 0.5), 1.0);
        assert_eq!(proposal_recall(&[], &gt, 0.5), 0.0);
        let one = vec![BoxCorners::new_unchecked(1.0, 0.0, 11.0, 10.0)];
        assert_eq!(proposal_recall(&one, &gt, 0.5), 0.5);
        assert_eq!(proposal_recall(&[], &[], 0.5), 1.0);
    }

    #[test]
    fn line_format_round_trip() {
        let sets = vec![
            ProposalSet {
                image_id: 4,
                boxes: vec![BoxCorners::new_unchecked(0.1, 0.2, 3.3, 4.4)],
                source_tag: "grid".into(),
            },
            ProposalSet {
                image_id: 9,
                boxes: vec![
                    BoxCorners::new_unchecked(1.0 / 3.0, 0.0, 7.0, 8.0),
                    BoxCorners::new_unchecked(2.0, 2.0, 3.0, 3.0),
                ],
                source_tag: "grid+jitter".into(),
            },
        ];
        let text = format_proposals(&sets);
        assert_eq!(parse_proposals(&text, Path::new("mem")).unwrap(), sets);
        assert!(parse_proposals("1 0 0 1", Path::new("mem")).is_err());
    }

    fn boxes() -> impl Strategy<Value = Vec<BoxCorners>> {
        prop::collection::vec((0.0..90.0f64, 0.0..90.0f64, 1.0..30.0f64, 1.0..30.0f64), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| BoxCorners::new_unchecked(x, y, x + w, y + h))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn grid_boxes_inside_image(w in 10usize..200, h in 10usize..200, s in 4.0..120.0f64, f in 0.2..1.0f64, a in 0.5..2.0f64) {
            let c = GridProposerConfig { scales: vec![s], aspect_ratios: vec![a], stride_fraction: f, resize_width: 0 };
            for b in grid_propose(&c, w, h).boxes {
                prop_assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= w as f64 && b.y_max <= h as f64);
                prop_assert!(b.has_positive_area());
            }
        }

        #[test]
        fn recall_monotone(p in boxes(), extra in boxes(), g in boxes(), t1 in 0.1..0.9f64, dt in 0.0..0.3f64) {
            let mut more = p.clone();
            more.extend(extra);
            prop_assert!(proposal_recall(&more, &g, t1) >= proposal_recall(&p, &g, t1));
            prop_assert!(proposal_recall(&p, &g, t1 + dt) <= proposal_recall(&p, &g, t1));
        }
    }
}
