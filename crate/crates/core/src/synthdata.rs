//! Synthetic shape scenes with exact ground truth, and class-balanced splitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCorners;
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Ring,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Ring => "ring",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Shapes sharing an outline family count as "similar" classes.
    pub fn group(&self) -> &'static str {
        match self {
            ShapeKind::Disc | ShapeKind::Ring => "round",
            ShapeKind::Square | ShapeKind::Triangle => "polygon",
        }
    }

    /// Point-in-shape test for offset `(dx, dy)` from the center, half-extent `r`.
    fn contains(&self, dx: f64, dy: f64, r: f64) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            ShapeKind::Disc => d2 <= r * r,
            ShapeKind::Ring => d2 <= r * r && d2 > (0.55 * r) * (0.55 * r),
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub class_id: usize,
    pub bbox: BoxCorners,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    pub fn boxes_of(&self, class_id: usize) -> Vec<BoxCorners> {
        self.objects
            .iter()
            .filter(|o| o.class_id == class_id)
            .map(|o| o.bbox)
            .collect()
    }

    pub fn all_boxes(&self) -> Vec<BoxCorners> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for o in &self.objects {
            if o.class_id < num_classes {
                c[o.class_id] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// One class per entry, class id = position.
    pub classes: Vec<ShapeKind>,
    /// Inclusive range of objects per image.
    pub objects_per_image: [usize; 2],
    /// Inclusive range of the object half-extent in pixels.
    pub size_range: [usize; 2],
    /// Expected clutter strokes per 1000 pixels.
    pub clutter_density: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 96,
            height: 96,
            channels: 1,
            classes: vec![ShapeKind::Disc, ShapeKind::Ring, ShapeKind::Square],
            objects_per_image: [1, 3],
            size_range: [8, 16],
            clutter_density: 1.0,
            noise_level: 0.03,
            seed: 2014,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.classes.is_empty() {
            return bad("no classes");
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return bad("objects_per_image range empty");
        }
        if self.size_range[0] == 0 || self.size_range[0] > self.size_range[1] {
            return bad("size_range empty or zero");
        }
        if 2 * self.size_range[1] + 2 > self.width.min(self.height) {
            return bad("objects larger than the image");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if !(self.clutter_density >= 0.0 && self.noise_level >= 0.0) {
            return bad("negative clutter or noise");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn similarity_groups(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.group().to_string()).collect()
    }
}

/// Render one scene. Fully determined by `(cfg.seed, image_id)`.
///
/// Objects are placed on integer centers without overlapping each other;
/// each ground-truth box is the tight box of the object's rendered mask.
pub fn generate_scene(cfg: &SceneConfig, image_id: u64) -> (Image, Annotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(image_id);
    let (w, h, ch) = (cfg.width, cfg.height, cfg.channels);

    let base: f32 = rng.random_range(0.35..0.65);
    let (gx, gy): (f32, f32) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut img = Image::from_fn(w, h, ch, |x, y, _| {
        base + gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5)
    });

    let strokes = (cfg.clutter_density * (w * h) as f64 / 1000.0).round() as usize;
    for _ in 0..strokes {
        let v = (base + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0);
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let horizontal = rng.random_bool(0.5);
        let (len, thick) = (rng.random_range(3..10usize), rng.random_range(1..3usize));
        let (sw, sh) = if horizontal { (len, thick) } else { (thick, len) };
        for y in y0..(y0 + sh).min(h) {
            for x in x0..(x0 + sw).min(w) {
                for c in 0..ch {
                    img.set(x, y, c, v);
                }
            }
        }
    }

    let count = rng.random_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1]);
    let mut placed: Vec<BoxCorners> = Vec::new();
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..cfg.classes.len());
        let shape = cfg.classes[class_id];
        let bright = rng.random_bool(0.5);
        let level: f32 = if bright {
            rng.random_range(0.85..1.0)
        } else {
            rng.random_range(0.0..0.15)
        };
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        for _attempt in 0..200 {
            let r = rng.random_range(cfg.size_range[0]..=cfg.size_range[1]);
            let cx = rng.random_range(r + 1..=w - r - 1);
            let cy = rng.random_range(r + 1..=h - r - 1);
            let outer = BoxCorners::new_unchecked(
                (cx - r) as f64 - 2.0,
                (cy - r) as f64 - 2.0,
                (cx + r) as f64 + 2.0,
                (cy + r) as f64 + 2.0,
            );
            if placed.iter().any(|p| p.intersection_area(&outer) > 0.0) {
                continue;
            }
            let mut tight: Option<(usize, usize, usize, usize)> = None;
            for y in cy - r..cy + r {
                for x in cx - r..cx + r {
                    let dx = x as f64 + 0.5 - cx as f64;
                    let dy = y as f64 + 0.5 - cy as f64;
                    if shape.contains(dx, dy, r as f64) {
                        for (c, t) in tint.iter().enumerate().take(ch) {
                            let v = if ch == 3 { level + t } else { level };
                            img.set(x, y, c, v.clamp(0.0, 1.0));
                        }
                        tight = Some(match tight {
                            None => (x, y, x + 1, y + 1),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                        });
                    }
                }
            }
            if let Some((x0, y0, x1, y1)) = tight {
                placed.push(outer);
                objects.push(AnnotatedObject {
                    class_id,
                    bbox: BoxCorners::new_unchecked(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
                    difficult: false,
                });
            }
            break;
        }
    }

    if cfg.noise_level > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_level as f32).expect("finite noise level");
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let v = img.get(x, y, c) + noise.sample(&mut rng);
                    img.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let v = img.get(x, y, c);
                    img.set(x, y, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }

    (img, Annotation { image_id, objects })
}

// ---------------------------------------------------------------------------
// Class-balanced split
// ---------------------------------------------------------------------------

/// `|a - b| / (a + b)`, defined as 0 when both are zero.
pub fn relative_imbalance(a: usize, b: usize) -> f64 {
    if a + b == 0 {
        0.0
    } else {
        (a as f64 - b as f64).abs() / (a + b) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub side_a: Vec<u64>,
    pub side_b: Vec<u64>,
    pub max_relative_imbalance: f64,
    pub median_relative_imbalance: f64,
}

/// Per-class imbalances of a partition, over classes present in the data.
pub fn split_imbalances(counts: &[Vec<usize>], in_a: &[bool]) -> Vec<f64> {
    let classes = counts.first().map_or(0, Vec::len);
    let mut a = vec![0usize; classes];
    let mut b = vec![0usize; classes];
    for (c, &side) in counts.iter().zip(in_a) {
        let dst = if side { &mut a } else { &mut b };
        for (d, v) in dst.iter_mut().zip(c) {
            *d += v;
        }
    }
    (0..classes)
        .filter(|&k| a[k] + b[k] > 0)
        .map(|k| relative_imbalance(a[k], b[k]))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Search key: max imbalance first, total imbalance as tie-breaker.
fn split_key(counts: &[Vec<usize>], in_a: &[bool]) -> (f64, f64) {
    let imb = split_imbalances(counts, in_a);
    (imb.iter().copied().fold(0.0, f64::max), imb.iter().sum())
}

fn key_less(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1 - 1e-15)
}

/// Randomized improvement of `in_a`: single-image moves (only when the side
/// sizes stay within one of each other) or cross-side swaps, each accepted
/// only if it lowers the key. Returns the final key.
fn local_search(counts: &[Vec<usize>], in_a: &mut [bool], steps: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = in_a.len();
    let mut n_a = in_a.iter().filter(|&&a| a).count();
    let mut key = split_key(counts, in_a);
    for _ in 0..steps {
        let i = rng.random_range(0..n);
        if rng.random_bool(0.5) {
            let new_a = if in_a[i] { n_a - 1 } else { n_a + 1 };
            if (2 * new_a).abs_diff(n) > 1 {
                continue;
            }
            in_a[i] = !in_a[i];
            let k = split_key(counts, in_a);
            if key_less(k, key) {
                key = k;
                n_a = new_a;
            } else {
                in_a[i] = !in_a[i];
            }
        } else {
            let j = rng.random_range(0..n);
            if in_a[i] == in_a[j] {
                continue;
            }
            in_a.swap(i, j);
            let k = split_key(counts, in_a);
            if key_less(k, key) {
                key = k;
            } else {
                in_a.swap(i, j);
            }
        }
    }
    key
}

/// Split images into two halves (sizes differ by at most one) minimizing the
/// maximum per-class relative imbalance.
///
/// Each of `n_candidates` starts from a seeded random partition and runs
/// `local_search_steps` random single-image moves or cross-side swaps,
/// accepting only moves that improve the key. The best candidate wins.
pub fn balanced_split(
    images: &[(u64, Vec<usize>)],
    n_candidates: usize,
    local_search_steps: usize,
    seed: u64,
) -> Result<SplitResult> {
    let n = images.len();
    if n < 2 {
        return Err(Error::Domain("balanced split needs at least two images".into()));
    }
    let classes = images[0].1.len();
    if images.iter().any(|(_, c)| c.len() != classes) {
        return Err(Error::Domain("inconsistent class-count vectors".into()));
    }
    let counts: Vec<Vec<usize>> = images.iter().map(|(_, c)| c.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<bool>, (f64, f64))> = None;
    for _ in 0..n_candidates.max(1) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let size_a = if n % 2 == 1 && rng.random_bool(0.5) {
            n / 2 + 1
        } else {
            n / 2
        };
        let mut in_a = vec![false; n];
        for &i in &order[..size_a] {
            in_a[i] = true;
        }
        let key = local_search(&counts, &mut in_a, local_search_steps, &mut rng);
        if best.as_ref().is_none_or(|(_, bk)| key_less(key, *bk)) {
            best = Some((in_a, key));
        }
    }
    let (in_a, _) = best.expect("at least one candidate");
    let imb = split_imbalances(&counts, &in_a);
    let (mut side_a, mut side_b) = (Vec::new(), Vec::new());
    for ((id, _), &a) in images.iter().zip(&in_a) {
        if a {
            side_a.push(*id);
        } else {
            side_b.push(*id);
        }
    }
    Ok(SplitResult {
        side_a,
        side_b,
        max_relative_imbalance: imb.iter().copied().fold(0.0, f64::max),
        median_relative_imbalance: median(imb),
    })
}

// ---------------------------------------------------------------------------
// Annotation line format: image_id class_id x_min y_min x_max y_max
// ---------------------------------------------------------------------------

pub fn format_annotations(anns: &[Annotation]) -> String {
    let mut out = String::new();
    for a in anns {
        for o in &a.objects {
            writeln!(
                out,
                "{} {} {} {} {} {}",
                a.image_id, o.class_id, o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max
            )
            .unwrap();
        }
    }
    out
}

/// Parse annotation records; every id in `image_ids` gets an entry, in order,
/// even when it has no objects.
pub fn parse_annotations(text: &str, image_ids: &[u64], num_classes: usize, path: &Path) -> Result<Vec<Annotation>> {
    let mut by_id: BTreeMap<u64, Vec<AnnotatedObject>> = image_ids.iter().map(|&i| (i, Vec::new())).collect();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::decode(path, format!("line {}: {m}", lineno + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let id: u64 = f[0].parse().map_err(|_| bad("bad image id"))?;
        let class_id: usize = f[1].parse().map_err(|_| bad("bad class id"))?;
        if class_id >= num_classes {
            return Err(bad("class id out of range"));
        }
        let c: Vec<f64> = f[2..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad coordinate"))?;
        let bbox = BoxCorners::new(c[0], c[1], c[2], c[3]).map_err(|_| bad("invalid box"))?;
        by_id
            .get_mut(&id)
            .ok_or_else(|| bad("unknown image id"))?
            .push(AnnotatedObject {
                class_id,
                bbox,
                difficult: false,
            });
    }
    Ok(image_ids
        .iter()
        .map(|&id| Annotation {
            image_id: id,
            objects: by_id.remove(&id).unwrap_or_default(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    /// Tight box of pixels that differ from a render with the objects removed
    /// is not available, so recompute from the shape predicate directly.
    fn mask_box(shape: ShapeKind, cx: usize, cy: usize, r: usize) -> BoxCorners {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in cy - r - 2..cy + r + 2 {
            for x in cx - r - 2..cx + r + 2 {
                if shape.contains(x as f64 + 0.5 - cx as f64, y as f64 + 0.5 - cy as f64, r as f64) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        BoxCorners::new_unchecked(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
    }

    #[test]
    fn disc_tight_box_geometry() {
        for r in 1..20usize {
            let (cx, cy) = (30usize, 31usize);
            let b = mask_box(ShapeKind::Disc, cx, cy, r);
            let expect = BoxCorners::new_unchecked((cx - r) as f64, (cy - r) as f64, (cx + r) as f64, (cy + r) as f64);
            assert_eq!(b, expect, "r={r}");
            assert_eq!(
                mask_box(ShapeKind::Ring, cx, cy, r.max(3)).width(),
                2.0 * r.max(3) as f64
            );
        }
    }

    #[test]
    fn scenes_deterministic() {
        let cfg = SceneConfig::default();
        let (a, aa) = generate_scene(&cfg, 5);
        let (b, bb) = generate_scene(&cfg, 5);
        assert_eq!(a, b);
        assert_eq!(aa, bb);
        assert_ne!(generate_scene(&cfg, 6).0, a);
    }

    #[test]
    fn fixed_object_count_honoured() {
        let cfg = SceneConfig {
            objects_per_image: [3, 3],
            ..SceneConfig::default()
        };
        for id in 0..40 {
            assert_eq!(generate_scene(&cfg, id).1.objects.len(), 3);
        }
    }

    #[test]
    fn gt_boxes_are_tight_mask_boxes() {
        // noise-free, clutter-free scenes: object pixels are the only ones at
        // their level, so the tight box of that level must match the annotation
        let cfg = SceneConfig {
            clutter_density: 0.0,
            noise_level: 0.0,
            classes: vec![ShapeKind::Disc, ShapeKind::Ring, ShapeKind::Square, ShapeKind::Triangle],
            ..SceneConfig::default()
        };
        for id in 0..30 {
            let (img, ann) = generate_scene(&cfg, id);
            for o in &ann.objects {
                assert!(o.bbox.x_min >= 0.0 && o.bbox.x_max <= cfg.width as f64);
                assert!(o.bbox.y_min >= 0.0 && o.bbox.y_max <= cfg.height as f64);
                assert!(o.class_id < cfg.classes.len());
                // level of the object: sample its center pixel, or the top edge of a ring
                let c = o.bbox.to_center();
                let shape = cfg.classes[o.class_id];
                let probe_y = if shape == ShapeKind::Ring {
                    o.bbox.y_min as usize
                } else {
                    c.y as usize
                };
                let probe_x = c.x as usize;
                let level = img.get(probe_x, probe_y, 0);
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for y in o.bbox.y_min as usize - 1..=(o.bbox.y_max as usize).min(cfg.height - 1) {
                    for x in o.bbox.x_min as usize - 1..=(o.bbox.x_max as usize).min(cfg.width - 1) {
                        if img.get(x, y, 0) == level {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                let recomputed = BoxCorners::new_unchecked(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
                assert_eq!(iou(&recomputed, &o.bbox), 1.0, "image {id} {o:?}");
            }
        }
    }

    #[test]
    fn imbalance_formula() {
        assert_eq!(relative_imbalance(4, 4), 0.0);
        assert_eq!(relative_imbalance(3, 1), 0.5);
        assert_eq!(relative_imbalance(1, 0), 1.0);
        assert_eq!(relative_imbalance(0, 0), 0.0);
    }

    #[test]
    fn split_forced_optimum() {
        let r = balanced_split(&[(1, vec![1]), (2, vec![1])], 4, 10, 0).unwrap();
        assert_eq!(r.max_relative_imbalance, 0.0);
        assert_eq!(r.side_a.len(), 1);
        assert_eq!(r.side_b.len(), 1);
        let r = balanced_split(&[(1, vec![2]), (2, vec![2]), (3, vec![2]), (4, vec![2])], 4, 50, 0).unwrap();
        assert_eq!(r.max_relative_imbalance, 0.0);
        assert!(balanced_split(&[(1, vec![1])], 4, 10, 0).is_err());
    }

    #[test]
    fn split_preserves_totals_and_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images: Vec<(u64, Vec<usize>)> = (0..25)
            .map(|i| (i, (0..4).map(|_| rng.random_range(0..4)).collect()))
            .collect();
        let r = balanced_split(&images, 8, 400, 1).unwrap();
        assert!(r.side_a.len().abs_diff(r.side_b.len()) <= 1);
        let mut all: Vec<u64> = r.side_a.iter().chain(&r.side_b).copied().collect();
        all.sort();
        assert_eq!(all, (0..25).collect::<Vec<u64>>());
        assert!((0.0..=1.0).contains(&r.max_relative_imbalance));
        assert!(r.median_relative_imbalance <= r.max_relative_imbalance);
    }

    #[test]
    fn local_search_never_worse_than_its_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let counts: Vec<Vec<usize>> = (0..11)
                .map(|_| (0..3).map(|_| rng.random_range(0..5)).collect())
                .collect();
            let mut in_a: Vec<bool> = (0..11).map(|i| i % 2 == 0).collect();
            let start = split_key(&counts, &in_a);
            let end = local_search(&counts, &mut in_a, 200, &mut rng);
            assert!(end.0 <= start.0);
            assert_eq!(end, split_key(&counts, &in_a));
            assert!(in_a.iter().filter(|&&a| a).count().abs_diff(5) <= 1);
        }
    }

    #[test]
    fn annotation_format_round_trip() {
        let cfg = SceneConfig::default();
        let anns: Vec<Annotation> = (0..5).map(|i| generate_scene(&cfg, i).1).collect();
        let text = format_annotations(&anns);
        let ids: Vec<u64> = (0..5).collect();
        assert_eq!(parse_annotations(&text, &ids, 3, Path::new("mem")).unwrap(), anns);
        assert!(parse_annotations("0 7 0 0 1 1", &ids, 3, Path::new("mem")).is_err());
        assert!(parse_annotations("99 0 0 0 1 1", &ids, 3, Path::new("mem")).is_err());
    }
}
