//! PASCAL-style average precision and the false-positive taxonomy.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::synthdata::Annotation;

/// Default overlap below which a false positive is not attributed to any object.
pub const FP_OVERLAP_FLOOR: f64 = 0.1;

/// Thresholds of the false-positive taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpRules {
    /// Detection counts as correct at or above this IoU.
    pub iou_thresh: f64,
    /// Loc needs own-class IoU above this; Sim and Oth need at least this.
    pub overlap_floor: f64,
}

impl Default for FpRules {
    fn default() -> Self {
        FpRules {
            iou_thresh: 0.5,
            overlap_floor: FP_OVERLAP_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the full precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One flag per ranked, non-ignored detection.
    pub tp: Vec<bool>,
    pub scores: Vec<f64>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub num_gt: usize,
}

impl PrCurve {
    /// Cumulative precision/recall over flags already sorted by descending score.
    pub fn from_flags(tp: &[bool], scores: &[f64], num_gt: usize) -> Self {
        let mut recall = Vec::with_capacity(tp.len());
        let mut precision = Vec::with_capacity(tp.len());
        let mut hits = 0usize;
        for (k, &t) in tp.iter().enumerate() {
            hits += t as usize;
            recall.push(if num_gt == 0 { 0.0 } else { hits as f64 / num_gt as f64 });
            precision.push(hits as f64 / (k + 1) as f64);
        }
        PrCurve {
            tp: tp.to_vec(),
            scores: scores.to_vec(),
            recall,
            precision,
            num_gt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the input detections, in ranked order; only detections
    /// of the evaluated class appear.
    pub order: Vec<usize>,
    pub tp: Vec<bool>,
    /// FP because every overlapping ground truth was already claimed.
    pub duplicate: Vec<bool>,
    /// Matched to a difficult object: neither TP nor FP.
    pub ignored: Vec<bool>,
    /// `(image_id, object index)` claimed by each ranked detection.
    pub matched_gt: Vec<Option<(u64, usize)>>,
    /// Non-difficult ground truth of the class.
    pub num_gt: usize,
}

impl MatchResult {
    pub fn curve(&self, dets: &[Detection]) -> PrCurve {
        let keep: Vec<usize> = (0..self.order.len()).filter(|&k| !self.ignored[k]).collect();
        let tp: Vec<bool> = keep.iter().map(|&k| self.tp[k]).collect();
        let scores: Vec<f64> = keep.iter().map(|&k| dets[self.order[k]].score).collect();
        PrCurve::from_flags(&tp, &scores, self.num_gt)
    }
}

fn annotation_index(annotations: &[Annotation]) -> HashMap<u64, &Annotation> {
    annotations.iter().map(|a| (a.image_id, a)).collect()
}

/// Greedy matching in descending score order (ties keep input order).
///
/// A detection is a true positive iff the best-overlapping *unclaimed*
/// ground truth of its class reaches `iou_thresh`; it then claims that
/// object. A detection whose only sufficient overlaps are already claimed
/// is a duplicate false positive.
pub fn match_detections(
    dets: &[Detection],
    annotations: &[Annotation],
    class_id: usize,
    iou_thresh: f64,
) -> Result<MatchResult> {
    let by_image = annotation_index(annotations);
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class_id).collect();
    order.sort_by(|&a, &b| (dets[b].score + 0.0).total_cmp(&(dets[a].score + 0.0)).then(a.cmp(&b)));

    let num_gt = annotations
        .iter()
        .flat_map(|a| &a.objects)
        .filter(|o| o.class_id == class_id && !o.difficult)
        .count();
    let mut claimed: HashSet<(u64, usize)> = HashSet::new();
    let n = order.len();
    let mut out = MatchResult {
        order,
        tp: vec![false; n],
        duplicate: vec![false; n],
        ignored: vec![false; n],
        matched_gt: vec![None; n],
        num_gt,
    };
    for k in 0..n {
        let d = &dets[out.order[k]];
        let ann = by_image
            .get(&d.image_id)
            .ok_or_else(|| Error::Domain(format!("detection for unannotated image {}", d.image_id)))?;
        let mut best: Option<(usize, f64)> = None;
        let mut claimed_hit = false;
        for (o, obj) in ann.objects.iter().enumerate() {
            if obj.class_id != class_id {
                continue;
            }
            let v = iou(&d.bbox, &obj.bbox);
            if claimed.contains(&(d.image_id, o)) {
                claimed_hit |= v >= iou_thresh;
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((o, v));
            }
        }
        match best {
            Some((o, v)) if v >= iou_thresh => {
                claimed.insert((d.image_id, o));
                out.matched_gt[k] = Some((d.image_id, o));
                if ann.objects[o].difficult {
                    out.ignored[k] = true;
                } else {
                    out.tp[k] = true;
                }
            }
            _ => out.duplicate[k] = claimed_hit,
        }
    }
    Ok(out)
}

/// Average precision of a curve; `None` when the class has no ground truth.
pub fn voc_ap(pr: &PrCurve, mode: ApMode) -> Option<f64> {
    if pr.num_gt == 0 {
        return None;
    }
    let ap = match mode {
        ApMode::AllPoints => {
            let mut mrec = Vec::with_capacity(pr.recall.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(&pr.recall);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(mrec.len());
            mpre.push(0.0);
            mpre.extend_from_slice(&pr.precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (0..mrec.len() - 1)
                .filter(|&i| mrec[i + 1] != mrec[i])
                .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
                .sum()
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    pr.recall
                        .iter()
                        .zip(&pr.precision)
                        .filter(|(rc, _)| **rc >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_dets: usize,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub mode: ApMode,
    pub per_class: Vec<ClassEval>,
    /// Unweighted mean over classes with defined AP.
    pub map: Option<f64>,
}

fn check_class_ids(dets: &[Detection], annotations: &[Annotation], num_classes: usize) -> Result<()> {
    if let Some(d) = dets.iter().find(|d| d.class_id >= num_classes) {
        return Err(Error::Domain(format!("unknown class id {} in detections", d.class_id)));
    }
    for a in annotations {
        if let Some(o) = a.objects.iter().find(|o| o.class_id >= num_classes) {
            return Err(Error::Domain(format!(
                "unknown class id {} in image {}",
                o.class_id, a.image_id
            )));
        }
    }
    Ok(())
}

pub fn evaluate(
    dets: &[Detection],
    annotations: &[Annotation],
    num_classes: usize,
    iou_thresh: f64,
    mode: ApMode,
) -> Result<EvalReport> {
    check_class_ids(dets, annotations, num_classes)?;
    let per_class = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            let m = match_detections(dets, annotations, c, iou_thresh)?;
            let curve = m.curve(dets);
            Ok(ClassEval {
                class_id: c,
                ap: voc_ap(&curve, mode),
                num_gt: m.num_gt,
                num_dets: m.order.len(),
                curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        iou_thresh,
        mode,
        per_class,
        map,
    })
}

// ---------------------------------------------------------------------------
// False-positive analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FpType {
    /// Poor localization of a correct-class object, or a duplicate.
    Loc,
    /// Confusion with a class in the same similarity group.
    Sim,
    /// Confusion with a dissimilar class.
    Oth,
    /// Fired on background.
    Bg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FpCounts {
    pub loc: usize,
    pub sim: usize,
    pub oth: usize,
    pub bg: usize,
}

impl FpCounts {
    pub fn total(&self) -> usize {
        self.loc + self.sim + self.oth + self.bg
    }

    fn add(&mut self, t: FpType) {
        match t {
            FpType::Loc => self.loc += 1,
            FpType::Sim => self.sim += 1,
            FpType::Oth => self.oth += 1,
            FpType::Bg => self.bg += 1,
        }
    }

    fn merge(&mut self, o: &FpCounts) {
        self.loc += o.loc;
        self.sim += o.sim;
        self.oth += o.oth;
        self.bg += o.bg;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFpBreakdown {
    pub class_id: usize,
    /// False positives examined: `min(top_n, total FPs of the class)`.
    pub considered: usize,
    pub counts: FpCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpBreakdown {
    pub top_n: usize,
    pub per_class: Vec<ClassFpBreakdown>,
    pub total: FpCounts,
}

/// Categorize one false positive of class `class_id` against the objects of
/// its image. Rules apply in order: Loc, Sim, Oth, BG.
pub fn classify_fp(
    det: &Detection,
    annotation: &Annotation,
    duplicate: bool,
    groups: &[String],
    rules: &FpRules,
) -> FpType {
    let mut own = 0.0f64;
    let mut sim = 0.0f64;
    let mut oth = 0.0f64;
    for o in &annotation.objects {
        let v = iou(&det.bbox, &o.bbox);
        if o.class_id == det.class_id {
            own = own.max(v);
        } else if groups.get(o.class_id) == groups.get(det.class_id) {
            sim = sim.max(v);
        } else {
            oth = oth.max(v);
        }
    }
    let floor = rules.overlap_floor;
    if duplicate || (own > floor && own < rules.iou_thresh) {
        FpType::Loc
    } else if sim >= floor {
        FpType::Sim
    } else if oth >= floor {
        FpType::Oth
    } else {
        FpType::Bg
    }
}

/// Categorize the `top_n` highest-scored false positives of every class.
pub fn fp_analysis(
    dets: &[Detection],
    annotations: &[Annotation],
    similarity_groups: &[String],
    top_n: usize,
    rules: &FpRules,
) -> Result<FpBreakdown> {
    let num_classes = similarity_groups.len();
    if let Some(d) = dets.iter().find(|d| d.class_id >= num_classes) {
        return Err(Error::Domain(format!(
            "class {} missing from similarity groups",
            d.class_id
        )));
    }
    check_class_ids(dets, annotations, num_classes)?;
    let by_image = annotation_index(annotations);
    let per_class = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            let m = match_detections(dets, annotations, c, rules.iou_thresh)?;
            let mut counts = FpCounts::default();
            let fps = (0..m.order.len()).filter(|&k| !m.tp[k] && !m.ignored[k]).take(top_n);
            for k in fps {
                let d = &dets[m.order[k]];
                counts.add(classify_fp(
                    d,
                    by_image[&d.image_id],
                    m.duplicate[k],
                    similarity_groups,
                    rules,
                ));
            }
            Ok(ClassFpBreakdown {
                class_id: c,
                considered: counts.total(),
                counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = FpCounts::default();
    for c in &per_class {
        total.merge(&c.counts);
    }
    Ok(FpBreakdown {
        top_n,
        per_class,
        total,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

pub fn format_report(report: &EvalReport, fp: Option<&FpBreakdown>, class_names: &[String]) -> String {
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
    let mut s = format!(
        "# detection average precision (%), IoU >= {}, {:?}\n",
        report.iou_thresh, report.mode
    );
    s.push_str("class\tname\tAP\tnum_gt\tnum_dets\n");
    for c in &report.per_class {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            c.class_id,
            name(c.class_id),
            fmt_ap(c.ap),
            c.num_gt,
            c.num_dets
        )
        .unwrap();
    }
    writeln!(s, "mAP\t{}", fmt_ap(report.map)).unwrap();
    if let Some(fp) = fp {
        writeln!(s, "\n# false positives, top {} per class", fp.top_n).unwrap();
        s.push_str("class\tname\tLoc\tSim\tOth\tBG\tconsidered\n");
        for c in &fp.per_class {
            let k = &c.counts;
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.class_id,
                name(c.class_id),
                k.loc,
                k.sim,
                k.oth,
                k.bg,
                c.considered
            )
            .unwrap();
        }
        let k = &fp.total;
        writeln!(s, "all\t-\t{}\t{}\t{}\t{}\t{}", k.loc, k.sim, k.oth, k.bg, k.total()).unwrap();
    }
    s
}

/// Tab-separated `class rank score tp recall precision` rows.
pub fn format_pr_curves(report: &EvalReport) -> String {
    let mut s = String::from("class\trank\tscore\ttp\trecall\tprecision\n");
    for c in &report.per_class {
        let k = &c.curve;
        for i in 0..k.tp.len() {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.class_id, i, k.scores[i], k.tp[i] as u8, k.recall[i], k.precision[i]
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxCorners;
    use crate::synthdata::AnnotatedObject;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoxCorners {
        BoxCorners::new_unchecked(a, b, c, d)
    }

    fn det(image_id: u64, class_id: usize, b: BoxCorners, score: f64) -> Detection {
        Detection {
            image_id,
            class_id,
            bbox: b,
            score,
        }
    }

    fn ann(image_id: u64, objs: &[(usize, BoxCorners)]) -> Annotation {
        Annotation {
            image_id,
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

    #[test]
    fn hand_computed_ap() {
        let pr = PrCurve::from_flags(&[true, false, true], &[3.0, 2.0, 1.0], 2);
        assert!((voc_ap(&pr, ApMode::AllPoints).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let perfect = PrCurve::from_flags(&[true, true], &[2.0, 1.0], 2);
        let empty = PrCurve::from_flags(&[], &[], 3);
        for mode in [ApMode::AllPoints, ApMode::ElevenPoint] {
            assert_eq!(voc_ap(&perfect, mode), Some(1.0));
            assert_eq!(voc_ap(&empty, mode), Some(0.0));
            assert_eq!(voc_ap(&PrCurve::from_flags(&[false], &[1.0], 0), mode), None);
        }
    }

    #[test]
    fn matching_rules() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let anns = [ann(0, &[(0, g)])];
        let dets = [det(0, 0, g, 0.5), det(0, 0, g, 0.9)];
        let m = match_detections(&dets, &anns, 0, 0.5).unwrap();
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.duplicate, vec![false, true]);

        // IoU 0.49 -> FP
        let low = det(0, 0, bx(0.0, 0.0, 4.9, 10.0), 1.0);
        let m = match_detections(&[low], &anns, 0, 0.5).unwrap();
        assert_eq!(m.tp, vec![false]);
        assert!(!m.duplicate[0]);
    }

    #[test]
    fn difficult_objects_are_ignored() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let mut a = ann(0, &[(0, g)]);
        a.objects[0].difficult = true;
        let m = match_detections(&[det(0, 0, g, 1.0)], &[a], 0, 0.5).unwrap();
        assert_eq!(m.num_gt, 0);
        assert!(m.ignored[0]);
    }

    #[test]
    fn map_over_classes() {
        let g0 = bx(0.0, 0.0, 10.0, 10.0);
        let g1 = bx(20.0, 20.0, 30.0, 30.0);
        let anns = [ann(0, &[(0, g0), (1, g1)])];
        let dets = [det(0, 0, g0, 1.0), det(0, 1, g0, 1.0)];
        let r = evaluate(&dets, &anns, 2, 0.5, ApMode::AllPoints).unwrap();
        assert_eq!(r.per_class[0].ap, Some(1.0));
        assert_eq!(r.per_class[1].ap, Some(0.0));
        assert_eq!(r.map, Some(0.5));
        assert!(evaluate(&[det(0, 5, g0, 1.0)], &anns, 2, 0.5, ApMode::AllPoints).is_err());
        // a class with no ground truth does not enter the mean
        let r = evaluate(&dets[..1], &anns[..], 3, 0.5, ApMode::AllPoints).unwrap();
        assert_eq!(r.per_class[2].ap, None);
        assert_eq!(r.map, Some(0.5));
    }

    #[test]
    fn fp_taxonomy_examples() {
        let groups: Vec<String> = ["round", "round", "poly"].iter().map(|s| s.to_string()).collect();
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let a = ann(
            0,
            &[(0, g), (1, bx(50.0, 0.0, 60.0, 10.0)), (2, bx(0.0, 50.0, 10.0, 60.0))],
        );
        // IoU 0.3 with correct class
        let loc = det(0, 0, bx(0.0, 0.0, 3.0, 10.0), 1.0);
        assert_eq!(classify_fp(&loc, &a, false, &groups, &FpRules::default()), FpType::Loc);
        // IoU 0.4 with same-group class 1
        let sim = det(0, 0, bx(50.0, 0.0, 54.0, 10.0), 1.0);
        assert_eq!(classify_fp(&sim, &a, false, &groups, &FpRules::default()), FpType::Sim);
        let oth = det(0, 0, bx(0.0, 50.0, 4.0, 60.0), 1.0);
        assert_eq!(classify_fp(&oth, &a, false, &groups, &FpRules::default()), FpType::Oth);
        let bg = det(0, 0, bx(80.0, 80.0, 90.0, 90.0), 1.0);
        assert_eq!(classify_fp(&bg, &a, false, &groups, &FpRules::default()), FpType::Bg);
        assert_eq!(classify_fp(&bg, &a, true, &groups, &FpRules::default()), FpType::Loc);
        // a higher floor leaves the 0.4 confusion unattributed
        let strict = FpRules {
            overlap_floor: 0.45,
            ..FpRules::default()
        };
        assert_eq!(classify_fp(&sim, &a, false, &groups, &strict), FpType::Bg);
    }

    #[test]
    fn reports_render() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let anns = [ann(0, &[(0, g)])];
        let dets = [det(0, 0, g, 1.0), det(0, 0, g, 0.5)];
        let r = evaluate(&dets, &anns, 1, 0.5, ApMode::AllPoints).unwrap();
        let fp = fp_analysis(&dets, &anns, &["a".to_string()], 10, &FpRules::default()).unwrap();
        assert_eq!(fp.total.loc, 1);
        let text = format_report(&r, Some(&fp), &["disc".to_string()]);
        assert!(text.contains("mAP\t100.00"));
        assert_eq!(format_pr_curves(&r).lines().count(), 3);
        assert!(fp_analysis(&dets, &anns, &[], 10, &FpRules::default()).is_err());
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<Annotation>)> {
        let boxes = |n| {
            prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64), n).prop_map(|v| {
                v.into_iter()
                    .map(|(x, y, w, h)| bx(x, y, x + w, y + h))
                    .collect::<Vec<_>>()
            })
        };
        (boxes(1..6), boxes(0..15), prop::collection::vec(-5.0..5.0f64, 15)).prop_map(|(gts, dbs, scores)| {
            let anns = vec![ann(0, &gts.iter().map(|&b| (0, b)).collect::<Vec<_>>())];
            let dets = dbs.iter().zip(&scores).map(|(&b, &s)| det(0, 0, b, s)).collect();
            (dets, anns)
        })
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_rescaling((dets, anns) in arb_scene(), k in 0.1..10.0f64, c in -3.0..3.0f64) {
            let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: (k * d.score + c).exp(), ..*d }).collect();
            for mode in [ApMode::AllPoints, ApMode::ElevenPoint] {
                let a = evaluate(&dets, &anns, 1, 0.5, mode).unwrap().map;
                let b = evaluate(&scaled, &anns, 1, 0.5, mode).unwrap().map;
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn trailing_background_fp_never_helps((dets, anns) in arb_scene()) {
            let mut more = dets.clone();
            let lowest = dets.iter().map(|d| d.score).fold(0.0, f64::min);
            more.push(det(0, 0, bx(500.0, 500.0, 510.0, 510.0), lowest - 1.0));
            for mode in [ApMode::AllPoints, ApMode::ElevenPoint] {
                let a = evaluate(&dets, &anns, 1, 0.5, mode).unwrap().map.unwrap();
                let b = evaluate(&more, &anns, 1, 0.5, mode).unwrap().map.unwrap();
                prop_assert!(b <= a);
            }
        }

        #[test]
        fn fp_counts_partition((dets, anns) in arb_scene(), top_n in 0usize..20) {
            let fp = fp_analysis(&dets, &anns, &["g".to_string()], top_n, &FpRules::default()).unwrap();
            let m = match_detections(&dets, &anns, 0, 0.5).unwrap();
            let n_fp = m.tp.iter().filter(|t| !**t).count();
            prop_assert_eq!(fp.total.total(), n_fp.min(top_n));
        }

        #[test]
        fn recall_nondecreasing((dets, anns) in arb_scene()) {
            let r = evaluate(&dets, &anns, 1, 0.5, ApMode::AllPoints).unwrap();
            let c = &r.per_class[0].curve;
            prop_assert!(c.recall.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.precision.iter().chain(&c.recall).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
