//! Panoptic quality and mean IoU.
//!
//! A predicted and a ground-truth segment of the same category match when
//! their IoU exceeds 0.5, with pixels that are void in the ground truth
//! removed from the union. Because segments within a map are disjoint, a
//! match at that threshold is unique on both sides. Unmatched ground truth
//! counts as a false negative; an unmatched prediction counts as a false
//! positive unless more than half of it lies on void.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::panoptic::{unpack, PanopticMap};

/// Pixels sharing one `(category, instance)` label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub category_id: u32,
    pub instance_id: u32,
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<usize>,
}

impl Segment {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// One segment per distinct non-void label, ordered by (category, instance).
pub fn extract_segments(map: &PanopticMap) -> Vec<Segment> {
    let void = map.void_id();
    let mut by_label: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, &id) in map.ids().iter().enumerate() {
        let (sem, inst) = unpack(id);
        if sem != void {
            by_label.entry((sem, inst)).or_default().push(i);
        }
    }
    by_label
        .into_iter()
        .map(|((category_id, instance_id), pixels)| Segment {
            category_id,
            instance_id,
            pixels,
        })
        .collect()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub isthing: bool,
    iou: CompensatedSum,
}

impl ClassStats {
    pub fn iou_sum(&self) -> f64 {
        self.iou.value()
    }

    fn add_match(&mut self, iou: f64) {
        self.tp += 1;
        self.iou.add(iou);
    }

    pub fn is_vacuous(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Per-category TP/FP/FN counts and matched IoU sums.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassStats>,
}

impl PqStats {
    fn entry(&mut self, category: u32, isthing: bool) -> &mut ClassStats {
        let e = self.per_class.entry(category).or_default();
        e.isthing = isthing;
        e
    }

    /// Adds another image's statistics. Counts add exactly; IoU sums are
    /// combined with compensation.
    pub fn merge(&mut self, other: &PqStats) {
        for (&c, s) in &other.per_class {
            let e = self.entry(c, s.isthing);
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou.add(s.iou.sum);
            e.iou.add(s.iou.comp);
        }
    }

    /// Counts only, for exact comparisons.
    pub fn counts(&self) -> BTreeMap<u32, (u64, u64, u64)> {
        self.per_class
            .iter()
            .map(|(&c, s)| (c, (s.tp, s.fp, s.fn_)))
            .collect()
    }
}

/// Matches segments of one image. `void` marks pixels that are void in the
/// ground truth; its length is the image's pixel count.
pub fn match_segments(pred: &[Segment], gt: &[Segment], void: &[bool], categories: &crate::panoptic::CategoryTable) -> PqStats {
    let np = void.len();
    let mut gt_of = vec![usize::MAX; np];
    for (g, seg) in gt.iter().enumerate() {
        for &i in &seg.pixels {
            gt_of[i] = g;
        }
    }
    let mut pred_void = vec![0usize; pred.len()];
    let mut overlap: HashMap<(usize, usize), usize> = HashMap::new();
    for (p, seg) in pred.iter().enumerate() {
        for &i in &seg.pixels {
            if void[i] {
                pred_void[p] += 1;
            } else if gt_of[i] != usize::MAX {
                *overlap.entry((p, gt_of[i])).or_default() += 1;
            }
        }
    }

    let mut stats = PqStats::default();
    for seg in pred.iter().chain(gt) {
        stats.entry(seg.category_id, categories.is_thing_id(seg.category_id));
    }
    let mut pred_matched = vec![false; pred.len()];
    let mut gt_matched = vec![false; gt.len()];
    let mut pairs: Vec<_> = overlap.into_iter().collect();
    pairs.sort_unstable();
    for ((p, g), inter) in pairs {
        if pred[p].category_id != gt[g].category_id {
            continue;
        }
        let union = pred[p].area() + gt[g].area() - inter - pred_void[p];
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            assert!(
                !pred_matched[p] && !gt_matched[g],
                "segment matched twice above IoU 0.5; segments overlap"
            );
            pred_matched[p] = true;
            gt_matched[g] = true;
            stats.per_class.get_mut(&gt[g].category_id).expect("registered").add_match(iou);
        }
    }
    for (g, seg) in gt.iter().enumerate() {
        if !gt_matched[g] {
            stats.per_class.get_mut(&seg.category_id).expect("registered").fn_ += 1;
        }
    }
    for (p, seg) in pred.iter().enumerate() {
        if !pred_matched[p] && 2 * pred_void[p] <= seg.area() {
            stats.per_class.get_mut(&seg.category_id).expect("registered").fp += 1;
        }
    }
    stats
}

/// Statistics for a predicted map against ground truth.
pub fn evaluate_maps(pred: &PanopticMap, gt: &PanopticMap) -> Result<PqStats> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let void: Vec<bool> = (0..gt.len()).map(|i| gt.is_void_index(i)).collect();
    Ok(match_segments(
        &extract_segments(pred),
        &extract_segments(gt),
        &void,
        gt.categories(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub isthing: bool,
}

/// Class-averaged quality over `n` non-vacuous classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PqReport {
    pub per_class: BTreeMap<u32, ClassQuality>,
    pub all: Summary,
    pub things: Summary,
    pub stuff: Summary,
}

/// `SQ = Σ IoU / TP`, `RQ = TP / (TP + FP/2 + FN/2)`, `PQ = SQ · RQ`.
pub fn class_quality(s: &ClassStats) -> Quality {
    if s.tp == 0 {
        return Quality {
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
        };
    }
    let tp = s.tp as f64;
    let sq = s.iou_sum() / tp;
    let rq = tp / (tp + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64);
    Quality { pq: sq * rq, sq, rq }
}

/// Per-class quality plus averages over all, thing and stuff classes.
/// Classes with no segments on either side are left out.
pub fn panoptic_quality(stats: &PqStats) -> PqReport {
    let per_class: BTreeMap<u32, ClassQuality> = stats
        .per_class
        .iter()
        .filter(|(_, s)| !s.is_vacuous())
        .map(|(&c, s)| {
            let q = class_quality(s);
            (
                c,
                ClassQuality {
                    pq: q.pq,
                    sq: q.sq,
                    rq: q.rq,
                    tp: s.tp,
                    fp: s.fp,
                    fn_: s.fn_,
                    isthing: s.isthing,
                },
            )
        })
        .collect();
    let summarise = |keep: &dyn Fn(&ClassQuality) -> bool| {
        let chosen: Vec<&ClassQuality> = per_class.values().filter(|q| keep(q)).collect();
        let n = chosen.len();
        if n == 0 {
            return Summary {
                pq: 0.0,
                sq: 0.0,
                rq: 0.0,
                n,
            };
        }
        let mean = |f: &dyn Fn(&ClassQuality) -> f64| chosen.iter().map(|q| f(q)).sum::<f64>() / n as f64;
        Summary {
            pq: mean(&|q| q.pq),
            sq: mean(&|q| q.sq),
            rq: mean(&|q| q.rq),
            n,
        }
    };
    let all = summarise(&|_| true);
    let things = summarise(&|q| q.isthing);
    let stuff = summarise(&|q| !q.isthing);
    PqReport {
        per_class,
        all,
        things,
        stuff,
    }
}

/// Mean over classes of intersection / union on semantic label maps. Pixels
/// whose ground truth is `ignore` are skipped; classes count if they occur in
/// either map on the remaining pixels.
pub fn miou(pred: &[u32], gt: &[u32], ignore: u32) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted labels vs {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter: BTreeMap<u32, u64> = BTreeMap::new();
    let mut union: BTreeMap<u32, u64> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        if p == g {
            *inter.entry(g).or_default() += 1;
            *union.entry(g).or_default() += 1;
        } else {
            *union.entry(g).or_default() += 1;
            if p != ignore {
                *union.entry(p).or_default() += 1;
            }
        }
    }
    if union.is_empty() {
        return Err(Error::invalid("mIoU over zero labelled pixels"));
    }
    let total: f64 = union
        .iter()
        .map(|(c, &u)| *inter.get(c).unwrap_or(&0) as f64 / u as f64)
        .sum();
    Ok(total / union.len() as f64)
}

/// Largest extent accepted by [`pq_oracle`].
pub const ORACLE_MAX_EXTENT: usize = 64;
/// Largest per-category segment count accepted by [`pq_oracle`].
pub const ORACLE_MAX_SEGMENTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub stats: PqStats,
    pub all: Quality,
}

/// Recomputes PQ by brute force: IoU of every same-category pair is counted
/// from the raw maps, and every partial one-to-one pairing is enumerated; the
/// largest pairing whose pairs all exceed IoU 0.5 is taken as the match.
pub fn pq_oracle(pred: &PanopticMap, gt: &PanopticMap) -> Result<OracleResult> {
    let (h, w) = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != (h, w) {
        return Err(Error::shape("oracle maps differ in extent"));
    }
    if h > ORACLE_MAX_EXTENT || w > ORACLE_MAX_EXTENT {
        return Err(Error::invalid(format!(
            "oracle accepts maps up to {ORACLE_MAX_EXTENT}x{ORACLE_MAX_EXTENT}, got {h}x{w}"
        )));
    }
    let void = gt.void_id();
    let pvoid = pred.void_id();
    let labels = |ids: &[u32], void_id: u32| {
        let mut l: Vec<u32> = ids.iter().copied().filter(|&id| unpack(id).0 != void_id).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let pred_labels = labels(pred.ids(), pvoid);
    let gt_labels = labels(gt.ids(), void);
    let mut categories: Vec<u32> = pred_labels.iter().chain(&gt_labels).map(|&l| unpack(l).0).collect();
    categories.sort_unstable();
    categories.dedup();

    let mut stats = PqStats::default();
    for &cat in &categories {
        let ps: Vec<u32> = pred_labels.iter().copied().filter(|&l| unpack(l).0 == cat).collect();
        let gs: Vec<u32> = gt_labels.iter().copied().filter(|&l| unpack(l).0 == cat).collect();
        if ps.len() > ORACLE_MAX_SEGMENTS || gs.len() > ORACLE_MAX_SEGMENTS {
            return Err(Error::invalid(format!(
                "category {cat} has too many segments for exhaustive matching"
            )));
        }
        let mut iou = vec![vec![0.0f64; gs.len()]; ps.len()];
        let mut p_void_frac = vec![0.0f64; ps.len()];
        for (a, &pl) in ps.iter().enumerate() {
            let mut p_area = 0usize;
            let mut p_on_void = 0usize;
            for i in 0..pred.len() {
                if pred.ids()[i] == pl {
                    p_area += 1;
                    if unpack(gt.ids()[i]).0 == void {
                        p_on_void += 1;
                    }
                }
            }
            p_void_frac[a] = p_on_void as f64 / p_area as f64;
            for (b, &gl) in gs.iter().enumerate() {
                let mut inter = 0usize;
                let mut g_area = 0usize;
                for i in 0..gt.len() {
                    let in_g = gt.ids()[i] == gl;
                    g_area += in_g as usize;
                    inter += (in_g && pred.ids()[i] == pl) as usize;
                }
                iou[a][b] = inter as f64 / (p_area + g_area - inter - p_on_void) as f64;
            }
        }

        let (pairs, _) = best_pairing(&iou, 0, &mut vec![false; ps.len()]);
        let entry = stats.entry(cat, gt.categories().is_thing_id(cat));
        let mut pred_used = vec![false; ps.len()];
        for &(a, b) in &pairs {
            entry.add_match(iou[a][b]);
            pred_used[a] = true;
        }
        entry.fn_ += (gs.len() - pairs.len()) as u64;
        entry.fp += (0..ps.len())
            .filter(|&a| !pred_used[a] && p_void_frac[a] <= 0.5)
            .count() as u64;
    }

    let mut sums = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for s in stats.per_class.values() {
        if s.tp + s.fp + s.fn_ == 0 {
            continue;
        }
        n += 1;
        if s.tp > 0 {
            let sq = s.iou_sum() / s.tp as f64;
            let rq = s.tp as f64 / (s.tp as f64 + (s.fp + s.fn_) as f64 / 2.0);
            sums.0 += sq * rq;
            sums.1 += sq;
            sums.2 += rq;
        }
    }
    let all = if n == 0 {
        Quality {
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
        }
    } else {
        Quality {
            pq: sums.0 / n as f64,
            sq: sums.1 / n as f64,
            rq: sums.2 / n as f64,
        }
    };
    Ok(OracleResult { stats, all })
}

/// Largest set of (pred, gt) pairs, each with IoU > 0.5, over ground-truth
/// segments `g..`; ties prefer the larger IoU sum.
fn best_pairing(iou: &[Vec<f64>], g: usize, used: &mut Vec<bool>) -> (Vec<(usize, usize)>, f64) {
    let n_gt = iou.first().map_or(0, |r| r.len());
    if g >= n_gt {
        return (Vec::new(), 0.0);
    }
    let (mut best, mut best_sum) = best_pairing(iou, g + 1, used);
    for p in 0..iou.len() {
        if used[p] || iou[p][g] <= 0.5 {
            continue;
        }
        used[p] = true;
        let (mut rest, sum) = best_pairing(iou, g + 1, used);
        used[p] = false;
        let total = sum + iou[p][g];
        if rest.len() + 1 > best.len() || (rest.len() + 1 == best.len() && total > best_sum) {
            rest.push((p, g));
            best = rest;
            best_sum = total;
        }
    }
    (best, best_sum)
}
