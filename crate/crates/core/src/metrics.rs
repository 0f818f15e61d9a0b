//! Center-distance matching, interpolated average precision and PR curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::Detection;
use crate::sim::{GtBox, ObjectClass};

/// Matching thresholds in meters.
pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Reference values reported for the full-scale model on nuScenes. Kept for
/// documentation; nothing here can reproduce them.
pub const REFERENCE_NUSCENES_AP4: f64 = 46.7;
pub const REFERENCE_NUSCENES_MAP: f64 = 36.9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// Detection scores in descending order.
    pub scores: Vec<f64>,
    /// TP flag for each entry of `scores`.
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.gt_matched.len()
    }
}

/// Greedy matching: detections in descending score order each take the
/// nearest unmatched ground truth of the same class within `threshold`.
pub fn match_center_distance(dets: &[Detection], gts: &[GtBox], threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| dets[*b].score.total_cmp(&dets[*a].score).then(a.cmp(b)));
    let mut gt_matched = vec![false; gts.len()];
    let mut scores = Vec::with_capacity(dets.len());
    let mut tp = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (g, b) in gts.iter().enumerate() {
            if gt_matched[g] || b.class != d.class {
                continue;
            }
            let dist = (d.center[0] - b.center[0]).hypot(d.center[1] - b.center[1]);
            if dist <= threshold && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, g));
            }
        }
        if let Some((_, g)) = best {
            gt_matched[g] = true;
        }
        scores.push(d.score);
        tp.push(best.is_some());
    }
    MatchResult {
        scores,
        tp,
        gt_matched,
    }
}

/// 101-point interpolated AP of a score-sorted TP sequence.
///
/// Both sides empty gives 1; detections without ground truth give 0.
pub fn average_precision_of(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        hits += *t as usize;
        points.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    // precision envelope from the right
    let mut env = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        env[i] = best;
    }
    let mut total = 0.0;
    let mut cursor = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while cursor < points.len() && points[cursor].0 < level {
            cursor += 1;
        }
        if cursor < points.len() {
            total += env[cursor];
        }
    }
    total / 101.0
}

pub fn average_precision(m: &MatchResult) -> f64 {
    average_precision_of(&m.tp, m.num_gt())
}

/// `(recall, precision)` after each run of equal scores.
pub fn pr_curve_of(scores: &[f64], tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut hits = 0usize;
    for i in 0..tp.len() {
        hits += tp[i] as usize;
        if i + 1 < tp.len() && scores[i + 1] == scores[i] {
            continue;
        }
        let recall = if num_gt == 0 { 0.0 } else { hits as f64 / num_gt as f64 };
        out.push((recall, hits as f64 / (i + 1) as f64));
    }
    out
}

pub fn pr_curve(m: &MatchResult) -> Vec<(f64, f64)> {
    pr_curve_of(&m.scores, &m.tp, m.num_gt())
}

/// Trapezoid area under a PR curve, extended flat to recall 0.
pub fn pr_auc(curve: &[(f64, f64)]) -> f64 {
    let Some(first) = curve.first() else {
        return 0.0;
    };
    let mut prev = (0.0, first.1);
    let mut area = 0.0;
    for &(r, p) in curve {
        area += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    area
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApSummary {
    /// AP per entry of [`THRESHOLDS`].
    pub ap: [f64; 4],
    pub map: f64,
}

/// Combines `(threshold, AP)` pairs covering exactly [`THRESHOLDS`].
pub fn map_summary(aps: &[(f64, f64)]) -> Result<ApSummary> {
    if aps.len() != THRESHOLDS.len() {
        return Err(Error::InvalidArgument(format!(
            "map_summary needs {} thresholds, got {}",
            THRESHOLDS.len(),
            aps.len()
        )));
    }
    let mut ap = [f64::NAN; 4];
    for &(t, v) in aps {
        let Some(i) = THRESHOLDS.iter().position(|x| *x == t) else {
            return Err(Error::InvalidArgument(format!("unexpected threshold {t}")));
        };
        if !ap[i].is_nan() {
            return Err(Error::InvalidArgument(format!("threshold {t} given twice")));
        }
        ap[i] = v;
    }
    if let Some(i) = ap.iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("missing threshold {}", THRESHOLDS[i])));
    }
    Ok(ApSummary {
        ap,
        map: ap.iter().sum::<f64>() / 4.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: ObjectClass,
    pub num_gt: usize,
    pub num_det: usize,
    pub summary: ApSummary,
    pub auc: [f64; 4],
    pub curves: [Vec<(f64, f64)>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Classes present in the ground truth or the detections.
    pub per_class: Vec<ClassMetrics>,
    /// Mean over present classes; `None` when nothing is present.
    pub overall: Option<ApSummary>,
    pub overall_auc: Option<[f64; 4]>,
}

/// Pools matches over frames and sequences, then scores per class.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pooled: Vec<[Vec<(f64, bool)>; 4]>,
    num_gt: Vec<usize>,
}

impl Default for Evaluator {
    fn default() -> Self {
        Self::new()
    }
}

impl Evaluator {
    pub fn new() -> Self {
        Evaluator {
            pooled: (0..ObjectClass::COUNT).map(|_| Default::default()).collect(),
            num_gt: vec![0; ObjectClass::COUNT],
        }
    }

    pub fn add_frame(&mut self, dets: &[Detection], gts: &[GtBox]) {
        for class in ObjectClass::ALL {
            let k = class.id();
            let d: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
            let g: Vec<GtBox> = gts.iter().filter(|g| g.class == class).copied().collect();
            self.num_gt[k] += g.len();
            for (ti, &thr) in THRESHOLDS.iter().enumerate() {
                let m = match_center_distance(&d, &g, thr);
                self.pooled[k][ti].extend(m.scores.iter().copied().zip(m.tp.iter().copied()));
            }
        }
    }

    pub fn report(&self) -> EvalReport {
        let mut per_class = Vec::new();
        for class in ObjectClass::ALL {
            let k = class.id();
            let num_det = self.pooled[k][0].len();
            if self.num_gt[k] == 0 && num_det == 0 {
                continue;
            }
            let mut aps = Vec::with_capacity(4);
            let mut auc = [0.0; 4];
            let mut curves: [Vec<(f64, f64)>; 4] = Default::default();
            for (ti, &thr) in THRESHOLDS.iter().enumerate() {
                let mut entries = self.pooled[k][ti].clone();
                // stable: equal scores keep frame order
                entries.sort_by(|a, b| b.0.total_cmp(&a.0));
                let scores: Vec<f64> = entries.iter().map(|e| e.0).collect();
                let tp: Vec<bool> = entries.iter().map(|e| e.1).collect();
                aps.push((thr, average_precision_of(&tp, self.num_gt[k])));
                curves[ti] = pr_curve_of(&scores, &tp, self.num_gt[k]);
                auc[ti] = pr_auc(&curves[ti]);
            }
            per_class.push(ClassMetrics {
                class,
                num_gt: self.num_gt[k],
                num_det,
                summary: map_summary(&aps).expect("four thresholds"),
                auc,
                curves,
            });
        }
        let (overall, overall_auc) = if per_class.is_empty() {
            (None, None)
        } else {
            let n = per_class.len() as f64;
            let mut ap = [0.0; 4];
            let mut auc = [0.0; 4];
            for c in &per_class {
                for i in 0..4 {
                    ap[i] += c.summary.ap[i] / n;
                    auc[i] += c.auc[i] / n;
                }
            }
            let pairs: Vec<(f64, f64)> = THRESHOLDS.iter().copied().zip(ap).collect();
            (Some(map_summary(&pairs).expect("four thresholds")), Some(auc))
        };
        EvalReport {
            per_class,
            overall,
            overall_auc,
        }
    }
}

impl EvalReport {
    pub fn map(&self) -> f64 {
        self.overall.as_ref().map_or(0.0, |s| s.map)
    }

    /// `class,threshold,ap,map,auc` rows; `all` rows carry the class mean.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,threshold,ap,map,auc\n");
        for c in &self.per_class {
            for i in 0..4 {
                writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6}",
                    c.class.name(),
                    THRESHOLDS[i],
                    c.summary.ap[i],
                    c.summary.map,
                    c.auc[i]
                )
                .unwrap();
            }
        }
        if let (Some(o), Some(auc)) = (&self.overall, &self.overall_auc) {
            for i in 0..4 {
                writeln!(s, "all,{},{:.6},{:.6},{:.6}", THRESHOLDS[i], o.ap[i], o.map, auc[i]).unwrap();
            }
        }
        s
    }

    /// Writes `metrics.csv` and one `pr_<class>_<threshold>.csv` per curve.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))?;
        for c in &self.per_class {
            for (i, curve) in c.curves.iter().enumerate() {
                let mut s = String::from("recall,precision\n");
                for (r, p) in curve {
                    writeln!(s, "{r:.6},{p:.6}").unwrap();
                }
                let path = dir.join(format!("pr_{}_{}.csv", c.class.name(), THRESHOLDS[i]));
                fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}
