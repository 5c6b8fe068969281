//! Location- and class-sensitive SELD metrics.
//!
//! Events are frame-level records. They are grouped into 1 s segments; within
//! each segment and class, references and predictions in the same frame are
//! paired by minimum total angular error. A pair within 20 degrees is a true
//! positive; a farther pair counts as one false positive and one false
//! negative. Per segment, substitutions are `min(FN, FP)` over all classes
//! and the excess is deletions or insertions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::accdoa::{decode, AccdoaTensor};
use crate::error::{Error, Result};
use crate::events::{EventList, EventRecord};
use crate::geometry::angular_distance;

/// Label frames per scoring segment.
pub const SEGMENT_FRAMES: usize = 10;
pub const DOA_THRESHOLD_DEG: f64 = 20.0;
/// Localization error reported when nothing was matched.
pub const LE_SENTINEL_DEG: f64 = 180.0;

/// Minimum-cost assignment on a row-major `rows x cols` matrix. Returns
/// `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<f64> = (0..cols * rows)
            .map(|i| cost[(i % rows) * cols + i / rows])
            .collect();
        let mut p: Vec<(usize, usize)> = hungarian(&t, cols, rows)
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        p.sort_unstable();
        return p;
    }
    // Shortest augmenting paths with potentials; 1-based with column 0 as
    // the virtual source.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * m + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub frame: usize,
    pub class_id: usize,
    pub error_deg: f64,
}

/// Matching result for one class inside one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMatches {
    pub class_id: usize,
    pub n_ref: usize,
    pub n_pred: usize,
    pub pairs: Vec<MatchedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatches {
    pub segment: usize,
    pub classes: Vec<ClassMatches>,
}

fn by_class_and_frame<'a>(
    records: impl Iterator<Item = &'a EventRecord>,
) -> BTreeMap<usize, BTreeMap<usize, Vec<&'a EventRecord>>> {
    let mut out: BTreeMap<usize, BTreeMap<usize, Vec<&EventRecord>>> = BTreeMap::new();
    for r in records {
        out.entry(r.class_id)
            .or_default()
            .entry(r.frame)
            .or_default()
            .push(r);
    }
    out
}

fn angle(a: &EventRecord, b: &EventRecord) -> f64 {
    angular_distance(a.doa(), b.doa()).expect("event DOAs are unit vectors")
}

/// Pairs the records of `segment` class by class. Only same-frame pairs are
/// admissible, so the assignment splits into independent per-frame problems.
pub fn match_events(refs: &EventList, preds: &EventList, segment: usize) -> SegmentMatches {
    let in_seg = |r: &&EventRecord| r.frame / SEGMENT_FRAMES == segment;
    let rmap = by_class_and_frame(refs.iter().filter(in_seg));
    let pmap = by_class_and_frame(preds.iter().filter(in_seg));
    let mut classes: Vec<usize> = rmap.keys().chain(pmap.keys()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let empty = BTreeMap::new();
    let classes = classes
        .into_iter()
        .map(|c| {
            let rf = rmap.get(&c).unwrap_or(&empty);
            let pf = pmap.get(&c).unwrap_or(&empty);
            let mut pairs = Vec::new();
            for (frame, rs) in rf {
                let Some(ps) = pf.get(frame) else { continue };
                let cost: Vec<f64> = rs
                    .iter()
                    .flat_map(|r| ps.iter().map(move |p| angle(r, p)))
                    .collect();
                for (i, j) in hungarian(&cost, rs.len(), ps.len()) {
                    pairs.push(MatchedPair {
                        frame: *frame,
                        class_id: c,
                        error_deg: cost[i * ps.len() + j],
                    });
                }
            }
            ClassMatches {
                class_id: c,
                n_ref: rf.values().map(Vec::len).sum(),
                n_pred: pf.values().map(Vec::len).sum(),
                pairs,
            }
        })
        .collect();
    SegmentMatches { segment, classes }
}

/// Counts for one class; S/D/I use this class's FN and FP only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n_ref: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    /// Same-class matches at any angular error.
    pub matched: usize,
    pub error_sum_deg: f64,
}

impl ClassCounts {
    fn add(&mut self, o: &ClassCounts) {
        self.n_ref += o.n_ref;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.subs += o.subs;
        self.dels += o.dels;
        self.ins += o.ins;
        self.matched += o.matched;
        self.error_sum_deg += o.error_sum_deg;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub n_ref: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    pub per_class: BTreeMap<usize, ClassCounts>,
}

fn sdi(fn_: usize, fp: usize) -> (usize, usize, usize) {
    let s = fn_.min(fp);
    (s, fn_ - s, fp - s)
}

pub fn score_segment(m: &SegmentMatches) -> SegmentCounts {
    let mut out = SegmentCounts::default();
    for cm in &m.classes {
        let close = cm
            .pairs
            .iter()
            .filter(|p| p.error_deg <= DOA_THRESHOLD_DEG)
            .count();
        let far = cm.pairs.len() - close;
        let mut c = ClassCounts {
            n_ref: cm.n_ref,
            tp: close,
            fp: cm.n_pred - close,
            fn_: cm.n_ref - close,
            matched: cm.pairs.len(),
            error_sum_deg: cm.pairs.iter().map(|p| p.error_deg).sum(),
            ..ClassCounts::default()
        };
        debug_assert_eq!(c.fp, cm.n_pred - cm.pairs.len() + far);
        (c.subs, c.dels, c.ins) = sdi(c.fn_, c.fp);
        out.n_ref += c.n_ref;
        out.tp += c.tp;
        out.fp += c.fp;
        out.fn_ += c.fn_;
        out.per_class.insert(cm.class_id, c);
    }
    (out.subs, out.dels, out.ins) = sdi(out.fn_, out.fp);
    out
}

/// Matches and scores every segment that holds a reference or prediction.
pub fn score_clip(refs: &EventList, preds: &EventList) -> Vec<SegmentCounts> {
    let mut segs: Vec<usize> = refs
        .iter()
        .chain(preds.iter())
        .map(|r| r.frame / SEGMENT_FRAMES)
        .collect();
    segs.sort_unstable();
    segs.dedup();
    segs.into_iter()
        .map(|s| score_segment(&match_events(refs, preds, s)))
        .collect()
}

/// Eq. form: `ER/4 + (1 - F)/4 + LE/(4 * 180) + (1 - LR)/4`.
pub fn compute_seld_score(er: f64, f: f64, le_deg: f64, lr: f64) -> f64 {
    er / 4.0 + (1.0 - f) / 4.0 + le_deg / (4.0 * 180.0) + (1.0 - lr) / 4.0
}

fn f_measure(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub counts: ClassCounts,
    pub er20: f64,
    pub f20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
    pub seld_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub er20: f64,
    pub f20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
    pub seld_score: f64,
    pub n_ref: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    /// Classes that have at least one reference event.
    pub per_class: Vec<ClassReport>,
}

/// Micro-averaged ER and F, class-macro-averaged LE and LR.
pub fn aggregate(segments: &[SegmentCounts]) -> Result<MetricsReport> {
    let mut tot = SegmentCounts::default();
    for s in segments {
        tot.n_ref += s.n_ref;
        tot.tp += s.tp;
        tot.fp += s.fp;
        tot.fn_ += s.fn_;
        tot.subs += s.subs;
        tot.dels += s.dels;
        tot.ins += s.ins;
        for (c, cc) in &s.per_class {
            tot.per_class.entry(*c).or_default().add(cc);
        }
    }
    if tot.n_ref == 0 {
        return Err(Error::EmptyReference);
    }
    let er20 = (tot.subs + tot.dels + tot.ins) as f64 / tot.n_ref as f64;
    let f20 = f_measure(tot.tp, tot.fp, tot.fn_);
    let mut le = Vec::new();
    let mut lr = Vec::new();
    let mut per_class = Vec::new();
    for (&c, cc) in &tot.per_class {
        if cc.matched > 0 {
            le.push(cc.error_sum_deg / cc.matched as f64);
        }
        if cc.n_ref == 0 {
            continue;
        }
        lr.push(cc.matched as f64 / cc.n_ref as f64);
        let c_le = if cc.matched > 0 {
            cc.error_sum_deg / cc.matched as f64
        } else {
            LE_SENTINEL_DEG
        };
        let c_lr = cc.matched as f64 / cc.n_ref as f64;
        let c_er = (cc.subs + cc.dels + cc.ins) as f64 / cc.n_ref as f64;
        let c_f = f_measure(cc.tp, cc.fp, cc.fn_);
        per_class.push(ClassReport {
            class_id: c,
            counts: *cc,
            er20: c_er,
            f20: c_f,
            le_cd: c_le,
            lr_cd: c_lr,
            seld_score: compute_seld_score(c_er, c_f, c_le, c_lr),
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let le_cd = if le.is_empty() {
        LE_SENTINEL_DEG
    } else {
        mean(&le)
    };
    let lr_cd = mean(&lr);
    Ok(MetricsReport {
        er20,
        f20,
        le_cd,
        lr_cd,
        seld_score: compute_seld_score(er20, f20, le_cd, lr_cd),
        n_ref: tot.n_ref,
        tp: tot.tp,
        fp: tot.fp,
        fn_: tot.fn_,
        subs: tot.subs,
        dels: tot.dels,
        ins: tot.ins,
        per_class,
    })
}

/// Scores a set of clips; segments never span clips.
pub fn evaluate_event_lists(pairs: &[(&EventList, &EventList)]) -> Result<MetricsReport> {
    let segs: Vec<SegmentCounts> = pairs.iter().flat_map(|(r, p)| score_clip(r, p)).collect();
    aggregate(&segs)
}

impl MetricsReport {
    pub fn class(&self, class_id: usize) -> Option<&ClassReport> {
        self.per_class.iter().find(|c| c.class_id == class_id)
    }

    /// Human-readable summary with the per-class breakdown.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ER20    F20     LE_CD   LR_CD   SELD");
        let _ = writeln!(
            s,
            "{:<7.3} {:<7.3} {:<7.2} {:<7.3} {:.4}",
            self.er20, self.f20, self.le_cd, self.lr_cd, self.seld_score
        );
        let _ = writeln!(
            s,
            "refs {}  TP {}  FP {}  FN {}  S {}  D {}  I {}",
            self.n_ref, self.tp, self.fp, self.fn_, self.subs, self.dels, self.ins
        );
        let _ = writeln!(s, "class  refs   SELD    S      D      I");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<6} {:<6} {:<7.4} {:<6} {:<6} {}",
                c.class_id,
                c.counts.n_ref,
                c.seld_score,
                c.counts.subs,
                c.counts.dels,
                c.counts.ins
            );
        }
        s
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

pub const DEFAULT_TAU_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub tau: f64,
    pub decoded_events: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_tau: f64,
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn best(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.tau == self.best_tau)
            .expect("best tau is in the grid")
    }

    /// Difference between the worst and best SELD score over the grid.
    pub fn spread(&self) -> f64 {
        let s = self.entries.iter().map(|e| e.report.seld_score);
        s.clone().fold(f64::NEG_INFINITY, f64::max) - s.fold(f64::INFINITY, f64::min)
    }
}

/// Decodes at every `tau` and keeps the lowest SELD score; ties go to the
/// smaller `tau`.
pub fn threshold_sweep(
    preds: &[AccdoaTensor],
    refs: &[EventList],
    grid: &[f64],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    if preds.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} reference lists",
            preds.len(),
            refs.len()
        )));
    }
    let mut entries = Vec::with_capacity(grid.len());
    for &tau in grid {
        let decoded: Vec<EventList> = preds.iter().map(|p| decode(p, tau)).collect();
        let pairs: Vec<(&EventList, &EventList)> = refs.iter().zip(&decoded).collect();
        entries.push(SweepEntry {
            tau,
            decoded_events: decoded.iter().map(EventList::len).sum(),
            report: evaluate_event_lists(&pairs)?,
        });
    }
    let best = entries
        .iter()
        .min_by(|a, b| {
            a.report
                .seld_score
                .total_cmp(&b.report.seld_score)
                .then(a.tau.total_cmp(&b.tau))
        })
        .expect("nonempty grid");
    Ok(SweepResult {
        best_tau: best.tau,
        entries,
    })
}
