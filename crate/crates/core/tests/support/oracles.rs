//! Independent references for matching and scoring.

use rand::Rng;
use seldkit::events::{EventList, EventRecord};
use seldkit::geometry::{cart_to_sph, Vec3};
use seldkit::metrics::MetricsReport;

pub fn rec(frame: usize, class: usize, az: f64, el: f64) -> EventRecord {
    EventRecord::new(frame, class, az, el)
}

/// Minimum over all injections of the smaller side into the larger.
pub fn brute_force_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(cost, rows, cols, r + 1, used));
                used[c] = false;
            }
        }
        best
    }
    if rows <= cols {
        go(cost, rows, cols, 0, &mut vec![false; cols])
    } else {
        let t: Vec<f64> = (0..cols * rows)
            .map(|i| cost[(i % rows) * cols + i / rows])
            .collect();
        go(&t, cols, rows, 0, &mut vec![false; rows])
    }
}

pub fn angle(a: &EventRecord, b: &EventRecord) -> f64 {
    let (x, y) = (a.doa(), b.doa());
    (x[0] * y[0] + x[1] * y[1] + x[2] * y[2])
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees()
}

/// Exhaustive search over partial matchings of one class, same-frame pairs
/// only: most pairs first, then least total error.
pub fn exhaustive(refs: &[EventRecord], preds: &[EventRecord]) -> (usize, f64) {
    fn go(
        refs: &[EventRecord],
        preds: &[EventRecord],
        i: usize,
        used: &mut Vec<bool>,
    ) -> (usize, f64) {
        if i == refs.len() {
            return (0, 0.0);
        }
        let mut best = go(refs, preds, i + 1, used);
        for j in 0..preds.len() {
            if used[j] || preds[j].frame != refs[i].frame {
                continue;
            }
            used[j] = true;
            let (n, c) = go(refs, preds, i + 1, used);
            used[j] = false;
            let cand = (n + 1, c + angle(&refs[i], &preds[j]));
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        best
    }
    go(refs, preds, 0, &mut vec![false; preds.len()])
}

pub fn random_dir(rng: &mut impl Rng) -> (f64, f64) {
    (rng.gen_range(-180.0..180.0), rng.gen_range(-90.0..=90.0))
}

pub fn rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    use rand_distr::{Distribution, StandardNormal};
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate(list: &EventList, r: &[[f64; 3]; 3]) -> EventList {
    list.iter()
        .map(|e| {
            let d = e.doa();
            let v: Vec3 = [0, 1, 2].map(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2]);
            let (az, el) = cart_to_sph(v);
            rec(e.frame, e.class_id, az, el)
        })
        .collect()
}

/// Predictions near the references, with misses, spurious events and
/// wrong classes mixed in.
pub fn noisy_scene(rng: &mut impl Rng, frames: usize, classes: usize) -> (EventList, EventList) {
    let mut refs = EventList::new();
    let mut preds = EventList::new();
    for f in 0..frames {
        for c in 0..classes {
            if rng.gen_bool(0.4) {
                let (az, el) = random_dir(rng);
                let el = el.clamp(-80.0, 80.0);
                refs.push(rec(f, c, az, el));
                if rng.gen_bool(0.8) {
                    let pc = if rng.gen_bool(0.1) {
                        (c + 1) % classes
                    } else {
                        c
                    };
                    preds.push(rec(
                        f,
                        pc,
                        az + rng.gen_range(-35.0..35.0),
                        el + rng.gen_range(-10.0..10.0),
                    ));
                }
            }
            if rng.gen_bool(0.1) {
                let (az, el) = random_dir(rng);
                preds.push(rec(f, c, az, el));
            }
        }
    }
    (refs, preds)
}

pub fn metrics_tuple(r: &MetricsReport) -> [f64; 4] {
    [r.er20, r.f20, r.le_cd, r.lr_cd]
}
