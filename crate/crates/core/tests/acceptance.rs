//! End-to-end acceptance gate. Every criterion prints one PASS/FAIL line;
//! the soft insertion criterion writes a warning file instead of failing.

mod support;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use seldkit::accdoa::{decode, encode};
use seldkit::events::{EventList, EventRecord};
use seldkit::features::{stft, FeatureConfig, FeatureExtractor, MelFilterbank};
use seldkit::geometry::{angular_distance, cart_to_sph, sph_to_cart};
use seldkit::metrics::{compute_seld_score, evaluate_event_lists, match_events};
use seldkit::models::{SeldModel, Variant};
use seldkit::optim::AdamConfig;
use seldkit::scene::{render_sources, seeded_rng, SceneSpec, SourceEvent, SourceKind, Trajectory};
use seldkit::tape::{GruParams, RunningStats};
use seldkit::train::{
    overfit_batch, prepare_data, run_comparison, ComparisonTable, ExperimentConfig, Item,
};
use support::oracles::{exhaustive, metrics_tuple, noisy_scene, random_dir, rec, rotate, rotation};
use support::{gradient_error, random_tensor, rng, separated_tensor, GRAD_REL_TOL};

// Training allocates and frees large buffers every step; the system
// allocator returns them to the kernel each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const COMPARISON_CONFIG: &str = include_str!("../../../configs/acceptance.toml");

struct Outcome {
    id: u8,
    pass: bool,
    soft: bool,
    detail: String,
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Published metric tuples: (name, ER, F %, LE deg, LR %, SELD).
const TABLE: [(&str, f64, f64, f64, f64, f64); 6] = [
    ("2020 baseline", 0.75, 37.5, 23.3, 53.0, 0.494),
    ("2020 specialized", 0.79, 35.1, 22.3, 46.9, 0.52),
    ("2020 conditioned", 0.72, 47.9, 17.8, 55.9, 0.445),
    ("2021 baseline", 0.71, 36.24, 23.20, 47.34, 0.501),
    ("2021 specialized", 2.22, 21.7, 23.2, 54.4, 0.90),
    ("2021 conditioned", 0.64, 49.72, 19.16, 56.60, 0.420),
];

fn published_scores() -> Outcome {
    let mut detail = String::new();
    let mut pass = true;
    for (name, er, f, le, lr, seld) in TABLE {
        let got = compute_seld_score(er, f / 100.0, le, lr / 100.0);
        let ok = (got - seld).abs() <= 0.001;
        pass &= ok;
        let _ = write!(
            detail,
            "{name} {got:.4} vs {seld}{}; ",
            if ok { "" } else { " MISS" }
        );
    }
    Outcome {
        id: 1,
        pass,
        soft: false,
        detail,
    }
}

fn gradients() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..20u64 {
        let mut r = rng(9000 + seed);
        let (b, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let x = [
            {
                let (hh, ww) = (r.gen_range(3..6), r.gen_range(3..6));
                random_tensor(&mut r, &[b, cin, hh, ww], 1.0)
            },
            random_tensor(&mut r, &[cout, cin, 3, 3], 0.5),
            random_tensor(&mut r, &[cout], 0.5),
        ];
        record(
            "conv",
            gradient_error(&x, seed, |t, v| t.conv2d(v[0], v[1], v[2], (1, 1)).unwrap()),
        );

        let ch = r.gen_range(1..4);
        let x = [
            {
                let n = r.gen_range(2..4);
                random_tensor(&mut r, &[n, ch, 3, 3], 1.0)
            },
            random_tensor(&mut r, &[ch], 1.0),
            random_tensor(&mut r, &[ch], 1.0),
        ];
        record(
            "batch_norm",
            gradient_error(&x, seed, |t, v| {
                let mut s = RunningStats::new(ch);
                t.batch_norm(v[0], v[1], v[2], &mut s, true).unwrap()
            }),
        );

        let (din, h) = (r.gen_range(1..4), r.gen_range(1..4));
        let (n, steps) = (r.gen_range(1..3), r.gen_range(1..4));
        let mut x = vec![random_tensor(&mut r, &[n, steps, din], 1.0)];
        for _ in 0..2 {
            x.push(random_tensor(&mut r, &[3 * h, din], 0.6));
            x.push(random_tensor(&mut r, &[3 * h, h], 0.6));
            x.push(random_tensor(&mut r, &[3 * h], 0.3));
            x.push(random_tensor(&mut r, &[3 * h], 0.3));
        }
        record(
            "gru",
            gradient_error(&x, seed, |t, v| {
                let dir = |o: usize| GruParams {
                    w_ih: v[o],
                    w_hh: v[o + 1],
                    b_ih: v[o + 2],
                    b_hh: v[o + 3],
                };
                t.gru_bidirectional(v[0], dir(1), dir(5)).unwrap()
            }),
        );

        let (din, dout, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..4));
        let x = [
            random_tensor(&mut r, &[2, n, din], 1.0),
            random_tensor(&mut r, &[dout, din], 1.0),
            random_tensor(&mut r, &[dout], 1.0),
        ];
        record(
            "linear",
            gradient_error(&x, seed, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        );

        let x = [separated_tensor(&mut r, &[1, 2, 4, 6], 0.1)];
        record(
            "max_pool",
            gradient_error(&x, seed, |t, v| t.max_pool2d(v[0], (2, 3)).unwrap()),
        );

        let shape = [r.gen_range(1..3), r.gen_range(1..4), 2, 3];
        let x = [
            random_tensor(&mut r, &shape, 1.0),
            random_tensor(&mut r, &shape[..2], 1.0),
            random_tensor(&mut r, &shape[..2], 1.0),
        ];
        record(
            "film",
            gradient_error(&x, seed, |t, v| t.film(v[0], v[1], v[2]).unwrap()),
        );

        let x = [random_tensor(&mut r, &[3, 4], 2.0)];
        record("tanh", gradient_error(&x, seed, |t, v| t.tanh(v[0])));

        let x = [
            random_tensor(&mut r, &[2, 3, 3], 1.0),
            random_tensor(&mut r, &[2, 3, 3], 1.0),
        ];
        record(
            "mse",
            gradient_error(&x, seed, |t, v| t.mse_loss(v[0], v[1]).unwrap()),
        );
    }
    let pass = worst.iter().all(|w| w.1 < GRAD_REL_TOL);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        id: 2,
        pass,
        soft: false,
        detail: format!(
            "20 instances each, worst relative error: {detail} (tol {GRAD_REL_TOL:.0e})"
        ),
    }
}

fn accdoa_round_trip() -> Outcome {
    let mut r = rng(9100);
    let (frames, classes) = (30, 6);
    let mut identity = 0;
    let mut monotone = true;
    for _ in 0..1000 {
        let mut list = EventList::new();
        for f in 0..frames {
            for c in 0..classes {
                if r.gen_bool(0.3) {
                    let (az, el) = random_dir(&mut r);
                    list.push(EventRecord::new(f, c, az, el));
                }
            }
        }
        let a = encode(&list, frames, classes).unwrap().target;
        let b = encode(&decode(&a, 0.5), frames, classes).unwrap().target;
        if a.tensor().max_abs_diff(b.tensor()) < 1e-6 {
            identity += 1;
        }
        let mut pred = a.clone();
        for t in 0..frames {
            for c in 0..classes {
                let s = r.gen_range(0.0..1.2);
                let v = pred.vector(t, c);
                let v = if v == [0.0; 3] {
                    sph_to_cart(10.0, 0.0)
                } else {
                    v
                };
                pred.set_vector(t, c, [v[0] * s, v[1] * s, v[2] * s]);
            }
        }
        let counts: Vec<usize> = (0..=10)
            .map(|i| decode(&pred, i as f64 / 10.0).len())
            .collect();
        monotone &= counts.windows(2).all(|w| w[1] <= w[0]);
    }
    Outcome {
        id: 3,
        pass: identity == 1000 && monotone,
        soft: false,
        detail: format!("{identity}/1000 lists round-trip, decode monotone in tau: {monotone}"),
    }
}

fn metric_oracles() -> Outcome {
    let mut r = rng(9200);
    let mut agree = 0;
    for _ in 0..500 {
        let classes = r.gen_range(1..=3);
        let (mut refs, mut preds) = (EventList::new(), EventList::new());
        for c in 0..classes {
            let frames = r.gen_range(1..=3);
            for _ in 0..r.gen_range(0..=5) {
                let (az, el) = random_dir(&mut r);
                refs.push(rec(r.gen_range(0..frames), c, az, el));
            }
            for _ in 0..r.gen_range(0..=5) {
                let (az, el) = random_dir(&mut r);
                preds.push(rec(r.gen_range(0..frames), c, az, el));
            }
        }
        let m = match_events(&refs, &preds, 0);
        let ok = (0..classes).all(|c| {
            let rc: Vec<_> = refs.iter().filter(|e| e.class_id == c).copied().collect();
            let pc: Vec<_> = preds.iter().filter(|e| e.class_id == c).copied().collect();
            let (n, cost) = exhaustive(&rc, &pc);
            let got = m.classes.iter().find(|x| x.class_id == c);
            let (gn, gc) = got.map_or((0, 0.0), |g| {
                (g.pairs.len(), g.pairs.iter().map(|p| p.error_deg).sum())
            });
            gn == n && (gc - cost).abs() < 1e-6
        });
        agree += ok as usize;
    }
    let mut worst_rot: f64 = 0.0;
    for _ in 0..50 {
        let (refs, preds) = noisy_scene(&mut r, 40, 4);
        let q = rotation(&mut r);
        let a = evaluate_event_lists(&[(&refs, &preds)]).unwrap();
        let b = evaluate_event_lists(&[(&rotate(&refs, &q), &rotate(&preds, &q))]).unwrap();
        for (x, y) in metrics_tuple(&a).iter().zip(metrics_tuple(&b)) {
            worst_rot = worst_rot.max((x - y).abs());
        }
    }
    Outcome {
        id: 4,
        pass: agree == 500 && worst_rot < 1e-6,
        soft: false,
        detail: format!(
            "{agree}/500 segments equal exhaustive matching, rotation drift {worst_rot:.1e}"
        ),
    }
}

fn geometry_and_intensity() -> Outcome {
    let mut r = rng(9300);
    let mut worst_rt: f64 = 0.0;
    for _ in 0..1000 {
        let (az, el) = (r.gen_range(-179.9..180.0), r.gen_range(-89.0..89.0));
        let (a2, e2) = cart_to_sph(sph_to_cart(az, el));
        let daz = (a2 - az + 540.0).rem_euclid(360.0) - 180.0;
        worst_rt = worst_rt.max(daz.abs()).max((e2 - el).abs());
    }

    // Plane wave rendered clean and in diffuse noise. Each mel bin's SNR is
    // measured against the clean rendering. Noiseless: every energetic bin is
    // checked. Noisy: per frame, the direction of the mean intensity over the
    // bins at >= 10 dB is checked. Single noisy bins are reported only; at
    // 10 dB their perpendicular noise term alone is about 0.18 of the signal.
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let fb = MelFilterbank::new(64, 1024, 24_000.0, 50.0, 12_000.0).unwrap();
    let mel_power = |x: &[f32]| {
        let s = stft(x, 1024, 480).unwrap();
        seldkit::features::mel_spectrogram(&s, &fb)
    };
    let (mut clean_bins, mut worst_clean): (usize, f64) = (0, 0.0);
    let (mut noisy_frames, mut worst_frame): (usize, f64) = (0, 0.0);
    let (mut noisy_bins, mut worst_bin): (usize, f64) = (0, 0.0);
    for (i, (az, el)) in [(0.0, 0.0), (60.0, 20.0), (-135.0, -30.0), (170.0, 45.0)]
        .into_iter()
        .enumerate()
    {
        let make = |snr_db: f64| {
            let spec = SceneSpec {
                duration_s: 2.0,
                snr_db,
                ..SceneSpec::default()
            };
            let src = SourceEvent::new(SourceKind::Target(2 + i), 2, Trajectory::fixed(az, el, 16));
            render_sources(&spec, &[src], &mut seeded_rng(40 + i as u64))
                .unwrap()
                .clip
        };
        let (noisy, clean) = (make(20.0), make(f64::INFINITY));
        let noise: Vec<f32> = noisy
            .w()
            .iter()
            .zip(clean.w())
            .map(|(a, b)| a - b)
            .collect();
        let (ps, pn) = (mel_power(clean.w()), mel_power(&noise));
        let peak = ps.iter().cloned().fold(0.0, f64::max);
        let truth = sph_to_cart(az, el);
        let fc = ex.extract_raw(&clean).unwrap();
        let fnz = ex.extract_raw(&noisy).unwrap();
        let (bands, frames) = (fnz.bands(), fnz.frames());
        let (dc, dn) = (fc.data.data(), fnz.data.data());
        let at = |d: &[f32], c: usize, m: usize, t: usize| d[(c * bands + m) * frames + t] as f64;
        for t in 0..frames {
            if t * 480 < 4800 || t * 480 + 1024 > 43_200 {
                continue;
            }
            let mut sum = [0.0f64; 3];
            let mut used = 0;
            for m in 0..bands {
                let k = m * frames + t;
                if ps[k] > 1e-4 * peak {
                    let v = [at(dc, 4, m, t), at(dc, 5, m, t), at(dc, 6, m, t)];
                    worst_clean = worst_clean.max(angular_distance(v, truth).unwrap());
                    clean_bins += 1;
                }
                if 10.0 * (ps[k] / pn[k]).log10() < 10.0 {
                    continue;
                }
                let v = [at(dn, 4, m, t), at(dn, 5, m, t), at(dn, 6, m, t)];
                worst_bin = worst_bin.max(angular_distance(v, truth).unwrap());
                noisy_bins += 1;
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                used += 1;
            }
            if used > 0 {
                worst_frame = worst_frame.max(angular_distance(sum, truth).unwrap());
                noisy_frames += 1;
            }
        }
    }
    Outcome {
        id: 5,
        pass: worst_rt < 1e-4
            && worst_clean < 5.0
            && clean_bins > 100
            && worst_frame < 5.0
            && noisy_frames > 100,
        soft: false,
        detail: format!(
            "round-trip error {worst_rt:.1e} deg; noiseless worst {worst_clean:.3} deg over {clean_bins} energetic bins; \
             at >= 10 dB worst mel-aggregated frame {worst_frame:.2} deg over {noisy_frames} frames \
             (single bins, reported only: worst {worst_bin:.2} deg over {noisy_bins})"
        ),
    }
}

fn small_model(variant: Variant) -> ExperimentConfig {
    let mut cfg: ExperimentConfig = toml::from_str(COMPARISON_CONFIG).unwrap();
    cfg.model.variant = variant;
    cfg
}

fn film_identity() -> Outcome {
    let cfg = small_model(Variant::ClassConditioned);
    let mut r = rng(9400);
    let mut model = SeldModel::new(cfg.model.clone(), 5).unwrap();
    let x = random_tensor(&mut r, &[3, 7, 100, cfg.model.n_mels], 1.0);
    let base = model.predict_class(&x, 0).unwrap();
    let mut identical = true;
    for c in 1..cfg.model.num_classes {
        let p = model.predict_class(&x, c).unwrap();
        identical &= p
            .iter()
            .zip(&base)
            .all(|(a, b)| a.tensor().data() == b.tensor().data());
    }
    Outcome {
        id: 6,
        pass: identical,
        soft: false,
        detail: format!(
            "{} classes give bitwise identical outputs: {identical}",
            cfg.model.num_classes
        ),
    }
}

fn overfit_all_variants() -> (bool, String) {
    let mut cfg = small_model(Variant::AllClass);
    cfg.dataset.train_clips = 8;
    cfg.dataset.validation_clips = 1;
    cfg.dataset.test_clips = 1;
    let data = prepare_data(&cfg.dataset, &cfg.features, &cfg.model).unwrap();
    let classes = cfg.model.num_classes;
    let mut pass = true;
    let mut detail = String::new();
    for v in Variant::ALL {
        let mut model = SeldModel::new(small_model(v).model, 11).unwrap();
        let items: Vec<Item> = (0..8)
            .map(|clip| Item {
                clip,
                class: match v {
                    Variant::AllClass => None,
                    Variant::ClassSpecific => Some(1),
                    Variant::ClassConditioned => Some(clip % classes),
                },
            })
            .collect();
        let net = &mut model.nets_mut()[if v == Variant::ClassSpecific { 1 } else { 0 }];
        let losses = overfit_batch(
            net,
            data.train.clips(),
            &items,
            v,
            500,
            AdamConfig::default(),
            0,
        )
        .unwrap();
        let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        pass &= best < 1e-3;
        let _ = write!(detail, "{v} {best:.1e}; ");
    }
    (pass, detail)
}

fn training_sanity(table: &ComparisonTable) -> Outcome {
    let (overfit, detail) = overfit_all_variants();
    let nets: Vec<_> = table.runs.iter().flat_map(|r| &r.nets).collect();
    let decreased = nets
        .iter()
        .filter(|n| n.final_loss < n.initial_loss)
        .count();
    Outcome {
        id: 7,
        pass: overfit && decreased == nets.len(),
        soft: false,
        detail: format!(
            "single-batch MSE after 500 steps: {detail}final < initial loss for {decreased}/{} trained networks",
            nets.len()
        ),
    }
}

fn main_claim(table: &ComparisonTable) -> Outcome {
    let seld = |on: bool, v: Variant| table.row(on, v).unwrap().seld_score;
    let (all_on, cond_on) = (
        seld(true, Variant::AllClass),
        seld(true, Variant::ClassConditioned),
    );
    let (m_on, m_off) = (
        table.conditioning_margin(true).unwrap(),
        table.conditioning_margin(false).unwrap(),
    );
    Outcome {
        id: 8,
        pass: cond_on <= all_on && m_on >= m_off,
        soft: false,
        detail: format!(
            "interference on: conditioned {cond_on:.4} vs all-class {all_on:.4} ({:.1}% relative); \
             margin on {m_on:.4} vs off {m_off:.4} ({:.1}% relative); seeds {:?}",
            100.0 * m_on / all_on,
            100.0 * m_off / seld(false, Variant::AllClass),
            table.row(true, Variant::AllClass).unwrap().seeds
        ),
    }
}

fn specialist_insertions(table: &ComparisonTable) -> Outcome {
    // Per-class insertion frames summed over classes and seeds, as in the
    // per-class S/D/I table; the segment-level count is reported alongside.
    let per_class = |v: Variant| {
        table
            .row(true, v)
            .unwrap()
            .per_class_sdi
            .iter()
            .map(|s| s[2])
            .sum::<usize>()
    };
    let segment = |v: Variant| table.row(true, v).unwrap().insertions;
    let (spec, cond, all) = (
        per_class(Variant::ClassSpecific),
        per_class(Variant::ClassConditioned),
        per_class(Variant::AllClass),
    );
    let pass = spec > cond;
    let mut detail = format!(
        "interference on, per-class insertion frames over seeds: specialists {spec}, conditioned {cond}, \
         all-class {all} (segment level {}, {}, {})",
        segment(Variant::ClassSpecific),
        segment(Variant::ClassConditioned),
        segment(Variant::AllClass)
    );
    if !pass {
        let path = artifact_dir().join("specialist_insertions_warning.txt");
        let mut text = format!(
            "WARNING: specialist insertions did not exceed the conditioned model's.\n{detail}\n"
        );
        for r in &table.rows {
            let _ = writeln!(
                text,
                "{} {} S/D/I per class {:?}",
                r.interference, r.variant, r.per_class_sdi
            );
        }
        fs::write(&path, text).unwrap();
        let _ = write!(detail, "; warning written to {}", path.display());
    }
    Outcome {
        id: 9,
        pass,
        soft: true,
        detail,
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        (o, start.elapsed().as_secs_f64())
    };
    outcomes.push(timed(&published_scores));
    outcomes.push(timed(&gradients));
    outcomes.push(timed(&accdoa_round_trip));
    outcomes.push(timed(&metric_oracles));
    outcomes.push(timed(&geometry_and_intensity));
    outcomes.push(timed(&film_identity));

    let start = Instant::now();
    let cfg: ExperimentConfig = toml::from_str(COMPARISON_CONFIG).unwrap();
    let table = run_comparison(&cfg).unwrap();
    let compare_s = start.elapsed().as_secs_f64();
    let dir = artifact_dir();
    fs::write(dir.join("comparison.toml"), table.to_toml().unwrap()).unwrap();
    table.write_csvs(&dir).unwrap();
    println!("{}", table.to_text());

    outcomes.push(timed(&|| training_sanity(&table)));
    outcomes.push((main_claim(&table), compare_s));
    outcomes.push((specialist_insertions(&table), 0.0));

    let mut hard_failures = Vec::new();
    for (o, secs) in &outcomes {
        let status = match (o.pass, o.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        println!("criterion {}: {status} ({secs:.1} s) {}", o.id, o.detail);
        if !o.pass && !o.soft {
            hard_failures.push(o.id);
        }
    }
    println!("artifacts in {}", dir.display());
    assert!(
        hard_failures.is_empty(),
        "failed criteria: {hard_failures:?}"
    );
}
