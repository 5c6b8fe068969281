use proptest::prelude::*;
use rand::Rng;
use seldkit::features::{
    intensity_vectors, log_mel_spectrogram, num_frames, stft, FeatureConfig, FeatureExtractor,
    FeatureTensor, FoaSpectra, MelFilterbank, Standardizer,
};
use seldkit::geometry::{angular_distance, sph_to_cart};
use seldkit::scene::{
    render_scene, render_sources, seeded_rng, SceneSpec, SourceEvent, SourceKind, Trajectory,
};

mod support;

const SR: f64 = 24_000.0;

fn sine(freq: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SR).sin() as f32)
        .collect()
}

#[test]
fn bin_centred_sine_has_one_dominant_bin() {
    let k0 = 100;
    let x = sine(k0 as f64 * SR / 1024.0, 4096);
    let s = stft(&x, 1024, 480).unwrap();
    for t in 0..s.frames {
        let mag: Vec<f64> = s.frame(t).iter().map(|c| c.norm()).collect();
        let peak = (0..mag.len())
            .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
            .unwrap();
        assert_eq!(peak, k0);
        // Hann main lobe covers k0 +- 1; everything beyond is sidelobe floor.
        let floor = mag
            .iter()
            .enumerate()
            .filter(|(k, _)| k.abs_diff(k0) > 1)
            .map(|(_, m)| *m)
            .fold(0.0, f64::max);
        assert!(20.0 * (mag[k0] / floor).log10() >= 20.0);
    }
}

#[test]
fn parseval_holds_per_frame() {
    let mut rng = support::rng(3);
    let x: Vec<f32> = (0..8192).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let s = stft(&x, 1024, 480).unwrap();
    let w = seldkit::features::hann(1024);
    for t in 0..s.frames {
        let time: f64 = (0..1024)
            .map(|i| (x[t * 480 + i] as f64 * w[i]).powi(2))
            .sum();
        let f = s.frame(t);
        let mut freq = f[0].norm_sqr() + f[512].norm_sqr();
        freq += 2.0 * f[1..512].iter().map(|c| c.norm_sqr()).sum::<f64>();
        freq /= 1024.0;
        assert!(
            (time - freq).abs() <= 1e-3 * time,
            "frame {t}: {time} vs {freq}"
        );
    }
}

#[test]
fn tone_lands_in_nearest_band() {
    let fb = MelFilterbank::new(64, 1024, SR, 50.0, 12_000.0).unwrap();
    // Bands at least a few bins wide, tone at the band centre.
    for m in (16..62).step_by(3) {
        let f = fb.centers_hz[m];
        let s = stft(&sine(f, 4096), 1024, 480).unwrap();
        let lm = log_mel_spectrogram(&s, &fb);
        let band = (0..64)
            .max_by(|&a, &b| lm[a * s.frames].total_cmp(&lm[b * s.frames]))
            .unwrap();
        let nearest = (0..64)
            .min_by(|&a, &b| {
                (fb.centers_hz[a] - f)
                    .abs()
                    .total_cmp(&(fb.centers_hz[b] - f).abs())
            })
            .unwrap();
        assert_eq!(band, nearest, "tone {f:.1} Hz");
    }
}

#[test]
fn white_noise_fills_every_band() {
    let mut rng = support::rng(4);
    let x: Vec<f32> = (0..24_000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let fb = MelFilterbank::new(64, 1024, SR, 50.0, 12_000.0).unwrap();
    let s = stft(&x, 1024, 480).unwrap();
    let mel = seldkit::features::mel_spectrogram(&s, &fb);
    assert!(mel.iter().all(|&v| v > 0.0));
}

fn plane_wave(az: f64, el: f64, snr_db: f64) -> seldkit::scene::FoaClip {
    let spec = SceneSpec {
        duration_s: 2.0,
        snr_db,
        ..SceneSpec::default()
    };
    let src = SourceEvent::new(SourceKind::Target(3), 2, Trajectory::fixed(az, el, 16));
    render_sources(&spec, &[src], &mut seeded_rng(9))
        .unwrap()
        .clip
}

#[test]
fn plane_wave_intensity_points_at_source() {
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    for (az, el) in [(0.0, 0.0), (60.0, 20.0), (-135.0, -30.0), (170.0, 45.0)] {
        let clip = plane_wave(az, el, 20.0);
        let f = ex.extract_raw(&clip).unwrap();
        let (bands, frames) = (f.bands(), f.frames());
        let d = f.data.data();
        let at = |c: usize, m: usize, t: usize| d[(c * bands + m) * frames + t] as f64;
        let truth = sph_to_cart(az, el);
        // Frames fully inside the event: label frames 2..18 span 0.2 s..1.8 s,
        // i.e. STFT frames starting at >= 0.2 s and ending before 1.8 s.
        let mut checked = 0;
        for t in 0..frames {
            let (start, end) = (t * 480, t * 480 + 1024);
            if start < 4800 || end > 43_200 {
                continue;
            }
            let mut v = [0.0; 3];
            for m in 0..bands {
                let weight = at(0, m, t).exp();
                for k in 0..3 {
                    v[k] += weight * at(4 + k, m, t);
                }
            }
            let err = angular_distance(v, truth).unwrap();
            assert!(err < 5.0, "az {az} el {el} frame {t}: {err:.2} deg");
            checked += 1;
        }
        assert!(checked > 50);
    }
}

fn spectra(clip: &seldkit::scene::FoaClip) -> FoaSpectra {
    let s = |c: &[f32]| stft(c, 1024, 480).unwrap();
    FoaSpectra {
        w: s(clip.w()),
        x: s(clip.x()),
        y: s(clip.y()),
        z: s(clip.z()),
    }
}

#[test]
fn negating_x_flips_first_intensity_channel() {
    let fb = MelFilterbank::new(64, 1024, SR, 50.0, 12_000.0).unwrap();
    let clip = render_scene(&SceneSpec {
        duration_s: 1.0,
        seed: 2,
        ..SceneSpec::default()
    })
    .unwrap();
    let a = spectra(&clip);
    let mut b = a.clone();
    b.x.data.iter_mut().for_each(|c| *c = -*c);
    let (ia, ib) = (intensity_vectors(&a, &fb), intensity_vectors(&b, &fb));
    let n = ia.len() / 3;
    for i in 0..n {
        assert_eq!(ib[i], -ia[i]);
        assert_eq!(ib[n + i], ia[n + i]);
        assert_eq!(ib[2 * n + i], ia[2 * n + i]);
    }
}

#[test]
fn ten_second_clip_has_498_frames() {
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let clip = render_scene(&SceneSpec {
        seed: 1,
        ..SceneSpec::default()
    })
    .unwrap();
    assert_eq!(clip.num_samples(), 240_000);
    let f = ex.extract_raw(&clip).unwrap();
    let expected = num_frames(240_000, 1024, 480);
    assert_eq!(expected, (240_000 - 1024) / 480 + 1);
    assert_eq!(f.data.shape(), &[7, 64, expected]);
    assert_eq!(f.data, ex.extract_raw(&clip.clone()).unwrap().data);
}

#[test]
fn standardized_training_channels_are_unit_scaled() {
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let clips: Vec<FeatureTensor> = (0..6)
        .map(|s| {
            let spec = SceneSpec {
                duration_s: 4.0,
                seed: 50 + s,
                interference_enabled: true,
                ..SceneSpec::default()
            };
            ex.extract_raw(&render_scene(&spec).unwrap()).unwrap()
        })
        .collect();
    let st = Standardizer::fit(&clips).unwrap();
    let mut std_clips = clips.clone();
    std_clips.iter_mut().for_each(|f| st.apply(f).unwrap());
    for c in 0..7 {
        let vals: Vec<f64> = std_clips
            .iter()
            .flat_map(|f| {
                let n = f.bands() * f.frames();
                f.data.data()[c * n..(c + 1) * n]
                    .iter()
                    .map(|&v| v as f64)
                    .collect::<Vec<_>>()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(
            mean.abs() <= 0.05 && (sd - 1.0).abs() <= 0.05,
            "channel {c}: mean {mean} std {sd}"
        );
    }
}

#[test]
fn feature_cache_round_trip() {
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let clip = render_scene(&SceneSpec {
        duration_s: 1.0,
        seed: 8,
        ..SceneSpec::default()
    })
    .unwrap();
    let f = ex.extract_raw(&clip).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.bin");
    f.save(&p).unwrap();
    assert_eq!(FeatureTensor::load(&p).unwrap(), f);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn raw_intensity_is_bounded(seed in 0u64..1000, snr in -10.0f64..40.0, interference: bool) {
        let spec = SceneSpec { duration_s: 1.0, seed, snr_db: snr, interference_enabled: interference, ..SceneSpec::default() };
        let clip = render_scene(&spec).unwrap();
        let fb = MelFilterbank::new(64, 1024, SR, 50.0, 12_000.0).unwrap();
        let i = intensity_vectors(&spectra(&clip), &fb);
        prop_assert!(i.iter().all(|v| v.abs() <= 1.0));
    }
}
