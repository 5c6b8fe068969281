//! Synthetic first-order ambisonic scenes.
//!
//! A scene is a set of band-limited noise sources, each panned with SN3D
//! first-order gains that are constant within a label frame, summed, and
//! mixed with diffuse Gaussian noise. Target sources produce ground truth;
//! interference sources only produce audio.
//!
//! Channels are stored in ACN order: W, Y, Z, X.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventList, EventRecord, LABEL_RATE_HZ};
use crate::geometry::{cart_to_sph, cross, dot, normalize, sph_to_cart, Vec3};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;
/// Lowest target-class centre frequency.
pub const BASE_FREQ_HZ: f64 = 400.0;
/// Ratio between adjacent class centre frequencies.
pub const FREQ_RATIO: f64 = 1.5;
/// Quality factor of each band-pass stage.
pub const BAND_Q: f64 = 3.0;
/// Upper bound on the drift speed of moving sources.
pub const MAX_DRIFT_DEG_PER_S: f64 = 20.0;

const PLACEMENT_RETRIES: usize = 20;
/// Whole-layout redraws before a generation error.
const SCENE_RETRIES: usize = 20;
const FILTER_WARMUP: usize = 2048;
const FADE_S: f64 = 0.01;

pub use crate::rng::{seeded_rng, Rng64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub duration_s: f64,
    pub sample_rate: u32,
    pub num_target_classes: usize,
    pub max_overlap: usize,
    pub interference_enabled: bool,
    pub interference_class_count: usize,
    /// Ratio of a unit-RMS event to the omnidirectional noise, in dB.
    /// `inf` renders without noise.
    pub snr_db: f64,
    pub seed: u64,
    /// Expected target events per second of audio.
    pub target_events_per_s: f64,
    /// Expected interference events per second of audio.
    pub interference_events_per_s: f64,
    /// Interference level relative to a target event, in dB.
    pub interference_gain_db: f64,
    pub min_event_s: f64,
    pub max_event_s: f64,
    pub moving_prob: f64,
    /// Initial elevations are drawn uniformly in `[-max, max]`.
    pub max_elevation_deg: f64,
    /// Allow two events of the same class to overlap in time.
    pub same_class_overlap: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            num_target_classes: 8,
            max_overlap: 3,
            interference_enabled: false,
            interference_class_count: 4,
            snr_db: 20.0,
            seed: 0,
            target_events_per_s: 0.6,
            interference_events_per_s: 0.4,
            interference_gain_db: 0.0,
            min_event_s: 1.0,
            max_event_s: 3.0,
            moving_prob: 0.5,
            max_elevation_deg: 45.0,
            same_class_overlap: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.max_overlap < 1 {
            return bad("max_overlap must be at least 1".into());
        }
        if self.num_target_classes < 1 {
            return bad("num_target_classes must be at least 1".into());
        }
        if self.sample_rate == 0 || !self.sample_rate.is_multiple_of(LABEL_RATE_HZ as u32) {
            return bad(format!(
                "sample_rate {} must be a positive multiple of the label rate",
                self.sample_rate
            ));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s {} must be positive", self.duration_s));
        }
        if !(self.min_event_s > 0.0 && self.min_event_s <= self.max_event_s) {
            return bad(format!(
                "event length range [{}, {}] is empty",
                self.min_event_s, self.max_event_s
            ));
        }
        if !(0.0..=1.0).contains(&self.moving_prob) {
            return bad(format!("moving_prob {} outside [0, 1]", self.moving_prob));
        }
        if !(0.0..=90.0).contains(&self.max_elevation_deg) {
            return bad(format!(
                "max_elevation_deg {} outside [0, 90]",
                self.max_elevation_deg
            ));
        }
        if self.target_events_per_s < 0.0 || self.interference_events_per_s < 0.0 {
            return bad("event densities must be non-negative".into());
        }
        if self.snr_db.is_nan() {
            return bad("snr_db is NaN".into());
        }
        if self.interference_enabled && self.interference_class_count == 0 {
            return bad("interference enabled with zero interference classes".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let top = SourceKind::Target(self.num_target_classes - 1).center_hz();
        if top * 1.25 >= nyquist {
            return bad(format!(
                "class {} centre {top:.0} Hz too close to Nyquist {nyquist:.0} Hz",
                self.num_target_classes - 1
            ));
        }
        if self.interference_enabled {
            let top = SourceKind::Interference(self.interference_class_count - 1).center_hz();
            if top * 1.25 >= nyquist {
                return bad(format!(
                    "interference centre {top:.0} Hz too close to Nyquist"
                ));
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Samples per label frame.
    pub fn label_hop(&self) -> usize {
        (self.sample_rate as f64 / LABEL_RATE_HZ) as usize
    }

    pub fn num_label_frames(&self) -> usize {
        self.num_samples().div_ceil(self.label_hop())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    Target(usize),
    Interference(usize),
}

impl SourceKind {
    /// Class id as written in ground truth; interference is `-1`.
    pub fn class_id(self) -> i64 {
        match self {
            SourceKind::Target(k) => k as i64,
            SourceKind::Interference(_) => -1,
        }
    }

    /// Target bands sit at `400 * 1.5^k`; interference bands halfway between
    /// them on a log scale.
    pub fn center_hz(self) -> f64 {
        match self {
            SourceKind::Target(k) => BASE_FREQ_HZ * FREQ_RATIO.powf(k as f64),
            SourceKind::Interference(j) => BASE_FREQ_HZ * FREQ_RATIO.powf(j as f64 + 0.5),
        }
    }

    pub fn am_rate_hz(self) -> f64 {
        match self {
            SourceKind::Target(k) => 1.5 + 0.75 * k as f64,
            SourceKind::Interference(j) => 1.875 + 0.75 * j as f64,
        }
    }
}

/// Second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Band-pass with 0 dB peak gain at `center_hz`.
    pub fn bandpass(center_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [1.0, -2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y =
                self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[1] * y1 - self.a[2] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// Spectral identity of a source class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub kind: SourceKind,
    pub center_hz: f64,
    pub q: f64,
    pub am_rate_hz: f64,
    pub am_depth: f64,
    pub stages: usize,
}

impl ClassSignature {
    pub fn new(kind: SourceKind) -> Self {
        Self {
            kind,
            center_hz: kind.center_hz(),
            q: BAND_Q,
            am_rate_hz: kind.am_rate_hz(),
            am_depth: 0.5,
            stages: 2,
        }
    }

    /// The cascade applied to white noise; every stage is identical.
    pub fn filters(&self, sample_rate: f64) -> Vec<Biquad> {
        vec![Biquad::bandpass(self.center_hz, self.q, sample_rate); self.stages]
    }

    /// Draws `n` samples of this class with unit RMS. Noise realization and
    /// modulation phase come from `rng`.
    pub fn generate(&self, n: usize, sample_rate: f64, rng: &mut impl Rng) -> Vec<f64> {
        if n == 0 {
            return Vec::new();
        }
        let mut x: Vec<f64> = (0..n + FILTER_WARMUP)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        for f in self.filters(sample_rate) {
            f.run(&mut x);
        }
        let mut x = x.split_off(FILTER_WARMUP);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let fade = ((FADE_S * sample_rate) as usize).min(n / 2).max(1);
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / sample_rate;
            let mut g = 1.0 + self.am_depth * (2.0 * PI * self.am_rate_hz * t + phase).sin();
            let edge = i.min(n - 1 - i);
            if edge < fade {
                g *= edge as f64 / fade as f64;
            }
            *v *= g;
        }
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            x.iter_mut().for_each(|v| *v /= rms);
        }
        x
    }
}

/// Per-label-frame directions of one source, degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn fixed(azimuth_deg: f64, elevation_deg: f64, len: usize) -> Self {
        Self {
            frames: vec![(azimuth_deg, elevation_deg); len],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn doa(&self, i: usize) -> Vec3 {
        let (az, el) = self.frames[i];
        sph_to_cart(az, el)
    }
}

/// Static with probability `1 - moving_prob`, otherwise a constant-speed
/// great-circle arc at under 20 deg/s starting from a random direction.
pub fn sample_trajectory(
    rng: &mut impl Rng,
    duration_frames: usize,
    moving_prob: f64,
    max_elevation_deg: f64,
) -> Result<Trajectory> {
    if duration_frames == 0 {
        return Err(Error::InvalidArgument(
            "trajectory needs at least one frame".into(),
        ));
    }
    let az = rng.gen_range(-180.0..180.0);
    let el = if max_elevation_deg > 0.0 {
        rng.gen_range(-max_elevation_deg..=max_elevation_deg)
    } else {
        0.0
    };
    if rng.gen::<f64>() >= moving_prob {
        return Ok(Trajectory::fixed(az, el, duration_frames));
    }
    let start = sph_to_cart(az, el);
    // Random unit tangent at `start`.
    let tangent = loop {
        let r: Vec3 = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let c = cross(start, r);
        if let Some(t) = normalize(c) {
            break t;
        }
    };
    debug_assert!(dot(start, tangent).abs() < 1e-9);
    let speed = rng.gen_range(MAX_DRIFT_DEG_PER_S / 4.0..MAX_DRIFT_DEG_PER_S);
    let step = (speed / LABEL_RATE_HZ).to_radians();
    let frames = (0..duration_frames)
        .map(|i| {
            let th = step * i as f64;
            let (s, c) = th.sin_cos();
            cart_to_sph([0, 1, 2].map(|k| start[k] * c + tangent[k] * s))
        })
        .collect();
    Ok(Trajectory { frames })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEvent {
    pub kind: SourceKind,
    /// First active label frame.
    pub onset_frame: usize,
    /// One past the last active label frame.
    pub offset_frame: usize,
    pub trajectory: Trajectory,
    pub signature: ClassSignature,
    /// Linear amplitude applied to the unit-RMS signal.
    pub gain: f64,
}

impl SourceEvent {
    pub fn new(kind: SourceKind, onset_frame: usize, trajectory: Trajectory) -> Self {
        Self {
            kind,
            onset_frame,
            offset_frame: onset_frame + trajectory.len(),
            trajectory,
            signature: ClassSignature::new(kind),
            gain: 1.0,
        }
    }

    pub fn onset_s(&self) -> f64 {
        self.onset_frame as f64 / LABEL_RATE_HZ
    }

    pub fn offset_s(&self) -> f64 {
        self.offset_frame as f64 / LABEL_RATE_HZ
    }

    pub fn is_target(&self) -> bool {
        matches!(self.kind, SourceKind::Target(_))
    }
}

/// Four-channel audio in ACN order (W, Y, Z, X), SN3D.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    pub sample_rate: u32,
    pub channels: [Vec<f32>; 4],
    pub events: EventList,
}

impl FoaClip {
    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn w(&self) -> &[f32] {
        &self.channels[0]
    }

    pub fn y(&self) -> &[f32] {
        &self.channels[1]
    }

    pub fn z(&self) -> &[f32] {
        &self.channels[2]
    }

    pub fn x(&self) -> &[f32] {
        &self.channels[3]
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }
}

/// A rendered clip with the sources that produced it.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub clip: FoaClip,
    pub sources: Vec<SourceEvent>,
    /// Same-class frame collisions dropped from the ground truth.
    pub collisions: usize,
}

/// SN3D first-order gains in ACN order.
pub fn foa_gains(doa: Vec3) -> [f64; 4] {
    [1.0, doa[1], doa[2], doa[0]]
}

fn poisson_count(rng: &mut impl Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(mean)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0)
}

fn event_frames(spec: &SceneSpec, rng: &mut impl Rng, total: usize) -> usize {
    let len_s = rng.gen_range(spec.min_event_s..=spec.max_event_s);
    ((len_s * LABEL_RATE_HZ).round() as usize).clamp(1, total)
}

/// Draws the source list for `spec`: target events, packed so that no frame
/// has more than `max_overlap` of them, followed by interference events.
/// One attempt at laying out the target events; the inner error describes
/// an event that found no room.
fn place_targets(
    spec: &SceneSpec,
    rng: &mut impl Rng,
) -> Result<std::result::Result<Vec<SourceEvent>, String>> {
    let total = spec.num_label_frames();
    let mut occupancy = vec![0usize; total];
    let mut class_busy = vec![vec![false; total]; spec.num_target_classes];
    let mut sources = Vec::new();
    let n_target = poisson_count(rng, spec.target_events_per_s * spec.duration_s);
    for i in 0..n_target {
        let class = rng.gen_range(0..spec.num_target_classes);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let len = event_frames(spec, rng, total);
            let fits = |onset: &usize| {
                let span = *onset..*onset + len;
                occupancy[span.clone()]
                    .iter()
                    .all(|&o| o < spec.max_overlap)
                    && (spec.same_class_overlap || class_busy[class][span].iter().all(|b| !b))
            };
            let slots: Vec<usize> = (0..=total - len).filter(fits).collect();
            if !slots.is_empty() {
                placed = Some((slots[rng.gen_range(0..slots.len())], len));
                break;
            }
        }
        let Some((onset, len)) = placed else {
            return Ok(Err(format!(
                "no room for target event {i} of {n_target} after {PLACEMENT_RETRIES} length draws \
                 and {SCENE_RETRIES} layouts (max_overlap {})",
                spec.max_overlap
            )));
        };
        for f in onset..onset + len {
            occupancy[f] += 1;
            class_busy[class][f] = true;
        }
        let traj = sample_trajectory(rng, len, spec.moving_prob, spec.max_elevation_deg)?;
        sources.push(SourceEvent::new(SourceKind::Target(class), onset, traj));
    }
    Ok(Ok(sources))
}

pub fn sample_sources(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<SourceEvent>> {
    spec.validate()?;
    let total = spec.num_label_frames();
    let mut attempt = 0;
    let mut sources = loop {
        match place_targets(spec, rng)? {
            Ok(s) => break s,
            Err(msg) if attempt + 1 >= SCENE_RETRIES => return Err(Error::Generation(msg)),
            Err(_) => attempt += 1,
        }
    };

    // Interference has its own stream so that the target scene does not
    // depend on whether interference is enabled.
    let mut irng = seeded_rng(rng.gen());
    if spec.interference_enabled {
        let gain = 10f64.powf(spec.interference_gain_db / 20.0);
        let n = poisson_count(&mut irng, spec.interference_events_per_s * spec.duration_s);
        for _ in 0..n {
            let j = irng.gen_range(0..spec.interference_class_count);
            let len = event_frames(spec, &mut irng, total);
            let onset = irng.gen_range(0..=total - len);
            let traj = sample_trajectory(&mut irng, len, spec.moving_prob, spec.max_elevation_deg)?;
            let mut s = SourceEvent::new(SourceKind::Interference(j), onset, traj);
            s.gain = gain;
            sources.push(s);
        }
    }
    Ok(sources)
}

/// Ground truth from the target sources. When two sources of one class share
/// a frame, the earlier onset wins and the collision is counted.
pub fn ground_truth(sources: &[SourceEvent], num_frames: usize) -> (EventList, usize) {
    let mut order: Vec<&SourceEvent> = sources.iter().filter(|s| s.is_target()).collect();
    order.sort_by_key(|s| s.onset_frame);
    let mut taken = std::collections::HashSet::new();
    let mut records = Vec::new();
    let mut collisions = 0;
    for s in order {
        let SourceKind::Target(class) = s.kind else {
            unreachable!()
        };
        for (i, &(az, el)) in s.trajectory.frames.iter().enumerate() {
            let frame = s.onset_frame + i;
            if frame >= num_frames {
                break;
            }
            if taken.insert((frame, class)) {
                records.push(EventRecord::new(frame, class, az, el));
            } else {
                collisions += 1;
            }
        }
    }
    records.sort_by_key(|r| (r.frame, r.class_id));
    (records.into_iter().collect(), collisions)
}

/// Mixes the given sources. The noise stream is split off `rng` first and
/// source signals are drawn in list order, so appending sources leaves the
/// noise and the earlier signals unchanged.
pub fn render_sources(
    spec: &SceneSpec,
    sources: &[SourceEvent],
    rng: &mut impl Rng,
) -> Result<RenderedScene> {
    spec.validate()?;
    let n = spec.num_samples();
    let hop = spec.label_hop();
    let total = spec.num_label_frames();
    let sr = spec.sample_rate as f64;
    let mut noise_rng = seeded_rng(rng.gen());
    let mut mix = [vec![0f64; n], vec![0f64; n], vec![0f64; n], vec![0f64; n]];
    for s in sources {
        if s.offset_frame <= s.onset_frame || s.trajectory.len() != s.offset_frame - s.onset_frame {
            return Err(Error::InvalidArgument(format!(
                "source trajectory has {} frames for span {}..{}",
                s.trajectory.len(),
                s.onset_frame,
                s.offset_frame
            )));
        }
        if s.onset_frame >= total {
            continue;
        }
        let start = s.onset_frame * hop;
        let end = (s.offset_frame * hop).min(n);
        let sig = s.signature.generate(end - start, sr, rng);
        for (i, v) in sig.iter().enumerate() {
            let sample = start + i;
            let g = foa_gains(s.trajectory.doa(sample / hop - s.onset_frame));
            for ch in 0..4 {
                mix[ch][sample] += s.gain * g[ch] * v;
            }
        }
    }
    if spec.snr_db.is_finite() {
        let sigma = 10f64.powf(-spec.snr_db / 20.0);
        // Diffuse field: each first-order channel carries a third of W's power.
        let scale = [
            sigma,
            sigma / 3f64.sqrt(),
            sigma / 3f64.sqrt(),
            sigma / 3f64.sqrt(),
        ];
        for ch in 0..4 {
            for v in mix[ch].iter_mut() {
                let g: f64 = StandardNormal.sample(&mut noise_rng);
                *v += scale[ch] * g;
            }
        }
    }
    let (events, collisions) = ground_truth(sources, total);
    let channels = mix.map(|c| c.into_iter().map(|v| v as f32).collect());
    Ok(RenderedScene {
        clip: FoaClip {
            sample_rate: spec.sample_rate,
            channels,
            events,
        },
        sources: sources.to_vec(),
        collisions,
    })
}

/// Samples and renders a scene from `spec.seed`.
pub fn render_scene_detailed(spec: &SceneSpec) -> Result<RenderedScene> {
    let mut rng = seeded_rng(spec.seed);
    let sources = sample_sources(spec, &mut rng)?;
    render_sources(spec, &sources, &mut rng)
}

pub fn render_scene(spec: &SceneSpec) -> Result<FoaClip> {
    Ok(render_scene_detailed(spec)?.clip)
}

fn csv_path(wav: &Path) -> PathBuf {
    wav.with_extension("csv")
}

/// Writes `<path>` as 4-channel float WAV and the ground truth next to it
/// with a `.csv` extension.
pub fn write_clip(clip: &FoaClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for i in 0..clip.num_samples() {
        for ch in &clip.channels {
            w.write_sample(ch[i])?;
        }
    }
    w.finalize()?;
    clip.events.save_csv(csv_path(path))
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<FoaClip> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 4 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected 4 channels, found {}",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Float || spec.bits_per_sample != 32 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected 32-bit float samples",
            path.display()
        )));
    }
    let mut channels: [Vec<f32>; 4] = Default::default();
    for (i, s) in r.samples::<f32>().enumerate() {
        channels[i % 4].push(s?);
    }
    let events = EventList::load_csv(csv_path(path))?;
    Ok(FoaClip {
        sample_rate: spec.sample_rate,
        channels,
        events,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub train_clips: usize,
    pub validation_clips: usize,
    pub test_clips: usize,
    pub base_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train_clips: 240,
            validation_clips: 60,
            test_clips: 60,
            base_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn clips_in(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train_clips,
            SplitName::Validation => self.validation_clips,
            SplitName::Test => self.test_clips,
        }
    }

    /// Global clip indices of `split`; seeds are `base_seed + index`.
    pub fn indices(&self, split: SplitName) -> std::ops::Range<usize> {
        let start = match split {
            SplitName::Train => 0,
            SplitName::Validation => self.train_clips,
            SplitName::Test => self.train_clips + self.validation_clips,
        };
        start..start + self.clips_in(split)
    }

    pub fn clip_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: self.base_seed.wrapping_add(index as u64),
            ..self.scene.clone()
        }
    }

    pub fn render(&self, split: SplitName) -> Result<Vec<FoaClip>> {
        self.indices(split)
            .map(|i| render_scene(&self.clip_spec(i)))
            .collect()
    }
}

/// Lists clip paths per split, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub collisions: usize,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.toml";

    pub fn paths(&self, split: SplitName) -> &[PathBuf] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(root.as_ref().join(Self::FILE_NAME))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        fs::create_dir_all(root.as_ref())?;
        fs::write(root.as_ref().join(Self::FILE_NAME), toml::to_string(self)?)?;
        Ok(())
    }

    pub fn load_split(&self, root: impl AsRef<Path>, split: SplitName) -> Result<Vec<FoaClip>> {
        self.paths(split)
            .iter()
            .map(|p| read_clip(root.as_ref().join(p)))
            .collect()
    }
}

/// Renders every clip of `spec` under `root/<split>/` and writes the manifest.
pub fn generate_dataset(spec: &DatasetSpec, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut manifest = DatasetManifest {
        spec: spec.clone(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        collisions: 0,
    };
    for split in SplitName::ALL {
        for i in spec.indices(split) {
            let scene = render_scene_detailed(&spec.clip_spec(i))?;
            let rel = PathBuf::from(split.as_str()).join(format!("clip_{i:05}.wav"));
            write_clip(&scene.clip, root.join(&rel))?;
            manifest.collisions += scene.collisions;
            match split {
                SplitName::Train => manifest.train.push(rel),
                SplitName::Validation => manifest.validation.push(rel),
                SplitName::Test => manifest.test.push(rel),
            }
        }
    }
    manifest.save(root)?;
    Ok(manifest)
}
