//! Model input features: four log-mel spectrograms and three mel-band
//! acoustic intensity maps computed from FOA audio.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::scene::FoaClip;
use crate::tensor::{Scalar, Tensor};

pub const LOG_FLOOR: f64 = 1e-8;
pub const INTENSITY_EPS: f64 = 1e-8;
pub const NUM_FEATURE_CHANNELS: usize = 7;

/// Frames produced by a framed transform with no padding.
pub fn num_frames(samples: usize, win: usize, hop: usize) -> usize {
    if samples < win {
        0
    } else {
        (samples - win) / hop + 1
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, frame-major: `bin(t, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn bin(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }
}

/// Reusable short-time Fourier transform.
#[derive(Clone)]
pub struct Stft {
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("win", &self.win)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Result<Self> {
        if !win.is_power_of_two() || win < 2 {
            return Err(Error::InvalidArgument(format!(
                "window length {win} is not a power of two"
            )));
        }
        if hop == 0 {
            return Err(Error::InvalidArgument("hop must be positive".into()));
        }
        Ok(Self {
            win,
            hop,
            window: hann(win),
            fft: FftPlanner::new().plan_fft_forward(win),
        })
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn process(&self, signal: &[f32]) -> Result<Spectrogram> {
        if signal.len() < self.win {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than the {}-sample window",
                signal.len(),
                self.win
            )));
        }
        let frames = num_frames(signal.len(), self.win, self.hop);
        let bins = self.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let seg = &signal[t * self.hop..t * self.hop + self.win];
            for (b, (&s, &w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *b = Complex64::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }
}

pub fn stft(signal: &[f32], win: usize, hop: usize) -> Result<Spectrogram> {
    Stft::new(win, hop)?.process(signal)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank; each nonzero row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub centers_hz: Vec<f64>,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, win: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate / 2.0;
        if fmax > nyquist {
            return Err(Error::InvalidArgument(format!(
                "fmax {fmax} Hz exceeds Nyquist {nyquist} Hz"
            )));
        }
        if !(0.0 <= fmin && fmin < fmax) || n_mels == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid mel range: {n_mels} bands over [{fmin}, {fmax}] Hz"
            )));
        }
        let n_bins = win / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * sample_rate / win as f64;
                *w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            }
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|w| *w /= s);
            }
        }
        Ok(Self {
            n_mels,
            n_bins,
            centers_hz: edges[1..=n_mels].to_vec(),
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `values` is frame-major `[T, bins]`; result is band-major `[n_mels, T]`.
    pub fn apply(&self, values: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels * frames];
        for m in 0..self.n_mels {
            let row = self.row(m);
            let nz: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(k, w)| (k, *w))
                .collect();
            for t in 0..frames {
                let v = &values[t * self.n_bins..(t + 1) * self.n_bins];
                out[m * frames + t] = nz.iter().map(|&(k, w)| w * v[k]).sum();
            }
        }
        out
    }
}

/// Mel-band power, `[n_mels, T]`.
pub fn mel_spectrogram(spec: &Spectrogram, fb: &MelFilterbank) -> Vec<f64> {
    let power: Vec<f64> = spec.data.iter().map(|c| c.norm_sqr()).collect();
    fb.apply(&power, spec.frames)
}

pub fn log_mel_spectrogram(spec: &Spectrogram, fb: &MelFilterbank) -> Vec<f64> {
    mel_spectrogram(spec, fb)
        .into_iter()
        .map(|v| (v + LOG_FLOOR).ln())
        .collect()
}

/// Spectrograms of the four FOA channels.
#[derive(Debug, Clone)]
pub struct FoaSpectra {
    pub w: Spectrogram,
    pub x: Spectrogram,
    pub y: Spectrogram,
    pub z: Spectrogram,
}

/// `[3, n_mels, T]` normalized active intensity in x, y, z order.
///
/// Per bin the intensity is `Re{conj(W) [X, Y, Z]}`; numerator and the
/// energy `|W|^2 + (|X|^2 + |Y|^2 + |Z|^2) / 3` are both mel-aggregated
/// before dividing. Every component lies in `[-1, 1]`.
pub fn intensity_vectors(s: &FoaSpectra, fb: &MelFilterbank) -> Vec<f64> {
    let frames = s.w.frames;
    let n = s.w.data.len();
    let mut energy = Vec::with_capacity(n);
    let mut comps = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for i in 0..n {
        let w = s.w.data[i];
        let v = [s.x.data[i], s.y.data[i], s.z.data[i]];
        for d in 0..3 {
            comps[d].push((w.conj() * v[d]).re);
        }
        energy.push(w.norm_sqr() + (v[0].norm_sqr() + v[1].norm_sqr() + v[2].norm_sqr()) / 3.0);
    }
    let e = fb.apply(&energy, frames);
    let mut out = Vec::with_capacity(3 * e.len());
    for c in &comps {
        let a = fb.apply(c, frames);
        out.extend(a.iter().zip(&e).map(|(a, e)| a / (e + INTENSITY_EPS)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            win: 1024,
            hop: 480,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 12_000.0,
        }
    }
}

/// `[7, n_mels, T]`: log-mel W, Y, Z, X then intensity x, y, z.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Tensor,
    pub frame_hop_s: f64,
}

impl FeatureTensor {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    /// `[7, T, n_mels]`, the layout the networks consume.
    pub fn time_major(&self) -> Tensor {
        self.data.permute(&[0, 2, 1]).expect("rank-3 features")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        c.metadata.insert("kind".into(), "features".into());
        c.metadata
            .insert("frame_hop_s".into(), format!("{:?}", self.frame_hop_s));
        c.insert("features", self.data.clone());
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Container::load(path)?;
        let frame_hop_s = c
            .metadata
            .get("frame_hop_s")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("feature cache lacks frame_hop_s".into()))?;
        let data = c
            .take("features")
            .ok_or_else(|| Error::Checkpoint("feature cache lacks the features tensor".into()))?;
        if data.ndim() != 3 {
            return Err(Error::Checkpoint(format!(
                "feature tensor has shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data, frame_hop_s })
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    stft: Stft,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let stft = Stft::new(config.win, config.hop)?;
        let filterbank = MelFilterbank::new(
            config.n_mels,
            config.win,
            config.sample_rate as f64,
            config.fmin_hz,
            config.fmax_hz,
        )?;
        Ok(Self {
            config,
            stft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        num_frames(samples, self.config.win, self.config.hop)
    }

    /// Unstandardized features from ACN-ordered channels (W, Y, Z, X).
    pub fn extract_channels(&self, channels: &[&[f32]], sample_rate: u32) -> Result<FeatureTensor> {
        if channels.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "expected 4 FOA channels, got {}",
                channels.len()
            )));
        }
        if sample_rate != self.config.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "clip sample rate {sample_rate} Hz differs from configured {} Hz",
                self.config.sample_rate
            )));
        }
        let spectra: Vec<Spectrogram> = channels
            .iter()
            .map(|c| self.stft.process(c))
            .collect::<Result<_>>()?;
        let frames = spectra[0].frames;
        let mels = self.config.n_mels;
        let mut data: Vec<Scalar> = Vec::with_capacity(NUM_FEATURE_CHANNELS * mels * frames);
        for s in &spectra {
            data.extend(
                log_mel_spectrogram(s, &self.filterbank)
                    .into_iter()
                    .map(|v| v as Scalar),
            );
        }
        let [w, y, z, x]: [Spectrogram; 4] = spectra.try_into().expect("four spectrograms");
        let foa = FoaSpectra { w, x, y, z };
        data.extend(
            intensity_vectors(&foa, &self.filterbank)
                .into_iter()
                .map(|v| v as Scalar),
        );
        Ok(FeatureTensor {
            data: Tensor::new([NUM_FEATURE_CHANNELS, mels, frames], data)?,
            frame_hop_s: self.config.hop as f64 / self.config.sample_rate as f64,
        })
    }

    pub fn extract_raw(&self, clip: &FoaClip) -> Result<FeatureTensor> {
        let ch: Vec<&[f32]> = clip.channels.iter().map(|c| c.as_slice()).collect();
        self.extract_channels(&ch, clip.sample_rate)
    }

    pub fn extract(&self, clip: &FoaClip, standardizer: &Standardizer) -> Result<FeatureTensor> {
        let mut f = self.extract_raw(clip)?;
        standardizer.apply(&mut f)?;
        Ok(f)
    }
}

/// Per (channel, band) mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub channels: usize,
    pub bands: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over every frame of every tensor given; pass only the
    /// training split.
    pub fn fit(features: &[FeatureTensor]) -> Result<Self> {
        let first = features.first().ok_or_else(|| {
            Error::InvalidArgument("cannot fit a standardizer on no clips".into())
        })?;
        let (c, b) = (first.channels(), first.bands());
        let mut sum = vec![0.0; c * b];
        let mut sq = vec![0.0; c * b];
        let mut count = 0usize;
        for f in features {
            if f.channels() != c || f.bands() != b {
                return Err(Error::Shape(format!(
                    "feature shape {:?} differs from {:?}",
                    f.data.shape(),
                    first.data.shape()
                )));
            }
            let t = f.frames();
            for (cb, row) in f.data.data().chunks(t).enumerate() {
                for &v in row {
                    sum[cb] += v as f64;
                    sq[cb] += v as f64 * v as f64;
                }
            }
            count += t;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no frames to fit".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n - m * m).max(0.0).sqrt();
                if v > 1e-8 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            channels: c,
            bands: b,
            mean,
            std,
        })
    }

    pub fn identity(channels: usize, bands: usize) -> Self {
        Self {
            channels,
            bands,
            mean: vec![0.0; channels * bands],
            std: vec![1.0; channels * bands],
        }
    }

    pub fn apply(&self, f: &mut FeatureTensor) -> Result<()> {
        if f.channels() != self.channels || f.bands() != self.bands {
            return Err(Error::Shape(format!(
                "standardizer fitted for {}x{}, features are {:?}",
                self.channels,
                self.bands,
                f.data.shape()
            )));
        }
        let t = f.frames();
        if t == 0 {
            return Ok(());
        }
        for (cb, row) in f.data.data_mut().chunks_mut(t).enumerate() {
            let (m, s) = (self.mean[cb], self.std[cb]);
            for v in row {
                *v = ((*v as f64 - m) / s) as Scalar;
            }
        }
        Ok(())
    }
}
