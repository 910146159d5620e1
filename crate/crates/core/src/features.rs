//! Log-mel feature extraction and per-bin standardization.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::container::{fingerprint_bytes, ArtifactKind, Container, StoredTensor};
use crate::dataio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub window_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
    pub std_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { window_size: 2048, hop: 512, n_mels: 256, log_floor: 1e-10, std_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Self::Rectangular => vec![1.0; n],
            Self::Hann => {
                (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
            }
        }
    }
}

/// Power spectrogram, frames × bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn total_power(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Number of frames produced for a clip of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop)
}

/// Squared-magnitude STFT with centered reflection padding. Frame `t` is
/// centered on sample `t * hop`; there are `ceil(len / hop)` frames of
/// `window_size / 2 + 1` bins.
pub fn stft_power(clip: &AudioClip, window_size: usize, hop: usize, window: WindowKind) -> Result<Spectrogram> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    stft_with_plan(clip.samples(), window_size, hop, window, &fft)
}

fn stft_with_plan(
    samples: &[f64],
    window_size: usize,
    hop: usize,
    window: WindowKind,
    fft: &Arc<dyn Fft<f64>>,
) -> Result<Spectrogram> {
    if hop == 0 {
        return Err(Error::InvalidParameter("hop must be positive".into()));
    }
    if window_size < 2 {
        return Err(Error::InvalidParameter("window size must be at least 2".into()));
    }
    let pad = window_size / 2;
    let len = samples.len();
    if len <= pad {
        return Err(Error::InvalidParameter(format!(
            "clip of {len} samples is too short for reflection padding of {pad}"
        )));
    }
    let reflect = |i: isize| -> f64 {
        let n = len as isize;
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        samples[j as usize]
    };

    let coeffs = window.coefficients(window_size);
    let frames = frame_count(len, hop);
    let bins = window_size / 2 + 1;
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); window_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = (t * hop) as isize - pad as isize;
        for (i, (slot, w)) in buf.iter_mut().zip(&coeffs).enumerate() {
            *slot = Complex::new(w * reflect(start + i as isize), 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Spectrogram { frames, bins, values })
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank spanning 0 Hz to Nyquist.
///
/// Each weight is the mean height of the triangle over the frequency span of
/// the FFT bin (`[f_k - df/2, f_k + df/2]`). For wide triangles this matches
/// point sampling at bin centers; unlike point sampling it never leaves a
/// narrow low-frequency filter with an empty row.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
    /// Triangle corner frequencies (`n_mels + 2` points).
    pub corners_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, window_size: usize, sample_rate: u32) -> Result<Self> {
        let bins = window_size / 2 + 1;
        if n_mels == 0 || n_mels > bins {
            return Err(Error::InvalidParameter(format!("{n_mels} mel bands requested for {bins} FFT bins")));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let corners_hz: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let df = sample_rate as f64 / window_size as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (l, c, r) = (corners_hz[m], corners_hz[m + 1], corners_hz[m + 2]);
            for k in 0..bins {
                let f = k as f64 * df;
                let area = triangle_integral(l, c, r, f - df / 2.0, f + df / 2.0);
                weights[m * bins + k] = area / df;
            }
        }
        Ok(Self { n_mels, bins, weights, corners_hz })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }
}

/// Integral over [a, b] of the unit-peak triangle with corners (l, c, r).
fn triangle_integral(l: f64, c: f64, r: f64, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    let (x1, x2) = (a.max(l), b.min(c));
    if x2 > x1 {
        total += ((x2 - l).powi(2) - (x1 - l).powi(2)) / (2.0 * (c - l));
    }
    let (x1, x2) = (a.max(c), b.min(r));
    if x2 > x1 {
        total += ((r - x1).powi(2) - (r - x2).powi(2)) / (2.0 * (r - c));
    }
    total
}

/// Standardized (or raw log-mel) features, time frames × mel bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_frames: usize,
    pub n_mels: usize,
    pub values: Vec<f64>,
    /// Fingerprint of the statistics this matrix was standardized with.
    pub standardized_with: Option<u64>,
}

impl FeatureMatrix {
    pub fn new(n_frames: usize, n_mels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_frames * n_mels {
            return Err(Error::Shape(format!("{} values for a {n_frames}x{n_mels} feature matrix", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature matrix has non-finite entries".into()));
        }
        Ok(Self { n_frames, n_mels, values, standardized_with: None })
    }

    pub fn get(&self, t: usize, b: usize) -> f64 {
        self.values[t * self.n_mels + b]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Feature cache entry: a single little-endian f32 tensor.
    pub fn to_container(&self, fingerprint: u64) -> Container {
        let mut c = Container::new(ArtifactKind::Features, fingerprint);
        if let Some(fp) = self.standardized_with {
            c.meta = format!("{fp:016x}");
        }
        c.tensors.push(StoredTensor::f32(vec![self.n_frames, self.n_mels], self.values.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ArtifactKind::Features || c.tensors.len() != 1 || c.tensors[0].shape.len() != 2 {
            return Err(Error::CorruptFile("not a feature cache entry".into()));
        }
        let t = &c.tensors[0];
        let mut m = Self::new(t.shape[0], t.shape[1], t.data.clone())?;
        if !c.meta.is_empty() {
            m.standardized_with = Some(
                u64::from_str_radix(&c.meta, 16)
                    .map_err(|_| Error::CorruptFile("bad statistics fingerprint".into()))?,
            );
        }
        Ok(m)
    }

    /// Rounds values through f32, matching what the cache stores.
    pub fn quantized(mut self) -> Self {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
        self
    }
}

/// Maps a power spectrogram through `filterbank` and takes
/// `ln(energy + log_floor)`.
pub fn mel_project_log(spec: &Spectrogram, filterbank: &MelFilterbank, log_floor: f64) -> Result<FeatureMatrix> {
    if spec.bins != filterbank.bins {
        return Err(Error::InvalidParameter(format!(
            "spectrogram has {} bins, filterbank expects {}",
            spec.bins, filterbank.bins
        )));
    }
    if !(log_floor > 0.0) {
        return Err(Error::InvalidParameter("log floor must be positive".into()));
    }
    let mut values = Vec::with_capacity(spec.frames * filterbank.n_mels);
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        for m in 0..filterbank.n_mels {
            let e: f64 = filterbank.row(m).iter().zip(frame).map(|(w, p)| w * p).sum();
            values.push((e + log_floor).ln());
        }
    }
    FeatureMatrix::new(spec.frames, filterbank.n_mels, values)
}

/// Per-mel-bin mean and standard deviation pooled over every frame of the
/// training matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl StandardizationStats {
    pub fn n_mels(&self) -> usize {
        self.mean.len()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(16 * self.mean.len() + 8);
        for v in self.mean.iter().chain(&self.std).chain(std::iter::once(&self.epsilon)) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fingerprint_bytes(&bytes)
    }

    pub fn to_container(&self, fingerprint: u64) -> Container {
        let mut c = Container::new(ArtifactKind::Stats, fingerprint);
        c.meta = format!("{}", self.epsilon);
        c.tensors.push(StoredTensor::f64(vec![self.mean.len()], self.mean.clone()));
        c.tensors.push(StoredTensor::f64(vec![self.std.len()], self.std.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ArtifactKind::Stats || c.tensors.len() != 2 {
            return Err(Error::CorruptFile("not a statistics file".into()));
        }
        let epsilon = c.meta.parse().map_err(|_| Error::CorruptFile("bad epsilon in statistics file".into()))?;
        Ok(Self { mean: c.tensors[0].data.clone(), std: c.tensors[1].data.clone(), epsilon })
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        self.to_container(fingerprint).save(path)
    }
}

pub fn fit_standardization(train: &[FeatureMatrix], epsilon: f64) -> Result<StandardizationStats> {
    let first = train.first().ok_or_else(|| Error::EmptyDataset("no training features to standardize".into()))?;
    let n_mels = first.n_mels;
    if let Some(m) = train.iter().find(|m| m.n_mels != n_mels) {
        return Err(Error::InvalidParameter(format!("mixed mel counts {} and {}", n_mels, m.n_mels)));
    }
    let frames: usize = train.iter().map(|m| m.n_frames).sum();
    if frames == 0 {
        return Err(Error::EmptyDataset("training features have no frames".into()));
    }
    let mut mean = vec![0.0; n_mels];
    for m in train {
        for t in 0..m.n_frames {
            mean.iter_mut().zip(m.frame(t)).for_each(|(acc, v)| *acc += v);
        }
    }
    mean.iter_mut().for_each(|v| *v /= frames as f64);
    let mut var = vec![0.0; n_mels];
    for m in train {
        for t in 0..m.n_frames {
            for ((acc, v), mu) in var.iter_mut().zip(m.frame(t)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let std = var.iter().map(|v| (v / frames as f64).sqrt().max(epsilon)).collect();
    Ok(StandardizationStats { mean, std, epsilon })
}

pub fn standardize(m: &FeatureMatrix, stats: &StandardizationStats) -> Result<FeatureMatrix> {
    if m.n_mels != stats.n_mels() {
        return Err(Error::InvalidParameter(format!(
            "feature matrix has {} mel bins, statistics have {}",
            m.n_mels,
            stats.n_mels()
        )));
    }
    let mut values = m.values.clone();
    for row in values.chunks_exact_mut(m.n_mels) {
        for ((v, mu), sd) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - mu) / sd;
        }
    }
    let mut out = FeatureMatrix::new(m.n_frames, m.n_mels, values)?;
    out.standardized_with = Some(stats.fingerprint());
    Ok(out)
}

/// STFT plan and filterbank bundled for one sample rate.
pub struct FeaturePipeline {
    config: FeatureConfig,
    sample_rate: u32,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl FeaturePipeline {
    pub fn new(config: FeatureConfig, sample_rate: u32) -> Result<Self> {
        if config.hop == 0 {
            return Err(Error::InvalidParameter("hop must be positive".into()));
        }
        let filterbank = MelFilterbank::new(config.n_mels, config.window_size, sample_rate)?;
        let fft = FftPlanner::<f64>::new().plan_fft_forward(config.window_size);
        Ok(Self { config, sample_rate, filterbank, fft })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Unstandardized log-mel features of `clip`.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "clip sampled at {} Hz, pipeline configured for {} Hz",
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        let spec =
            stft_with_plan(clip.samples(), self.config.window_size, self.config.hop, WindowKind::Hann, &self.fft)?;
        mel_project_log(&spec, &self.filterbank, self.config.log_floor)
    }
}
