//! Audio ingestion, dataset manifests and splits, and the synthetic scene
//! generator used for desk-scale experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Mono audio with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("audio clip has no samples".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidInput(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }
}

/// Reads a mono PCM (or IEEE float) WAV file. Integer samples are divided by
/// 2^(bits - 1).
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let reader = hound::WavReader::new(file).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
    };
    if samples.is_empty() {
        return Err(Error::CorruptFile(format!("{}: no samples", path.display())));
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))?;
    Ok(())
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}: unsupported WAV encoding", path.display())),
        other => Error::CorruptFile(format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelKind {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneLabel {
    pub name: String,
    pub kind: LabelKind,
}

impl SceneLabel {
    pub fn is_unknown(&self) -> bool {
        self.kind == LabelKind::Unknown
    }
}

/// Maps scene names to label kinds. Known classes take indices `0..K` in the
/// listed order; every other name is unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    known: Vec<String>,
}

impl LabelSet {
    pub fn new(known: Vec<String>) -> Result<Self> {
        if known.is_empty() {
            return Err(Error::InvalidConfig("at least one known class is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &known {
            if !seen.insert(name) {
                return Err(Error::InvalidConfig(format!("duplicate known class `{name}`")));
            }
        }
        Ok(Self { known })
    }

    pub fn num_known(&self) -> usize {
        self.known.len()
    }

    pub fn known_names(&self) -> &[String] {
        &self.known
    }

    pub fn resolve(&self, name: &str) -> SceneLabel {
        let kind = match self.known.iter().position(|k| k == name) {
            Some(i) => LabelKind::Known(i),
            None => LabelKind::Unknown,
        };
        SceneLabel { name: name.to_string(), kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "validation" | "val" => Some(Self::Validation),
            "test" | "evaluate" => Some(Self::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

impl ManifestEntry {
    /// Identifier derived from the file name without extension.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.to_string_lossy().into_owned())
    }
}

/// Clip list in the DCASE meta convention: tab-separated `path`, `scene label`
/// and an optional `split` column (defaults to train).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if lineno == 0 && matches!(cols[0], "filename" | "path") {
                continue;
            }
            if cols.len() < 2 || cols[1].is_empty() {
                return Err(Error::InvalidInput(format!(
                    "manifest line {}: expected `path<TAB>label[<TAB>split]`",
                    lineno + 1
                )));
            }
            let split = match cols.get(2) {
                None => Split::Train,
                Some(s) => Split::parse(s)
                    .ok_or_else(|| Error::InvalidInput(format!("manifest line {}: unknown split `{s}`", lineno + 1)))?,
            };
            entries.push(ManifestEntry { path: PathBuf::from(cols[0]), label: cols[1].to_string(), split });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("filename\tscene_label\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.label, e.split));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Per-label counts within one split.
    pub fn class_counts(&self, split: Split) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            *counts.entry(e.label.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Moves a stratified `tuning_fraction` of the training entries into the
    /// validation split.
    ///
    /// Per-class quotas use largest-remainder rounding, so every class gets
    /// within one example of `fraction * count` and the global total equals
    /// `round(fraction * n_train)`. Which examples move is drawn from a
    /// generator seeded with `seed`.
    pub fn stratified_split(&self, tuning_fraction: f64, seed: u64) -> Result<Self> {
        if !(tuning_fraction > 0.0 && tuning_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!("tuning fraction {tuning_fraction} must lie in (0, 1)")));
        }
        let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.split == Split::Train {
                by_class.entry(e.label.as_str()).or_default().push(i);
            }
        }
        let n_train: usize = by_class.values().map(Vec::len).sum();
        if n_train == 0 {
            return Err(Error::EmptyDataset("no training entries to split".into()));
        }

        let target = (tuning_fraction * n_train as f64).round() as usize;
        let mut quotas: Vec<(usize, f64)> = by_class
            .values()
            .map(|idx| {
                let exact = tuning_fraction * idx.len() as f64;
                (exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = quotas.iter().map(|q| q.0).sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
        for &c in order.iter().take(target.saturating_sub(assigned)) {
            quotas[c].0 += 1;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for (indices, (quota, _)) in by_class.values().zip(&quotas) {
            let mut shuffled = indices.clone();
            shuffled.shuffle(&mut rng);
            for &i in shuffled.iter().take(*quota) {
                out.entries[i].split = Split::Validation;
            }
        }
        Ok(out)
    }
}

/// Fails with `EmptyClass` when one of `classes` has no entry in `split`.
pub fn ensure_classes_present(manifest: &DatasetManifest, classes: &[String], split: Split) -> Result<()> {
    let counts = manifest.class_counts(split);
    for c in classes {
        if counts.get(c).copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyClass(c.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBand {
    pub center: f64,
    pub bandwidth: f64,
    pub amplitude: f64,
}

/// Recipe for one synthetic scene class: tones plus band-limited noise under
/// an optional amplitude modulation, over a white-noise floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    #[serde(default)]
    pub tones: Vec<Tone>,
    #[serde(default)]
    pub bands: Vec<NoiseBand>,
    /// Modulation rate in Hz.
    #[serde(default)]
    pub am_rate: f64,
    /// Modulation depth in [0, 1].
    #[serde(default)]
    pub am_depth: f64,
    /// Standard deviation of the additive white noise.
    #[serde(default)]
    pub noise_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub sample_rate: u32,
    /// Clip length in seconds.
    pub duration: f64,
}

const BAND_COMPONENTS: usize = 32;

impl SyntheticClass {
    pub fn validate(&self, settings: &SynthSettings) -> Result<()> {
        let nyquist = settings.sample_rate as f64 / 2.0;
        let bad = |msg: String| Err(Error::InvalidConfig(format!("class `{}`: {msg}", self.name)));
        if settings.sample_rate == 0 || !(settings.duration > 0.0) {
            return bad("sample rate and duration must be positive".into());
        }
        for t in &self.tones {
            if !(t.frequency > 0.0 && t.frequency < nyquist) || !(t.amplitude >= 0.0) {
                return bad(format!("tone at {} Hz is invalid", t.frequency));
            }
        }
        for b in &self.bands {
            let lo = b.center - b.bandwidth / 2.0;
            let hi = b.center + b.bandwidth / 2.0;
            if !(b.bandwidth > 0.0 && lo > 0.0 && hi < nyquist) || !(b.amplitude >= 0.0) {
                return bad(format!("band around {} Hz is invalid", b.center));
            }
        }
        if !(0.0..=1.0).contains(&self.am_depth) || !(self.am_rate >= 0.0) {
            return bad("modulation depth must be in [0, 1] and rate nonnegative".into());
        }
        if !(self.noise_floor >= 0.0) {
            return bad("noise floor must be nonnegative".into());
        }
        Ok(())
    }
}

/// Renders one clip of `class`. Component phases, small frequency and gain
/// jitter, and the noise realization all come from `seed`, so clips of a class
/// share a spectral signature but differ in waveform.
pub fn generate_synthetic_scene(class: &SyntheticClass, settings: &SynthSettings, seed: u64) -> AudioClip {
    let sr = settings.sample_rate as f64;
    let n = ((sr * settings.duration).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_pi = 2.0 * std::f64::consts::PI;

    let mut signal = vec![0.0; n];
    let add_sinusoid = |signal: &mut [f64], freq: f64, amp: f64, phase: f64| {
        let w = two_pi * freq / sr;
        for (t, s) in signal.iter_mut().enumerate() {
            *s += amp * (w * t as f64 + phase).sin();
        }
    };
    for tone in &class.tones {
        let freq = tone.frequency * (1.0 + 0.01 * rng.random_range(-1.0..1.0));
        let amp = tone.amplitude * rng.random_range(0.8..1.2);
        let phase = rng.random_range(0.0..two_pi);
        add_sinusoid(&mut signal, freq, amp, phase);
    }
    for band in &class.bands {
        let per = band.amplitude / (BAND_COMPONENTS as f64).sqrt();
        for _ in 0..BAND_COMPONENTS {
            let freq = band.center + band.bandwidth * rng.random_range(-0.5..0.5);
            let amp = per * rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..two_pi);
            add_sinusoid(&mut signal, freq, amp, phase);
        }
    }
    if class.am_depth > 0.0 && class.am_rate > 0.0 {
        let phase = rng.random_range(0.0..two_pi);
        let w = two_pi * class.am_rate / sr;
        for (t, s) in signal.iter_mut().enumerate() {
            *s *= 1.0 - class.am_depth * 0.5 * (1.0 - (w * t as f64 + phase).sin());
        }
    }
    if class.noise_floor > 0.0 {
        for s in signal.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *s += class.noise_floor * z;
        }
    }
    let gain = rng.random_range(0.8..1.2);
    signal.iter_mut().for_each(|s| *s *= gain);

    let peak = signal.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.99 {
        let k = 0.99 / peak;
        signal.iter_mut().for_each(|s| *s *= k);
    }
    AudioClip::new(signal, settings.sample_rate).expect("generator output is bounded")
}

/// One featurized, labeled example.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub features: FeatureMatrix,
    pub label: SceneLabel,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl LabeledDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn push(&mut self, split: Split, example: Example) {
        match split {
            Split::Train => self.train.push(example),
            Split::Validation => self.validation.push(example),
            Split::Test => self.test.push(example),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(per_class: &[(&str, usize)]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (label, n) in per_class {
            for i in 0..*n {
                entries.push(ManifestEntry {
                    path: PathBuf::from(format!("{label}-{i}.wav")),
                    label: label.to_string(),
                    split: Split::Train,
                });
            }
        }
        DatasetManifest { entries }
    }

    #[test]
    fn silence_wav_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &AudioClip::new(vec![0.0; 48_000], 48_000).unwrap()).unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.len(), 48_000);
        assert_eq!(clip.sample_rate(), 48_000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_pcm16_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(i16::MAX).unwrap();
        w.write_sample(i16::MIN).unwrap();
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples(), &[32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn stereo_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_header_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.wav");
        write_wav(&path, &AudioClip::new(vec![0.1; 100], 8_000).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..20]).unwrap();
        let r = load_wav(&path);
        assert!(matches!(r, Err(Error::CorruptFile(_))), "{r:?}");
    }

    #[test]
    fn manifest_parses_header_and_optional_split() {
        let m = DatasetManifest::parse("filename\tscene_label\naudio/a.wav\tmetro\naudio/b.wav\ttram\ttest\n").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].split, Split::Train);
        assert_eq!(m.entries[1].split, Split::Test);
        assert_eq!(m.entries[1].id(), "b");
        assert_eq!(DatasetManifest::parse(&m.to_tsv()).unwrap(), m);
        assert!(DatasetManifest::parse("a.wav\n").is_err());
    }

    #[test]
    fn ten_percent_of_hundred_per_class() {
        let m = manifest(&[("a", 100), ("b", 100), ("c", 100)]);
        let s = m.stratified_split(0.1, 3).unwrap();
        let val = s.class_counts(Split::Validation);
        assert_eq!(val.values().copied().collect::<Vec<_>>(), vec![10, 10, 10]);
        assert_eq!(s.count(Split::Train), 270);
    }

    #[test]
    fn singleton_class_keeps_global_fraction() {
        let m = manifest(&[("a", 50), ("b", 49), ("lonely", 1)]);
        let s = m.stratified_split(0.1, 11).unwrap();
        let val = s.class_counts(Split::Validation);
        let lonely = val.get("lonely").copied().unwrap_or(0);
        assert!(lonely <= 1);
        assert_eq!(s.count(Split::Validation), 10);
    }

    #[test]
    fn split_rejects_bad_fraction_and_empty_train() {
        let m = manifest(&[("a", 10)]);
        assert!(matches!(m.stratified_split(0.0, 1), Err(Error::InvalidParameter(_))));
        assert!(matches!(m.stratified_split(1.0, 1), Err(Error::InvalidParameter(_))));
        let empty = DatasetManifest::default();
        assert!(matches!(empty.stratified_split(0.1, 1), Err(Error::EmptyDataset(_))));
        assert!(matches!(
            ensure_classes_present(&m, &["a".into(), "ghost".into()], Split::Train),
            Err(Error::EmptyClass(c)) if c == "ghost"
        ));
    }

    #[test]
    fn label_set_resolution() {
        let labels = LabelSet::new(vec!["metro".into(), "park".into()]).unwrap();
        assert_eq!(labels.resolve("park").kind, LabelKind::Known(1));
        assert!(labels.resolve("tram").is_unknown());
        assert!(LabelSet::new(vec!["a".into(), "a".into()]).is_err());
    }

    fn settings() -> SynthSettings {
        SynthSettings { sample_rate: 8_000, duration: 0.25 }
    }

    #[test]
    fn silence_class_is_all_zero() {
        let silence = SyntheticClass {
            name: "silence".into(),
            tones: vec![],
            bands: vec![],
            am_rate: 0.0,
            am_depth: 0.0,
            noise_floor: 0.0,
        };
        let clip = generate_synthetic_scene(&silence, &settings(), 5);
        assert_eq!(clip.len(), 2_000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn seeds_change_waveform() {
        let class = SyntheticClass {
            name: "hum".into(),
            tones: vec![Tone { frequency: 300.0, amplitude: 0.3 }],
            bands: vec![NoiseBand { center: 1500.0, bandwidth: 400.0, amplitude: 0.2 }],
            am_rate: 3.0,
            am_depth: 0.5,
            noise_floor: 0.01,
        };
        class.validate(&settings()).unwrap();
        let a = generate_synthetic_scene(&class, &settings(), 1);
        let b = generate_synthetic_scene(&class, &settings(), 2);
        assert_ne!(a, b);
        assert_eq!(a, generate_synthetic_scene(&class, &settings(), 1));
        assert!(a.samples().iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn invalid_recipe_is_rejected() {
        let class = SyntheticClass {
            name: "bad".into(),
            tones: vec![Tone { frequency: 5_000.0, amplitude: 0.3 }],
            bands: vec![],
            am_rate: 0.0,
            am_depth: 0.0,
            noise_floor: 0.0,
        };
        assert!(matches!(class.validate(&settings()), Err(Error::InvalidConfig(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn stratification_bounds(counts in proptest::collection::vec(1usize..60, 1..6),
                                 fraction in 0.05f64..0.5,
                                 seed in any::<u64>()) {
            let names: Vec<String> = (0..counts.len()).map(|i| format!("c{i}")).collect();
            let spec: Vec<(&str, usize)> =
                names.iter().map(String::as_str).zip(counts.iter().copied()).collect();
            let m = manifest(&spec);
            let s = m.stratified_split(fraction, seed).unwrap();
            let val = s.class_counts(Split::Validation);
            for (name, n) in &spec {
                let got = val.get(*name).copied().unwrap_or(0) as f64;
                prop_assert!((got - fraction * *n as f64).abs() <= 1.0);
            }
            prop_assert_eq!(s, m.stratified_split(fraction, seed).unwrap());
        }

        #[test]
        fn wav_round_trip_within_one_lsb(samples in proptest::collection::vec(-1.0f64..1.0, 1..200)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.wav");
            let clip = AudioClip::new(samples, 22_050).unwrap();
            write_wav(&path, &clip).unwrap();
            let back = load_wav(&path).unwrap();
            prop_assert_eq!(back.len(), clip.len());
            for (a, b) in clip.samples().iter().zip(back.samples()) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
