//! Generator and feature pipeline checked against independent oracles.

use osasc_core::dataio::{generate_synthetic_scene, NoiseBand, SynthSettings, SyntheticClass, Tone};
use osasc_core::features::{fit_standardization, standardize, FeatureConfig, FeaturePipeline};

const SR: u32 = 16_000;

fn tone_class(name: &str, freq: f64) -> SyntheticClass {
    SyntheticClass {
        name: name.into(),
        tones: vec![Tone { frequency: freq, amplitude: 0.5 }],
        bands: vec![],
        am_rate: 0.0,
        am_depth: 0.0,
        noise_floor: 0.0,
    }
}

fn dft_peak_bin(frame: &[f64]) -> usize {
    let n = frame.len();
    let window: Vec<f64> =
        (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
    (0..n / 2 + 1)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in frame.iter().enumerate() {
                let a = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += x * window[i] * a.cos();
                im -= x * window[i] * a.sin();
            }
            (k, re * re + im * im)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

/// Mel band whose triangle is tallest at `hz`, using the natural-log form of
/// the mel scale.
fn oracle_band(hz: f64, n_mels: usize) -> usize {
    let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
    let inv = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let top = mel(SR as f64 / 2.0);
    let corner = |i: usize| inv(top * i as f64 / (n_mels + 1) as f64);
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (corner(m), corner(m + 1), corner(m + 2));
            let h = if hz <= l || hz >= r {
                0.0
            } else if hz <= c {
                (hz - l) / (c - l)
            } else {
                (r - hz) / (r - c)
            };
            (m, h)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn tone_440_peaks_in_the_band_containing_440_hz() {
    let settings = SynthSettings { sample_rate: SR, duration: 0.5 };
    let cfg = FeatureConfig { window_size: 1024, hop: 256, n_mels: 40, ..FeatureConfig::default() };
    let pipeline = FeaturePipeline::new(cfg, SR).unwrap();
    for seed in 0..5 {
        let clip = generate_synthetic_scene(&tone_class("tone-440", 440.0), &settings, seed);
        let k = dft_peak_bin(&clip.samples()[2048..3072]);
        let df = SR as f64 / 1024.0;
        assert!((k as f64 * df - 440.0).abs() <= df, "DFT peak at bin {k}");

        let m = pipeline.extract(&clip).unwrap();
        let mut mean = vec![0.0; m.n_mels];
        for t in 0..m.n_frames {
            mean.iter_mut().zip(m.frame(t)).for_each(|(a, v)| *a += v);
        }
        let peak = mean.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, oracle_band(440.0, 40), "seed {seed}");
    }
}

#[test]
fn silence_features_sit_at_the_log_floor() {
    let cfg = FeatureConfig { window_size: 256, hop: 128, n_mels: 16, ..FeatureConfig::default() };
    let pipeline = FeaturePipeline::new(cfg, 8000).unwrap();
    let silence = SyntheticClass { name: "silence".into(), ..tone_class("", 1.0) };
    let clip = generate_synthetic_scene(
        &SyntheticClass { tones: vec![], ..silence },
        &SynthSettings { sample_rate: 8000, duration: 0.25 },
        1,
    );
    assert!(clip.samples().iter().all(|&s| s == 0.0));
    let m = pipeline.extract(&clip).unwrap();
    assert!(m.values.iter().all(|&v| v == cfg.log_floor.ln()));
}

/// Softmax regression by full-batch gradient descent on time-averaged
/// standardized features; returns held-out accuracy.
fn linear_probe(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let d = train[0].0.len();
    let mut w = vec![vec![0.0; d + 1]; classes];
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (x, y) in train {
            let z: Vec<f64> =
                w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / s - if c == *y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..classes {
            for j in 0..=d {
                w[c][j] -= 0.5 * grad[c][j] / train.len() as f64;
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: Vec<f64> =
                w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
            z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == *y
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn distinct_recipes_are_linearly_separable() {
    let settings = SynthSettings { sample_rate: 8000, duration: 0.512 };
    let classes = [
        SyntheticClass { noise_floor: 0.05, ..tone_class("hum", 300.0) },
        SyntheticClass {
            bands: vec![NoiseBand { center: 1500.0, bandwidth: 500.0, amplitude: 0.3 }],
            tones: vec![],
            noise_floor: 0.05,
            ..tone_class("hiss", 1.0)
        },
        SyntheticClass { am_rate: 6.0, am_depth: 0.8, noise_floor: 0.05, ..tone_class("pulse", 2500.0) },
        SyntheticClass { tones: vec![], noise_floor: 0.2, ..tone_class("rain", 1.0) },
    ];
    let cfg = FeatureConfig { window_size: 256, hop: 128, n_mels: 32, ..FeatureConfig::default() };
    let pipeline = FeaturePipeline::new(cfg, 8000).unwrap();
    let mut raw = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        for i in 0..40 {
            raw.push((
                pipeline.extract(&generate_synthetic_scene(class, &settings, 1000 * c as u64 + i)).unwrap(),
                c,
                i,
            ));
        }
    }
    let train_m: Vec<_> = raw.iter().filter(|r| r.2 < 30).map(|r| r.0.clone()).collect();
    let stats = fit_standardization(&train_m, 1e-8).unwrap();
    let pooled = |filter: &dyn Fn(u64) -> bool| -> Vec<(Vec<f64>, usize)> {
        raw.iter()
            .filter(|r| filter(r.2))
            .map(|(m, c, _)| {
                let s = standardize(m, &stats).unwrap();
                let mut mean = vec![0.0; s.n_mels];
                for t in 0..s.n_frames {
                    mean.iter_mut().zip(s.frame(t)).for_each(|(a, v)| *a += v / s.n_frames as f64);
                }
                (mean, *c)
            })
            .collect()
    };
    let acc = linear_probe(&pooled(&|i| i < 30), &pooled(&|i| i >= 30), classes.len());
    assert!(acc >= 0.95, "linear probe accuracy {acc}");
}
