//! Deterministic inputs shared by the benchmarks.

use osasc_core::dataio::{generate_synthetic_scene, NoiseBand, SynthSettings, SyntheticClass, Tone};
use osasc_core::AudioClip;

pub fn scene_clip(sample_rate: u32, seconds: f64) -> AudioClip {
    let class = SyntheticClass {
        name: "bench".into(),
        tones: vec![Tone { frequency: 440.0, amplitude: 0.3 }],
        bands: vec![NoiseBand { center: 1500.0, bandwidth: 600.0, amplitude: 0.2 }],
        am_rate: 3.0,
        am_depth: 0.5,
        noise_floor: 0.05,
    };
    generate_synthetic_scene(&class, &SynthSettings { sample_rate, duration: seconds }, 1)
}

/// Values in [0, 1) from a multiplicative congruential sequence.
pub fn uniform_values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(2).wrapping_add(1);
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}
