//! Parametric toy corpus.
//!
//! Self-contained clip pools whose stems are separable in principle and
//! whose feature streams genuinely describe the audio: DX clips are
//! amplitude-modulated voice-band tones with facial features tracking the
//! modulation envelope, FX clips are gated noise bursts with scene features
//! tracking the burst gate, MX clips are sustained harmonic triads with no
//! features. Used by the end-to-end tests and the `toy-pools` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndarray::Array2;

use crate::conditioning::{FeatureSequence, StreamKind};
use crate::dsp::Waveform;
use crate::mixer::{
    Clip, ClipPool, CountDistribution, DurationDistribution, MixRecipe, PerStem, StemPools,
    SAMPLE_RATE,
};
use crate::StemKind;

pub const FACIAL_FPS: f64 = 25.0;
pub const SCENE_FPS: f64 = 4.0;
pub const FEATURE_DIM: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct ToyCorpusConfig {
    pub clips_per_stem: usize,
    pub clip_seconds: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            clips_per_stem: 24,
            clip_seconds: 6.0,
            seed: 0,
        }
    }
}

fn dx_clip(rng: &mut ChaCha8Rng, seconds: f64, id: String) -> Clip {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let carrier: f64 = rng.random_range(1200.0..3000.0);
    let am_rate: f64 = rng.random_range(2.5..7.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = 0.5 * (1.0 + (std::f64::consts::TAU * am_rate * t + phase).sin());
            (0.45 * env * (std::f64::consts::TAU * carrier * t).sin()) as f32
        })
        .collect();

    let rows = (seconds * FACIAL_FPS).ceil() as usize;
    let mut feats = Array2::zeros((rows, FEATURE_DIM));
    for r in 0..rows {
        let t = r as f64 / FACIAL_FPS;
        let env = 0.5 * (1.0 + (std::f64::consts::TAU * am_rate * t + phase).sin());
        feats[[r, 0]] = env;
        feats[[r, 1]] = env * env;
        feats[[r, 2]] = carrier / 3000.0;
        feats[[r, 3]] = 1.0;
    }

    Clip {
        id,
        audio: Waveform::new(samples, SAMPLE_RATE),
        features: Some(FeatureSequence::new(feats, FACIAL_FPS, StreamKind::Facial)),
    }
}

fn fx_clip(rng: &mut ChaCha8Rng, seconds: f64, id: String) -> Clip {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let period: f64 = rng.random_range(0.8..2.0);
    let duty: f64 = rng.random_range(0.3..0.6);
    let offset: f64 = rng.random_range(0.0..period);
    let ramp = (0.02 * SAMPLE_RATE as f64) as usize;
    let gate_at = |t: f64| -> f64 {
        let phase = (t + offset) % period;
        if phase < duty * period {
            1.0
        } else {
            0.0
        }
    };
    let mut samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            (0.35 * gate_at(t) * rng.random_range(-1.0f64..1.0)) as f32
        })
        .collect();
    // Soften gate edges to avoid clicks.
    for i in 1..n {
        let prev = samples[i - 1];
        let cur = samples[i];
        if prev == 0.0 && cur != 0.0 {
            for k in 0..ramp.min(n - i) {
                samples[i + k] *= (k as f32 + 1.0) / ramp as f32;
            }
        }
    }

    let rows = (seconds * SCENE_FPS).ceil() as usize;
    let mut feats = Array2::zeros((rows, FEATURE_DIM));
    for r in 0..rows {
        let t = r as f64 / SCENE_FPS;
        let g = gate_at(t);
        let g_next = gate_at(t + 0.125);
        feats[[r, 0]] = g;
        feats[[r, 1]] = 0.5 * (g + g_next);
        feats[[r, 2]] = duty;
        feats[[r, 3]] = 1.0;
    }

    Clip {
        id,
        audio: Waveform::new(samples, SAMPLE_RATE),
        features: Some(FeatureSequence::new(feats, SCENE_FPS, StreamKind::Scene)),
    }
}

fn mx_clip(rng: &mut ChaCha8Rng, seconds: f64, id: String) -> Clip {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let root: f64 = rng.random_range(180.0..400.0);
    // Major-ish triad plus octave harmonics: a stable comb.
    let ratios = [1.0, 1.25, 1.5, 2.0, 2.5];
    let gains = [1.0, 0.8, 0.8, 0.4, 0.3];
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let mut v = 0.0;
            for (r, g) in ratios.iter().zip(&gains) {
                v += g * (std::f64::consts::TAU * root * r * t).sin();
            }
            (0.12 * v) as f32
        })
        .collect();
    Clip {
        id,
        audio: Waveform::new(samples, SAMPLE_RATE),
        features: None,
    }
}

/// Generate the three toy pools. Deterministic in the seed.
pub fn generate_toy_pools(cfg: &ToyCorpusConfig) -> StemPools {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dx = ClipPool::new(
        StemKind::Dx,
        (0..cfg.clips_per_stem)
            .map(|i| dx_clip(&mut rng, cfg.clip_seconds, format!("toy_dx_{i:03}")))
            .collect(),
    );
    let fx = ClipPool::new(
        StemKind::Fx,
        (0..cfg.clips_per_stem)
            .map(|i| fx_clip(&mut rng, cfg.clip_seconds, format!("toy_fx_{i:03}")))
            .collect(),
    );
    let mx = ClipPool::new(
        StemKind::Mx,
        (0..cfg.clips_per_stem)
            .map(|i| mx_clip(&mut rng, cfg.clip_seconds, format!("toy_mx_{i:03}")))
            .collect(),
    );
    StemPools { dx, fx, mx }
}

/// Training-sample recipe for the toy problem: 8 s samples, two DX/FX
/// segments and one MX segment each.
pub fn toy_train_recipe(seed: u64) -> MixRecipe {
    MixRecipe {
        duration: 8.0,
        segment_counts: PerStem {
            dx: CountDistribution::Fixed(2),
            fx: CountDistribution::Fixed(2),
            mx: CountDistribution::Fixed(1),
        },
        segment_durations: PerStem {
            dx: DurationDistribution::LogNormal {
                median: 3.0,
                sigma: 0.35,
                min: 1.5,
                max: 5.0,
            },
            fx: DurationDistribution::LogNormal {
                median: 3.0,
                sigma: 0.35,
                min: 1.5,
                max: 5.0,
            },
            mx: DurationDistribution::Fixed(6.0),
        },
        crossfade: 0.25,
        rng_seed: seed,
        ..MixRecipe::default()
    }
}

/// Held-out evaluation recipe: 4 s samples with one long segment per stem,
/// so every stem carries content for most of the sample.
pub fn toy_eval_recipe(seed: u64) -> MixRecipe {
    MixRecipe {
        duration: 4.0,
        segment_counts: PerStem::uniform(CountDistribution::Fixed(1)),
        segment_durations: PerStem::uniform(DurationDistribution::Fixed(3.5)),
        crossfade: 0.25,
        rng_seed: seed,
        ..MixRecipe::default()
    }
}
