//! Band-energy heuristic sound-event detector.
//!
//! A deliberately simple frame-wise detector emitting the three broad
//! classes (speech / effects / music) at 10 ms resolution, so the
//! wrong-placement metric can run without any external model. Scores are
//! products of logistic features: speech wants voice-band energy with
//! syllabic-rate modulation, effects wants spectral flatness, music wants a
//! harmonic comb without modulation. An energy gate holds all scores near
//! zero on silence.

use ndarray::Array2;

use crate::dsp::{log_magnitude, resample_to_mono_16k, stft, Spectrogram, StftConfig, Waveform, LOG_FLOOR};
use crate::error::Result;
use crate::metrics::ActivationMatrix;

/// Output frame period in seconds.
pub const SED_FRAME_PERIOD: f64 = 0.01;

const SPEECH_BAND_LOW_HZ: f64 = 300.0;
const SPEECH_BAND_HIGH_HZ: f64 = 3400.0;
/// Ignore rumble below this when computing totals.
const FLOOR_HZ: f64 = 50.0;
/// Harmonic comb search range (fundamental spacing).
const COMB_LOW_HZ: f64 = 80.0;
const COMB_HIGH_HZ: f64 = 1000.0;
/// Energy gate: frames with total band power below this are silent.
const GATE_ENERGY: f64 = 1e-4;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn moving_average(x: &[f64], half_width: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(half_width);
        let hi = (i + half_width + 1).min(n);
        out[i] = x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    }
    out
}

/// Per-frame class activations for a 16 kHz log-magnitude spectrogram.
pub fn heuristic_sed(spec: &Spectrogram) -> Result<ActivationMatrix> {
    let frames = spec.frames();
    let bins = spec.bins();
    let sr = 16_000.0;
    let bin_hz = sr / spec.config.fft_size as f64;
    let k_floor = (FLOOR_HZ / bin_hz).ceil() as usize;
    let k_speech_lo = (SPEECH_BAND_LOW_HZ / bin_hz).floor() as usize;
    let k_speech_hi = ((SPEECH_BAND_HIGH_HZ / bin_hz).ceil() as usize).min(bins - 1);
    let lag_lo = ((COMB_LOW_HZ / bin_hz).round() as usize).max(2);
    let lag_hi = ((COMB_HIGH_HZ / bin_hz).round() as usize).min(bins / 2);

    // Per-frame magnitude/power features.
    let mut total_power = vec![0.0f64; frames];
    let mut band_ratio = vec![0.0f64; frames];
    let mut flatness = vec![0.0f64; frames];
    let mut harmonicity = vec![0.0f64; frames];
    let mut mags = vec![vec![0.0f64; bins]; frames];

    for t in 0..frames {
        let mag: Vec<f64> = (0..bins).map(|k| spec.data[[t, k]].exp()).collect();
        let mut total = 0.0;
        let mut band = 0.0;
        let mut log_sum = 0.0;
        let mut count = 0usize;
        for k in k_floor..bins {
            let p = mag[k] * mag[k];
            total += p;
            if (k_speech_lo..=k_speech_hi).contains(&k) {
                band += p;
            }
            log_sum += p.max(1e-300).ln();
            count += 1;
        }
        total_power[t] = total;
        band_ratio[t] = band / (total + 1e-30);
        let geo = (log_sum / count as f64).exp();
        let arith = total / count as f64;
        flatness[t] = geo / (arith + 1e-300);

        // Spectral autocorrelation over bin lags: a harmonic comb with
        // spacing f0 peaks at lag f0 / bin_hz.
        let r0: f64 = mag[k_floor..bins].iter().map(|m| m * m).sum();
        let mut best = 0.0f64;
        for lag in lag_lo..=lag_hi {
            let mut r = 0.0;
            for k in k_floor..bins - lag {
                r += mag[k] * mag[k + lag];
            }
            best = best.max(r);
        }
        harmonicity[t] = best / (r0 + 1e-300);
        mags[t] = mag;
    }

    // Spectral flux (broadband transientness), normalized per frame.
    let mut flux = vec![0.0f64; frames];
    for t in 1..frames {
        let mut up = 0.0;
        let mut norm = 0.0;
        for k in k_floor..bins {
            up += (mags[t][k] - mags[t - 1][k]).max(0.0);
            norm += mags[t][k];
        }
        flux[t] = up / (norm + 1e-30);
    }
    if frames > 1 {
        flux[0] = flux[1];
    }

    // Envelope modulation in the syllabic band, approximated by the
    // difference of short and long moving averages of the band energy.
    let frame_rate = sr / spec.config.hop_size as f64;
    let short_half = ((0.03 * frame_rate).round() as usize).max(1);
    let long_half = ((0.35 * frame_rate).round() as usize).max(short_half + 1);
    let env: Vec<f64> = (0..frames)
        .map(|t| band_ratio[t] * total_power[t])
        .collect();
    let env_short = moving_average(&env, short_half);
    let env_long = moving_average(&env, long_half);
    let band_dev: Vec<f64> = env_short
        .iter()
        .zip(&env_long)
        .map(|(s, l)| (s - l).abs())
        .collect();
    let dev_smooth = moving_average(&band_dev, long_half);
    let modulation: Vec<f64> = (0..frames)
        .map(|t| dev_smooth[t] / (env_long[t] + 1e-30))
        .collect();

    // Squash into [0,1] scores.
    let mut scores = Array2::zeros((frames, 3));
    for t in 0..frames {
        let gate = logistic(2.0 * ((total_power[t] + 1e-300).ln() - GATE_ENERGY.ln()));
        let speech = gate
            * logistic(8.0 * (band_ratio[t] - 0.55))
            * logistic(8.0 * (modulation[t] - 0.18))
            * logistic(6.0 * (0.45 - flatness[t]));
        let effects = gate * logistic(8.0 * (flatness[t] + 0.6 * flux[t] - 0.35));
        let music = gate
            * logistic(10.0 * (harmonicity[t] - 0.45))
            * logistic(8.0 * (0.25 - modulation[t]))
            * logistic(6.0 * (0.4 - flatness[t]));
        scores[[t, 0]] = speech;
        scores[[t, 1]] = effects;
        scores[[t, 2]] = music;
    }

    // Resample STFT frames onto the 10 ms output grid (nearest frame, each
    // STFT frame centered on its window).
    let total_samples = (frames - 1) * spec.config.hop_size + spec.config.window_size;
    let out_frames = (total_samples as f64 / (sr * SED_FRAME_PERIOD)) as usize;
    let mut probs = Array2::zeros((out_frames.max(1), 3));
    for i in 0..out_frames.max(1) {
        let center = i as f64 * sr * SED_FRAME_PERIOD + 0.5 * sr * SED_FRAME_PERIOD;
        let f = ((center - 0.5 * spec.config.window_size as f64) / spec.config.hop_size as f64)
            .round()
            .clamp(0.0, (frames - 1) as f64) as usize;
        for c in 0..3 {
            probs[[i, c]] = scores[[f, c]].clamp(0.0, 1.0);
        }
    }

    ActivationMatrix::new(
        probs,
        SED_FRAME_PERIOD,
        vec!["speech".into(), "effects".into(), "music".into()],
    )
}

/// Convenience wrapper: resample to 16 kHz, take the default STFT, and run
/// the detector.
pub fn sed_from_waveform(w: &Waveform) -> Result<ActivationMatrix> {
    let w16 = resample_to_mono_16k(w)?;
    let cfg = StftConfig::default();
    let padded = if w16.len() < cfg.window_size {
        let mut p = w16.clone();
        p.samples.resize(cfg.window_size, 0.0);
        p
    } else {
        w16
    };
    let c = stft(&padded, &cfg)?;
    let m = log_magnitude(&c, LOG_FLOOR)?;
    heuristic_sed(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SR: f64 = 16_000.0;

    fn spec_of(w: &Waveform) -> Spectrogram {
        let c = stft(w, &StftConfig::default()).unwrap();
        log_magnitude(&c, LOG_FLOOR).unwrap()
    }

    #[test]
    fn sustained_triad_scores_music() {
        // Harmonically spaced triad with a couple of overtones.
        let n = (4.0 * SR) as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / SR;
                let mut v = 0.0;
                for f in [440.0, 550.0, 660.0, 880.0, 1100.0] {
                    v += (2.0 * std::f64::consts::PI * f * t).sin();
                }
                (0.15 * v) as f32
            })
            .collect();
        let act = heuristic_sed(&spec_of(&Waveform::new(samples, 16_000))).unwrap();
        let frames = act.frames();
        let dominant = (0..frames)
            .filter(|&t| {
                act.probs[[t, 2]] > act.probs[[t, 0]] && act.probs[[t, 2]] > act.probs[[t, 1]]
            })
            .count();
        assert!(
            dominant as f64 >= 0.8 * frames as f64,
            "music dominant in {dominant}/{frames} frames"
        );
    }

    #[test]
    fn noise_bursts_score_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = (4.0 * SR) as usize;
        let burst = |t: f64| -> bool { (t % 1.0) < 0.4 };
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / SR;
                if burst(t) {
                    rng.random_range(-0.4f32..0.4)
                } else {
                    0.0
                }
            })
            .collect();
        let act = heuristic_sed(&spec_of(&Waveform::new(samples, 16_000))).unwrap();
        // Interior burst frames: 80..350 ms of each 1 s period.
        let mut total = 0usize;
        let mut effects_dominant = 0usize;
        for t in 0..act.frames() {
            let sec = t as f64 * SED_FRAME_PERIOD;
            let phase = sec % 1.0;
            if phase > 0.08 && phase < 0.35 {
                total += 1;
                if act.probs[[t, 1]] > act.probs[[t, 0]] && act.probs[[t, 1]] > act.probs[[t, 2]]
                {
                    effects_dominant += 1;
                }
            }
        }
        assert!(
            effects_dominant as f64 >= 0.8 * total as f64,
            "effects dominant in {effects_dominant}/{total} burst frames"
        );
    }

    #[test]
    fn silence_scores_below_threshold_everywhere() {
        let w = Waveform::zeros((2.0 * SR) as usize, 16_000);
        let act = heuristic_sed(&spec_of(&w)).unwrap();
        for t in 0..act.frames() {
            for c in 0..3 {
                assert!(
                    act.probs[[t, c]] < 0.25,
                    "frame {t} class {c}: {}",
                    act.probs[[t, c]]
                );
            }
        }
    }

    #[test]
    fn amplitude_modulated_tone_scores_speech() {
        // AM voice-band tone at syllabic rate; this is the DX surrogate the
        // toy corpus uses.
        let n = (4.0 * SR) as usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let t = i as f64 / SR;
                let env = 0.5 * (1.0 + (2.0 * std::f64::consts::PI * 4.0 * t).sin());
                (0.5 * env * (2.0 * std::f64::consts::PI * 800.0 * t).sin()) as f32
            })
            .collect();
        let act = heuristic_sed(&spec_of(&Waveform::new(samples, 16_000))).unwrap();
        let frames = act.frames();
        let speech_dominant = (0..frames)
            .filter(|&t| {
                act.probs[[t, 0]] > act.probs[[t, 1]] && act.probs[[t, 0]] > act.probs[[t, 2]]
            })
            .count();
        assert!(
            speech_dominant as f64 >= 0.6 * frames as f64,
            "speech dominant in {speech_dominant}/{frames} frames"
        );
    }

    #[test]
    fn short_input_is_padded_not_rejected() {
        let w = Waveform::zeros(500, 16_000);
        let act = sed_from_waveform(&w).unwrap();
        assert!(act.frames() >= 1);
    }
}
