//! Integrated loudness (ITU-R BS.1770-4) and 4x-oversampled true peak.
//!
//! The K-weighting pre-filter is rederived for the working sample rate from
//! the analog-prototype parametrization (the published 48 kHz table falls
//! out of the same formulas), so 16 kHz material can be measured directly.

use crate::dsp::resample::SincResampler;
use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Loudness value for digital silence (no gating block survives).
pub const SILENCE_LKFS: f64 = f64::NEG_INFINITY;

/// Second-order IIR section, a0 normalized to 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Stage 1: high-shelf modeling acoustic effects of the head.
    pub(crate) fn k_high_shelf(sample_rate: f64) -> Biquad {
        let gain_db = 3.999_843_853_97;
        let q = 0.707_175_236_955_419_3;
        let center_hz = 1_681.974_450_955_533;

        let k = (std::f64::consts::PI * center_hz / sample_rate).tan();
        let vh = 10f64.powf(gain_db / 20.0);
        let vb = vh.powf(0.499_666_774_155);
        let a0 = 1.0 + k / q + k * k;
        Biquad {
            b0: (vh + vb * k / q + k * k) / a0,
            b1: 2.0 * (k * k - vh) / a0,
            b2: (vh - vb * k / q + k * k) / a0,
            a1: 2.0 * (k * k - 1.0) / a0,
            a2: (1.0 - k / q + k * k) / a0,
        }
    }

    /// Stage 2: RLB high-pass.
    pub(crate) fn k_high_pass(sample_rate: f64) -> Biquad {
        let q = 0.500_327_037_325_395_3;
        let center_hz = 38.135_470_876_139_82;

        let k = (std::f64::consts::PI * center_hz / sample_rate).tan();
        let a0 = 1.0 + k / q + k * k;
        Biquad {
            b0: 1.0,
            b1: -2.0,
            b2: 1.0,
            a1: 2.0 * (k * k - 1.0) / a0,
            a2: (1.0 - k / q + k * k) / a0,
        }
    }

    /// Squared magnitude response at `freq_hz`.
    #[cfg(test)]
    pub(crate) fn power_response(&self, freq_hz: f64, sample_rate: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate;
        let z1 = num_complex::Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = num_complex::Complex64::new(self.b0, 0.0) + self.b1 * z1 + self.b2 * z2;
        let den = num_complex::Complex64::new(1.0, 0.0) + self.a1 * z1 + self.a2 * z2;
        (num / den).norm_sqr()
    }

    fn run(&self, input: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut x1 = 0.0f64;
        let mut x2 = 0.0f64;
        let mut y1 = 0.0f64;
        let mut y2 = 0.0f64;
        let mut out = Vec::new();
        for x0 in input {
            let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            out.push(y0);
        }
        out
    }
}

fn power_to_lkfs(power: f64) -> f64 {
    -0.691 + 10.0 * power.log10()
}

/// BS.1770-4 integrated loudness in LKFS.
///
/// K-weighting, 400 ms gating blocks at 75% overlap, absolute gate at
/// -70 LKFS then relative gate 10 LU below the absolutely-gated mean.
/// Returns [`SILENCE_LKFS`] when nothing survives the gates. Inputs shorter
/// than 400 ms are an error.
pub fn measure_loudness(w: &Waveform) -> Result<f64> {
    let per_100ms = (w.sample_rate / 10) as usize;
    if w.len() < 4 * per_100ms {
        return Err(Error::validation(format!(
            "loudness needs at least 400 ms of audio, got {} samples at {} Hz",
            w.len(),
            w.sample_rate
        )));
    }
    w.ensure_finite()?;

    let stage1 = Biquad::k_high_shelf(w.sample_rate as f64);
    let stage2 = Biquad::k_high_pass(w.sample_rate as f64);
    let filtered = stage2.run(
        stage1
            .run(w.samples.iter().map(|&v| v as f64))
            .into_iter(),
    );

    // Mean squares over non-overlapping 100 ms sub-blocks.
    let n_sub = filtered.len() / per_100ms;
    let mut sub_power = Vec::with_capacity(n_sub);
    for i in 0..n_sub {
        let chunk = &filtered[i * per_100ms..(i + 1) * per_100ms];
        let sum: f64 = chunk.iter().map(|v| v * v).sum();
        sub_power.push(sum / per_100ms as f64);
    }

    // 400 ms gating blocks stepped by 100 ms.
    let blocks: Vec<f64> = sub_power
        .windows(4)
        .map(|w4| 0.25 * w4.iter().sum::<f64>())
        .collect();

    // Absolute gate at -70 LKFS.
    let abs_gated: Vec<f64> = blocks
        .iter()
        .copied()
        .filter(|&p| power_to_lkfs(p) > -70.0)
        .collect();
    if abs_gated.is_empty() {
        return Ok(SILENCE_LKFS);
    }

    // Relative gate 10 LU below the absolutely-gated mean.
    let mean_abs = abs_gated.iter().sum::<f64>() / abs_gated.len() as f64;
    let relative_threshold = power_to_lkfs(mean_abs) - 10.0;
    let rel_gated: Vec<f64> = abs_gated
        .iter()
        .copied()
        .filter(|&p| power_to_lkfs(p) > relative_threshold)
        .collect();
    if rel_gated.is_empty() {
        return Ok(SILENCE_LKFS);
    }
    let mean = rel_gated.iter().sum::<f64>() / rel_gated.len() as f64;
    Ok(power_to_lkfs(mean))
}

/// True peak in dBTP: the larger of the raw sample peak and the peak of the
/// 4x-oversampled signal (16-tap interpolation kernel, meter grade).
pub fn measure_true_peak(w: &Waveform) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::validation("true peak of empty input".to_string()));
    }
    w.ensure_finite()?;
    let rs = SincResampler::with_taps(w.sample_rate, w.sample_rate * 4, 16);
    let oversampled = rs.process(&w.samples);
    let mut peak = w.peak() as f64;
    for s in oversampled {
        peak = peak.max(s.abs() as f64);
    }
    Ok(20.0 * peak.log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amplitude: f64, seconds: f64, rate: u32) -> Waveform {
        let n = (seconds * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| (amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, rate)
    }

    #[test]
    fn full_scale_997_hz_sine_measures_near_minus_3_lkfs() {
        let w = sine(997.0, 1.0, 5.0, 16_000);
        let measured = measure_loudness(&w).unwrap();

        // Oracle: expected loudness from the filter transfer functions.
        // A sine of amplitude 1 has mean square 0.5; the K-filter applies
        // its squared magnitude at 997 Hz.
        let g1 = Biquad::k_high_shelf(16_000.0).power_response(997.0, 16_000.0);
        let g2 = Biquad::k_high_pass(16_000.0).power_response(997.0, 16_000.0);
        let expected = -0.691 + 10.0 * (0.5 * g1 * g2).log10();
        assert!(
            (measured - expected).abs() < 0.02,
            "measured {measured} vs transfer-function oracle {expected}"
        );
        assert!(
            (measured - (-3.01)).abs() < 0.1,
            "measured {measured} LKFS, expected -3.01 +/- 0.1"
        );
    }

    #[test]
    fn loudness_is_linear_in_gain() {
        let loud = measure_loudness(&sine(997.0, 1.0, 5.0, 16_000)).unwrap();
        let half = measure_loudness(&sine(997.0, 0.5, 5.0, 16_000)).unwrap();
        assert!(
            ((loud - half) - 6.0206).abs() < 0.05,
            "gain step {} dB",
            loud - half
        );
    }

    #[test]
    fn digital_silence_yields_sentinel() {
        let w = Waveform::zeros(16_000, 16_000);
        assert_eq!(measure_loudness(&w).unwrap(), SILENCE_LKFS);
    }

    #[test]
    fn short_input_is_rejected() {
        let w = Waveform::zeros(6_000, 16_000); // 375 ms
        assert!(measure_loudness(&w).is_err());
    }

    #[test]
    fn true_peak_of_constant_full_scale_is_at_least_zero() {
        let w = Waveform::new(vec![1.0; 8_000], 16_000);
        let tp = measure_true_peak(&w).unwrap();
        // The hard onset rings like any band-limited step, so the meter may
        // exceed 0 dBTP slightly; it must never read below the sample peak.
        assert!(tp >= 0.0, "tp {tp}");
        assert!(tp < 1.5, "tp {tp}");
    }

    #[test]
    fn half_scale_impulse_train_peaks_at_least_minus_6() {
        let mut samples = vec![0.0f32; 8_000];
        for i in (0..8_000).step_by(400) {
            samples[i] = 0.5;
        }
        let tp = measure_true_peak(&Waveform::new(samples, 16_000)).unwrap();
        assert!(tp >= -6.03, "tp {tp}");
    }

    #[test]
    fn intersample_peak_exceeds_sample_peak() {
        // fs/4 tone sampled at 45 degrees: every sample has magnitude
        // sqrt(2)/2 while the continuous waveform reaches 1.0.
        let rate = 16_000u32;
        let n = 8_000usize;
        let ramp = 400usize;
        let samples: Vec<f32> = (0..n)
            .map(|i| {
                let taper = if i < ramp {
                    (std::f64::consts::FRAC_PI_2 * i as f64 / ramp as f64).sin()
                } else if i >= n - ramp {
                    (std::f64::consts::FRAC_PI_2 * (n - 1 - i) as f64 / ramp as f64).sin()
                } else {
                    1.0
                };
                (taper * 0.9
                    * (std::f64::consts::PI / 2.0 * i as f64 + std::f64::consts::PI / 4.0).sin())
                    as f32
            })
            .collect();
        let w = Waveform::new(samples, rate);
        let sample_peak_db = 20.0 * (w.peak() as f64).log10();
        let tp = measure_true_peak(&w).unwrap();
        assert!(
            tp > sample_peak_db + 2.0,
            "true peak {tp} should exceed sample peak {sample_peak_db}"
        );
        // Analytic oracle: continuous peak is 0.9 -> -0.915 dBTP.
        let analytic = 20.0 * 0.9f64.log10();
        assert!((tp - analytic).abs() < 0.1, "tp {tp} vs analytic {analytic}");
    }
}
