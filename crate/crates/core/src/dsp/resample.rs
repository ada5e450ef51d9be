//! Windowed-sinc sample-rate conversion.
//!
//! Rates are reduced to a rational ratio L/M, so every output sample falls
//! on one of exactly L sub-sample phases. Coefficients are computed exactly
//! per phase (no table interpolation) from a 64-tap Kaiser(beta = 8) sinc,
//! each phase normalized to unit DC gain.

use crate::dsp::Waveform;
use crate::error::Result;

/// Default kernel length for rate conversion.
const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;
/// Cutoff rolloff relative to the narrower Nyquist.
const ROLLOFF: f64 = 0.945;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..=30 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(offset: f64, half_width: f64) -> f64 {
    let r = offset / half_width;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Polyphase filter bank for a fixed in-rate/out-rate pair.
pub struct SincResampler {
    in_rate: u32,
    out_rate: u32,
    /// Reduced ratio: out/in = up/down.
    up: u64,
    down: u64,
    half: i64,
    /// `up` rows of coefficients; row p holds the kernel sampled at
    /// fractional offset p/up.
    phases: Vec<Vec<f64>>,
}

impl SincResampler {
    pub fn new(in_rate: u32, out_rate: u32) -> Self {
        SincResampler::with_taps(in_rate, out_rate, TAPS)
    }

    /// Build with an explicit (even) kernel length. Shorter kernels trade
    /// stopband depth for speed, e.g. for peak metering.
    pub fn with_taps(in_rate: u32, out_rate: u32, taps: usize) -> Self {
        assert!(taps >= 4 && taps % 2 == 0, "taps must be even and >= 4");
        let half = (taps / 2) as i64;
        let g = gcd(in_rate as u64, out_rate as u64);
        let up = out_rate as u64 / g;
        let down = in_rate as u64 / g;
        // Anti-alias/anti-image cutoff in units of the input Nyquist.
        let cutoff = ROLLOFF * (out_rate as f64 / in_rate as f64).min(1.0);

        let mut phases = Vec::with_capacity(up as usize);
        for p in 0..up {
            let frac = p as f64 / up as f64;
            let mut row = vec![0.0f64; taps];
            let mut sum = 0.0;
            for (j, c) in row.iter_mut().enumerate() {
                // Tap j covers input index i0 + j - (half - 1); its offset
                // from the exact position is (j - half + 1) - frac.
                let d = (j as i64 - half + 1) as f64 - frac;
                *c = cutoff * sinc(cutoff * d) * kaiser(d, half as f64);
                sum += *c;
            }
            for c in row.iter_mut() {
                *c /= sum;
            }
            phases.push(row);
        }
        SincResampler {
            in_rate,
            out_rate,
            up,
            down,
            half,
            phases,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len as f64 * self.out_rate as f64 / self.in_rate as f64).round() as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let out_len = self.output_len(input.len());
        let mut out = Vec::with_capacity(out_len);
        let n_in = input.len() as i64;
        for n in 0..out_len as u64 {
            // Exact position: n * down / up input samples.
            let num = n * self.down;
            let i0 = (num / self.up) as i64;
            let phase = (num % self.up) as usize;
            let coeffs = &self.phases[phase];
            let first = i0 - (self.half - 1);
            let mut acc = 0.0f64;
            if first >= 0 && first + coeffs.len() as i64 <= n_in {
                let base = first as usize;
                for (j, &c) in coeffs.iter().enumerate() {
                    acc += c * input[base + j] as f64;
                }
            } else {
                for (j, &c) in coeffs.iter().enumerate() {
                    let idx = first + j as i64;
                    if idx >= 0 && idx < n_in {
                        acc += c * input[idx as usize] as f64;
                    }
                }
            }
            out.push(acc as f32);
        }
        out
    }
}

/// Resample to an arbitrary rate. Same-rate input is returned bit-identical.
pub fn resample(w: &Waveform, out_rate: u32) -> Result<Waveform> {
    w.ensure_finite()?;
    if w.sample_rate == out_rate {
        return Ok(w.clone());
    }
    if w.is_empty() {
        return Ok(Waveform::new(Vec::new(), out_rate));
    }
    let rs = SincResampler::new(w.sample_rate, out_rate);
    Ok(Waveform::new(rs.process(&w.samples), out_rate))
}

/// Resample to the pipeline rate of 16 kHz. Inputs are already mono
/// (multichannel sources are mixed down by arithmetic mean at WAV read).
pub fn resample_to_mono_16k(w: &Waveform) -> Result<Waveform> {
    resample(w, 16_000)
}
