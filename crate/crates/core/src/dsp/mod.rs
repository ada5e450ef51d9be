//! Time/frequency conversion shared by every other module.
//!
//! Frames start at sample 0 (no center padding), so for an input of `L`
//! samples the frame count is exactly `(L - window) / hop + 1`. The analysis
//! and synthesis windows are identical Hann windows sampled at half-integer
//! offsets, which keeps every window value strictly positive; combined with
//! per-sample overlap-add normalization this makes the round trip exact out
//! to the last covered sample.

pub mod resample;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub use resample::{resample, resample_to_mono_16k};

/// Mono sample buffer plus its rate. Amplitudes are nominally within ±1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Largest absolute sample value.
    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(())
    }

    /// In-place scalar gain.
    pub fn scale(&mut self, gain: f32) {
        for s in &mut self.samples {
            *s *= gain;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

/// STFT geometry. Defaults: 1024-point FFT, 1024-sample window (64 ms at
/// 16 kHz), 256-sample hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 1024,
            window_size: 1024,
            hop_size: 256,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size > self.fft_size {
            return Err(Error::validation(format!(
                "window_size {} must be in 1..=fft_size {}",
                self.window_size, self.fft_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::validation(format!(
                "hop_size {} must be in 1..=window_size {}",
                self.hop_size, self.window_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for an input of `source_length` samples, or None if the
    /// input is shorter than one window.
    pub fn frames_for(&self, source_length: usize) -> Option<usize> {
        if source_length < self.window_size {
            None
        } else {
            Some((source_length - self.window_size) / self.hop_size + 1)
        }
    }

    /// Analysis/synthesis window. Hann sampled at half-integer offsets:
    /// `w[n] = 0.5 - 0.5 cos(2π(n + 0.5)/N)`. Every value is strictly
    /// positive, so no input sample is annihilated at the frame edges and
    /// the overlap-add inverse is exact over the covered range.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size;
        (0..n)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                0.5 - 0.5 * phase.cos()
            })
            .collect()
    }
}

/// Complex STFT frames (frames x bins) with the geometry that produced them.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
    pub source_length: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }
}

/// Affine map between raw log-magnitudes and the model's input space:
/// the model sees `(value - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl Normalization {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Real log-magnitude spectrogram (frames x bins).
///
/// `data` holds raw (unnormalized) log-magnitudes; `normalization` records
/// the corpus statistics used to map into model space.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Array2<f64>,
    pub config: StftConfig,
    pub normalization: Normalization,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    /// Model-space view of the data.
    pub fn normalized(&self) -> Array2<f64> {
        self.data.mapv(|v| self.normalization.normalize(v))
    }

    /// Build a spectrogram from model-space values.
    pub fn from_normalized(
        norm_data: Array2<f64>,
        config: StftConfig,
        normalization: Normalization,
    ) -> Self {
        Spectrogram {
            data: norm_data.mapv(|v| normalization.denormalize(v)),
            config,
            normalization,
        }
    }
}

/// Forward STFT. Fails if the input is shorter than one window.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    w.ensure_finite()?;
    let frames = cfg.frames_for(w.len()).ok_or_else(|| {
        Error::validation(format!(
            "input of {} samples is shorter than one window ({})",
            w.len(),
            cfg.window_size
        ))
    })?;
    let bins = cfg.bins();
    let window = cfg.window();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut data = Array2::zeros((frames, bins));
    for t in 0..frames {
        let start = t * cfg.hop_size;
        for i in 0..cfg.fft_size {
            let v = if i < cfg.window_size {
                w.samples[start + i] as f64 * window[i]
            } else {
                0.0
            };
            buf[i] = Complex64::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            data[[t, k]] = buf[k];
        }
    }

    Ok(ComplexSpectrogram {
        data,
        config: *cfg,
        source_length: w.len(),
        sample_rate: w.sample_rate,
    })
}

/// Element-wise `ln(max(|c|, floor))`. The returned spectrogram carries the
/// identity normalization; corpus statistics are attached by the caller.
pub fn log_magnitude(c: &ComplexSpectrogram, floor: f64) -> Result<Spectrogram> {
    if floor <= 0.0 {
        return Err(Error::validation(format!("log floor must be > 0, got {floor}")));
    }
    let data = c.data.mapv(|z| z.norm().max(floor).ln());
    Ok(Spectrogram {
        data,
        config: c.config,
        normalization: Normalization::default(),
    })
}

/// Default magnitude floor used ahead of the log.
pub const LOG_FLOOR: f64 = 1e-5;

/// Inverse STFT taking magnitudes from `mag` (as `exp(data)`) and phase
/// angles from `phase_source`. Weighted overlap-add with per-sample
/// normalization by the summed squared window; samples beyond the last
/// frame's coverage come out zero.
pub fn istft_with_phase(mag: &Spectrogram, phase_source: &ComplexSpectrogram) -> Result<Waveform> {
    if mag.config != phase_source.config {
        return Err(Error::validation(
            "magnitude and phase spectrograms have different STFT configs".to_string(),
        ));
    }
    if mag.data.dim() != phase_source.data.dim() {
        return Err(Error::validation(format!(
            "shape mismatch: magnitude {:?} vs phase {:?}",
            mag.data.dim(),
            phase_source.data.dim()
        )));
    }
    let cfg = &mag.config;
    let frames = mag.frames();
    let bins = mag.bins();
    let window = cfg.window();

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];

    let covered = if frames == 0 {
        0
    } else {
        (frames - 1) * cfg.hop_size + cfg.window_size
    };
    let mut acc = vec![0.0f64; covered.max(phase_source.source_length)];
    let mut wsum = vec![0.0f64; acc.len()];

    for t in 0..frames {
        // Rebuild the full hermitian spectrum from the half-spectrum.
        for k in 0..bins {
            let magnitude = mag.data[[t, k]].exp();
            let phase = phase_source.data[[t, k]].arg();
            buf[k] = Complex64::from_polar(magnitude, phase);
        }
        for k in bins..cfg.fft_size {
            buf[k] = buf[cfg.fft_size - k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);

        let start = t * cfg.hop_size;
        let inv_n = 1.0 / cfg.fft_size as f64;
        for i in 0..cfg.window_size {
            let sample = buf[i].re * inv_n;
            acc[start + i] += sample * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }

    let mut out = vec![0.0f32; phase_source.source_length];
    for (i, o) in out.iter_mut().enumerate() {
        if i < acc.len() && wsum[i] > 0.0 {
            *o = (acc[i] / wsum[i]) as f32;
        }
    }
    Ok(Waveform::new(out, phase_source.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len)
            .map(|_| rng.random_range(-0.5f32..0.5f32))
            .collect();
        Waveform::new(samples, 16_000)
    }

    /// SI-SDR restricted to plain (non scale-invariant would do too) use in
    /// round-trip checks; the metrics module has the full definition.
    fn snr_db(reference: &[f32], estimate: &[f32]) -> f64 {
        let mut sig = 0.0f64;
        let mut err = 0.0f64;
        for (r, e) in reference.iter().zip(estimate) {
            sig += (*r as f64) * (*r as f64);
            err += (*r as f64 - *e as f64).powi(2);
        }
        10.0 * (sig / err.max(1e-300)).log10()
    }

    #[test]
    fn frame_count_matches_formula() {
        let cfg = StftConfig::default();
        // 131072 samples = 8.192 s at 16 kHz.
        assert_eq!(cfg.frames_for(131_072), Some((131_072 - 1024) / 256 + 1));
        assert_eq!(cfg.frames_for(131_072), Some(509));
        assert_eq!(cfg.bins(), 513);
        let spec = stft(&noise(131_072, 1), &cfg).unwrap();
        assert_eq!(spec.frames(), 509);
        assert_eq!(spec.bins(), 513);
    }

    #[test]
    fn stft_of_zeros_is_zero() {
        let cfg = StftConfig::default();
        let spec = stft(&Waveform::zeros(4096, 16_000), &cfg).unwrap();
        assert!(spec.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn stft_rejects_short_input() {
        let cfg = StftConfig::default();
        assert!(stft(&Waveform::zeros(1023, 16_000), &cfg).is_err());
    }

    #[test]
    fn impulse_at_zero_gives_flat_frame() {
        // DFT of w[0]·δ[0] is constant w[0] across bins.
        let cfg = StftConfig::default();
        let mut w = Waveform::zeros(2048, 16_000);
        w.samples[0] = 1.0;
        let spec = stft(&w, &cfg).unwrap();
        let w0 = cfg.window()[0];
        for k in 0..spec.bins() {
            assert!(
                (spec.data[[0, k]].norm() - w0).abs() < 1e-12,
                "bin {k}: {} vs {w0}",
                spec.data[[0, k]].norm()
            );
        }
    }

    #[test]
    fn log_magnitude_values() {
        let cfg = StftConfig::default();
        let mut c = ComplexSpectrogram {
            data: Array2::from_elem((3, cfg.bins()), Complex64::new(1.0, 0.0)),
            config: cfg,
            source_length: 1024,
            sample_rate: 16_000,
        };
        let s = log_magnitude(&c, 1e-5).unwrap();
        assert!(s.data.iter().all(|&v| v.abs() < 1e-15));

        c.data.fill(Complex64::new(0.0, 0.0));
        let s = log_magnitude(&c, 1e-5).unwrap();
        assert!(s.data.iter().all(|&v| (v - (1e-5f64).ln()).abs() < 1e-12));

        c.data.fill(Complex64::new(std::f64::consts::E.powi(2), 0.0));
        let s = log_magnitude(&c, 1e-5).unwrap();
        assert!(s.data.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_exceeds_50_db() {
        let cfg = StftConfig::default();
        for seed in 0..3 {
            let w = noise(131_072, seed);
            let c = stft(&w, &cfg).unwrap();
            let m = log_magnitude(&c, LOG_FLOOR).unwrap();
            let back = istft_with_phase(&m, &c).unwrap();
            assert_eq!(back.len(), w.len());
            let snr = snr_db(&w.samples, &back.samples);
            assert!(snr > 50.0, "seed {seed}: round-trip SNR {snr} dB");
        }
    }

    #[test]
    fn all_floor_magnitude_is_near_silent() {
        let cfg = StftConfig::default();
        let w = noise(32_768, 7);
        let c = stft(&w, &cfg).unwrap();
        let mut m = log_magnitude(&c, LOG_FLOOR).unwrap();
        m.data.fill(LOG_FLOOR.ln());
        let out = istft_with_phase(&m, &c).unwrap();
        // The first/last window carries the usual overlap-add edge gain
        // (the same 1/w normalization that makes the round trip exact), so
        // floor propagation is asserted over the interior.
        let interior = &out.samples[cfg.window_size..out.len() - cfg.window_size];
        let peak = interior.iter().fold(0.0f32, |m, &s| m.max(s.abs()));
        assert!(peak < 1e-3, "interior peak {peak}");
    }

    #[test]
    fn tail_beyond_frames_is_zero_padded() {
        let cfg = StftConfig::default();
        // 1024 + 100: a single frame; the last 100 samples are uncovered.
        let w = noise(1124, 9);
        let c = stft(&w, &cfg).unwrap();
        assert_eq!(c.frames(), 1);
        let m = log_magnitude(&c, LOG_FLOOR).unwrap();
        let out = istft_with_phase(&m, &c).unwrap();
        assert_eq!(out.len(), 1124);
        assert!(out.samples[1024..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn istft_rejects_shape_mismatch() {
        let cfg = StftConfig::default();
        let w = noise(4096, 3);
        let c = stft(&w, &cfg).unwrap();
        let m = log_magnitude(&c, LOG_FLOOR).unwrap();
        let short = ComplexSpectrogram {
            data: c.data.slice(ndarray::s![..c.frames() - 1, ..]).to_owned(),
            config: cfg,
            source_length: w.len(),
            sample_rate: 16_000,
        };
        assert!(istft_with_phase(&m, &short).is_err());
    }

    #[test]
    fn stft_energy_tracks_input_energy() {
        // Windowed-frame energy over white noise should be proportional to
        // the input energy, with small variance across realizations.
        let cfg = StftConfig::default();
        let mut ratios = Vec::new();
        for seed in 0..10 {
            let w = noise(131_072, 100 + seed);
            let c = stft(&w, &cfg).unwrap();
            let spec_energy: f64 = c.data.iter().map(|z| z.norm_sqr()).sum();
            let sig_energy: f64 = w.samples.iter().map(|&s| (s as f64).powi(2)).sum();
            ratios.push(spec_energy / sig_energy);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        for r in &ratios {
            assert!(
                (r - mean).abs() / mean < 0.01,
                "ratio {r} deviates from mean {mean} by more than 1%"
            );
        }
    }
}
