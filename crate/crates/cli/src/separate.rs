//! `separate` command: mixture WAV in, three stem WAVs out, with an
//! optional sampling-step sweep.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cassforge_core::conditioning::read_fseq;
use cassforge_core::dsp::{
    istft_with_phase, log_magnitude, resample_to_mono_16k, stft, ComplexSpectrogram, Spectrogram,
    Waveform, LOG_FLOOR,
};
use cassforge_core::error::{Error, Result};
use cassforge_core::flow::euler_sample;
use cassforge_core::metrics::si_sdri;
use cassforge_core::vfnet::{load_checkpoint, CheckpointMeta, ModelParams};
use cassforge_core::wav::{read_wav, write_wav_f32};
use cassforge_core::StemKind;

#[derive(Debug, Clone, Serialize)]
pub struct SeparateArgs {
    pub mix_path: PathBuf,
    pub facial_path: Option<PathBuf>,
    pub scene_path: Option<PathBuf>,
    pub checkpoint: PathBuf,
    /// Sampling step counts; one output directory per entry when several.
    pub steps: Vec<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Reference stem directory ({dx,fx,mx}.wav) for sweep metrics.
    pub ref_dir: Option<PathBuf>,
}

/// Per-N sweep row (SI-SDRi only when references are supplied).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub steps: usize,
    pub si_sdri_dx: Option<f64>,
    pub si_sdri_fx: Option<f64>,
    pub si_sdri_mx: Option<f64>,
    pub si_sdri_mean: Option<f64>,
}

pub struct SeparateOutcome {
    pub rows: Vec<SweepRow>,
    /// Directory per step count, in `steps` order.
    pub step_dirs: Vec<PathBuf>,
}

fn prepared_mixture(
    mix_path: &Path,
    meta: &CheckpointMeta,
) -> Result<(Waveform, Spectrogram, ComplexSpectrogram)> {
    let raw = read_wav(mix_path)?;
    let mix = resample_to_mono_16k(&raw)?;
    let complex = stft(&mix, &meta.stft)?;
    let mut mag = log_magnitude(&complex, LOG_FLOOR)?;
    mag.normalization = meta.normalization;
    Ok((mix, mag, complex))
}

/// Separate with an already-loaded model. Writes `{dx,fx,mx}.wav` into
/// `out_dir` (single step count) or `out_dir/steps_N/` (sweep).
pub fn separate_with_model(
    model: &ModelParams,
    meta: &CheckpointMeta,
    mix_path: &Path,
    features: Option<(&Path, &Path)>,
    steps: &[usize],
    seed: u64,
    out_dir: &Path,
    ref_dir: Option<&Path>,
) -> Result<SeparateOutcome> {
    if steps.is_empty() {
        return Err(Error::validation("need at least one step count".to_string()));
    }
    let (mix, mag, complex) = prepared_mixture(mix_path, meta)?;
    let loaded_features = match features {
        Some((f, s)) => Some((read_fseq(f)?, read_fseq(s)?)),
        None => None,
    };

    let references = match ref_dir {
        Some(dir) => Some([
            read_wav(dir.join("dx.wav"))?,
            read_wav(dir.join("fx.wav"))?,
            read_wav(dir.join("mx.wav"))?,
        ]),
        None => None,
    };

    let mut rows = Vec::with_capacity(steps.len());
    let mut step_dirs = Vec::with_capacity(steps.len());
    for &n in steps {
        if n == 0 {
            return Err(Error::validation("sampling steps must be >= 1".to_string()));
        }
        // Seed depends on (seed, N) only, so reruns are bit-identical.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let specs = euler_sample(
            &mag,
            loaded_features.as_ref().map(|(f, s)| (f, s)),
            model,
            n,
            &mut rng,
        )?;

        let dir = if steps.len() == 1 {
            out_dir.to_path_buf()
        } else {
            out_dir.join(format!("steps_{n}"))
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut estimates = Vec::with_capacity(3);
        for (spec, stem) in specs.iter().zip(StemKind::ALL) {
            let wave = istft_with_phase(spec, &complex)?;
            write_wav_f32(dir.join(format!("{}.wav", stem.name())), &wave)?;
            estimates.push(wave);
        }

        let row = match &references {
            Some(refs) => {
                let mut vals = [0.0f64; 3];
                for i in 0..3 {
                    vals[i] = si_sdri(&refs[i], &estimates[i], &mix)?;
                }
                SweepRow {
                    steps: n,
                    si_sdri_dx: Some(vals[0]),
                    si_sdri_fx: Some(vals[1]),
                    si_sdri_mx: Some(vals[2]),
                    si_sdri_mean: Some(vals.iter().sum::<f64>() / 3.0),
                }
            }
            None => SweepRow {
                steps: n,
                si_sdri_dx: None,
                si_sdri_fx: None,
                si_sdri_mx: None,
                si_sdri_mean: None,
            },
        };
        rows.push(row);
        step_dirs.push(dir);
    }

    if steps.len() > 1 || ref_dir.is_some() {
        let sweep_path = out_dir.join("sweep.csv");
        let mut w = csv::Writer::from_path(&sweep_path)?;
        w.write_record(["steps", "si_sdri_dx", "si_sdri_fx", "si_sdri_mx", "si_sdri_mean"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in &rows {
            w.write_record([
                row.steps.to_string(),
                fmt(row.si_sdri_dx),
                fmt(row.si_sdri_fx),
                fmt(row.si_sdri_mx),
                fmt(row.si_sdri_mean),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&sweep_path, e))?;
    }

    Ok(SeparateOutcome { rows, step_dirs })
}

pub fn cmd_separate(args: &SeparateArgs) -> Result<SeparateOutcome> {
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let features = match (&args.facial_path, &args.scene_path) {
        (Some(f), Some(s)) => Some((f.as_path(), s.as_path())),
        (None, None) => None,
        _ => {
            return Err(Error::validation(
                "supply both --facial and --scene, or neither (audio-only)".to_string(),
            ))
        }
    };
    let outcome = separate_with_model(
        &model,
        &meta,
        &args.mix_path,
        features,
        &args.steps,
        args.seed,
        &args.out_dir,
        args.ref_dir.as_deref(),
    )?;
    crate::write_run_config(&args.out_dir, args)?;
    Ok(outcome)
}
