//! `synth` command: synthesize a dataset of mastered samples with summary
//! statistics.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use cassforge_core::error::{Error, Result};
use cassforge_core::mixer::{synthesize_sample, MixRecipe, StemPools, SynthesizedSample};
use cassforge_core::StemKind;

use crate::dataset::{sample_dir_name, write_sample};
use crate::pools::load_pools;

#[derive(Debug, Clone, Serialize)]
pub struct SynthArgs {
    pub pools_path: PathBuf,
    pub recipe: MixRecipe,
    pub out_dir: PathBuf,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    fn from_values(values: &[f64]) -> Stats {
        if values.is_empty() {
            return Stats::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stats {
            mean,
            std: var.sqrt(),
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StemSummary {
    pub loudness_lkfs: Stats,
    pub segment_count: Stats,
    pub segment_duration_s: Stats,
}

/// Dataset-level mastering statistics, mirroring the loudness / true-peak /
/// segment distributions reported for the synthesis pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub count: usize,
    pub mixture_loudness_lkfs: Stats,
    pub mixture_true_peak_dbtp: Stats,
    pub peak_limited_samples: usize,
    pub dx: StemSummary,
    pub fx: StemSummary,
    pub mx: StemSummary,
}

fn stem_summary(samples: &[SynthesizedSample], stem: StemKind) -> StemSummary {
    let mut loudness = Vec::new();
    let mut counts = Vec::new();
    let mut durations = Vec::new();
    for s in samples {
        if let Some(l) = s.mastering.stem_loudness_lkfs.get(stem) {
            loudness.push(l);
        }
        let entries: Vec<_> = s
            .stems
            .manifest
            .iter()
            .filter(|e| e.stem == stem)
            .collect();
        counts.push(entries.len() as f64);
        durations.extend(entries.iter().map(|e| e.length_s));
    }
    StemSummary {
        loudness_lkfs: Stats::from_values(&loudness),
        segment_count: Stats::from_values(&counts),
        segment_duration_s: Stats::from_values(&durations),
    }
}

/// Synthesize `count` samples; sample `i` uses `rng_seed = seed + i`.
/// Returns the summary. Samples are independent, so synthesis is parallel.
pub fn run_synth_with_pools(
    pools: &StemPools,
    recipe: &MixRecipe,
    out_dir: &std::path::Path,
    count: usize,
    seed: u64,
) -> Result<SynthSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples: Vec<SynthesizedSample> = crate::with_thread_pool(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut r = recipe.clone();
                r.rng_seed = seed.wrapping_add(i as u64);
                let sample = synthesize_sample(pools, &r).map_err(|e| {
                    Error::validation(format!("sample {i}: {e}"))
                })?;
                write_sample(out_dir.join(sample_dir_name(i)), &sample)?;
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let loudness: Vec<f64> = samples
        .iter()
        .map(|s| s.mastering.mixture_loudness_lkfs)
        .collect();
    let true_peak: Vec<f64> = samples
        .iter()
        .map(|s| s.mastering.mixture_true_peak_dbtp)
        .collect();
    let summary = SynthSummary {
        count,
        mixture_loudness_lkfs: Stats::from_values(&loudness),
        mixture_true_peak_dbtp: Stats::from_values(&true_peak),
        peak_limited_samples: samples.iter().filter(|s| s.mastering.peak_limited).count(),
        dx: stem_summary(&samples, StemKind::Dx),
        fx: stem_summary(&samples, StemKind::Fx),
        mx: stem_summary(&samples, StemKind::Mx),
    };
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthSummary> {
    args.recipe.validate()?;
    let pools = load_pools(&args.pools_path)?;
    let summary =
        run_synth_with_pools(&pools, &args.recipe, &args.out_dir, args.count, args.seed)?;
    crate::write_run_config(&args.out_dir, args)?;
    Ok(summary)
}
