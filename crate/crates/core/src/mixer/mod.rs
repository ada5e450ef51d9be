//! Synthetic sample construction: per-stem track assembly, loudness
//! mastering to cinematic targets, additive mixing, and alignment manifests.

pub mod loudness;
pub mod recipe;
pub mod track;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{FeatureSequence, StreamKind};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::StemKind;

pub use loudness::{measure_loudness, measure_true_peak, SILENCE_LKFS};
pub use recipe::{CountDistribution, DurationDistribution, MixRecipe, PerStem};
pub use track::{build_stem_track, ManifestEntry, TrackPlan, SAMPLE_RATE};

/// One source clip: mono 16 kHz audio plus an optional aligned feature
/// sequence (facial for DX clips, scene for FX clips).
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub audio: Waveform,
    pub features: Option<FeatureSequence>,
}

/// All clips available for one stem.
#[derive(Debug, Clone)]
pub struct ClipPool {
    pub stem_kind: StemKind,
    pub clips: Vec<Clip>,
}

impl ClipPool {
    pub fn new(stem_kind: StemKind, clips: Vec<Clip>) -> Self {
        ClipPool { stem_kind, clips }
    }

    /// Drop clips whose ids appear in `exclude` (external contamination
    /// screening is expressed as an accept/reject list per clip id).
    pub fn retain_accepted(&mut self, exclude: &[String]) {
        self.clips.retain(|c| !exclude.iter().any(|e| e == &c.id));
    }

    pub fn validate(&self) -> Result<()> {
        for clip in &self.clips {
            if clip.audio.sample_rate != SAMPLE_RATE {
                return Err(Error::validation(format!(
                    "clip `{}` is {} Hz; pools must be mono 16 kHz",
                    clip.id, clip.audio.sample_rate
                )));
            }
            if self.stem_kind == StemKind::Mx && clip.features.is_some() {
                return Err(Error::validation(format!(
                    "music clip `{}` carries features; the MX stream has no visual input",
                    clip.id
                )));
            }
        }
        // Feature-carrying clips must agree on (dim, rate).
        let mut shape: Option<(usize, f64)> = None;
        for clip in &self.clips {
            if let Some(f) = &clip.features {
                match shape {
                    None => shape = Some((f.dim(), f.frame_rate)),
                    Some((d, r)) => {
                        if f.dim() != d || (f.frame_rate - r).abs() > 1e-9 {
                            return Err(Error::validation(format!(
                                "clip `{}` features ({}, {} fps) disagree with pool ({d}, {r} fps)",
                                clip.id,
                                f.dim(),
                                f.frame_rate
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn feature_shape(&self) -> Option<(usize, f64)> {
        self.clips
            .iter()
            .find_map(|c| c.features.as_ref().map(|f| (f.dim(), f.frame_rate)))
    }
}

/// The three pools a synthesis run draws from.
#[derive(Debug, Clone)]
pub struct StemPools {
    pub dx: ClipPool,
    pub fx: ClipPool,
    pub mx: ClipPool,
}

impl StemPools {
    pub fn validate(&self) -> Result<()> {
        for (pool, stem) in [
            (&self.dx, StemKind::Dx),
            (&self.fx, StemKind::Fx),
            (&self.mx, StemKind::Mx),
        ] {
            if pool.stem_kind != stem {
                return Err(Error::validation(format!(
                    "pool in {} slot is tagged {}",
                    stem, pool.stem_kind
                )));
            }
            pool.validate()?;
        }
        Ok(())
    }
}

/// Ground-truth unit: three aligned stems plus their exact sum.
#[derive(Debug, Clone)]
pub struct StemSet {
    pub dx: Waveform,
    pub fx: Waveform,
    pub mx: Waveform,
    pub mixture: Waveform,
    /// Segment manifest, dx rows first, then fx, then mx.
    pub manifest: Vec<ManifestEntry>,
}

impl StemSet {
    pub fn stem(&self, kind: StemKind) -> &Waveform {
        match kind {
            StemKind::Dx => &self.dx,
            StemKind::Fx => &self.fx,
            StemKind::Mx => &self.mx,
        }
    }
}

/// Mastering metadata recorded alongside each synthesized sample.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MasteringInfo {
    pub mixture_loudness_lkfs: f64,
    pub mixture_true_peak_dbtp: f64,
    pub peak_limited: bool,
    /// Per-stem loudness after mastering; None for silent stems.
    pub stem_loudness_lkfs: PerStem<Option<f64>>,
}

/// A fully synthesized sample: stems, mixture, manifests, and the two
/// track-level feature streams (when the pools carry features).
#[derive(Debug, Clone)]
pub struct SynthesizedSample {
    pub stems: StemSet,
    pub facial: Option<FeatureSequence>,
    pub scene: Option<FeatureSequence>,
    pub mastering: MasteringInfo,
}

/// Result of [`normalize_to_target`].
#[derive(Debug, Clone, Copy)]
pub struct NormalizeInfo {
    pub gain: f64,
    pub achieved_loudness_lkfs: f64,
    /// Not measured when the ceiling is infinite.
    pub true_peak_dbtp: Option<f64>,
    pub peak_limited: bool,
}

/// Scale a waveform so its integrated loudness hits `target_lkfs` (within
/// 0.1 LU), then back the gain off if the true peak would exceed
/// `ceiling_dbtp` (loudness then undershoots; both are reported).
pub fn normalize_to_target(
    w: &Waveform,
    target_lkfs: f64,
    ceiling_dbtp: f64,
) -> Result<(Waveform, NormalizeInfo)> {
    let mut out = w.clone();
    let mut gain = 1.0f64;

    let mut loudness = measure_loudness(&out)?;
    if loudness == SILENCE_LKFS {
        return Err(Error::validation(
            "cannot normalize silent input (loudness is -inf)".to_string(),
        ));
    }
    // Gating decisions can shift with gain, so iterate.
    for _ in 0..4 {
        if (loudness - target_lkfs).abs() <= 0.05 {
            break;
        }
        let step = 10f64.powf((target_lkfs - loudness) / 20.0);
        gain *= step;
        out.scale(step as f32);
        loudness = measure_loudness(&out)?;
    }

    let mut peak_limited = false;
    let mut true_peak = None;
    if ceiling_dbtp.is_finite() {
        let mut tp = measure_true_peak(&out)?;
        if tp > ceiling_dbtp {
            let step = 10f64.powf((ceiling_dbtp - tp) / 20.0);
            gain *= step;
            out.scale(step as f32);
            peak_limited = true;
            tp = measure_true_peak(&out)?;
            loudness = measure_loudness(&out)?;
        }
        true_peak = Some(tp);
    }

    Ok((
        out,
        NormalizeInfo {
            gain,
            achieved_loudness_lkfs: loudness,
            true_peak_dbtp: true_peak,
            peak_limited,
        },
    ))
}

fn track_is_silent(w: &Waveform) -> bool {
    w.samples.iter().all(|&s| s == 0.0)
}

/// Exact sample-wise sum in fixed order dx -> fx -> mx.
fn mix_down(dx: &Waveform, fx: &Waveform, mx: &Waveform) -> Waveform {
    let samples = dx
        .samples
        .iter()
        .zip(&fx.samples)
        .zip(&mx.samples)
        .map(|((&a, &b), &c)| a + b + c)
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

/// Build the track-level feature stream for one stem from its plan: each
/// segment's clip features are cropped to the segment's source range and
/// written at its placement; rows outside any segment stay zero.
fn assemble_feature_track(
    plan: &TrackPlan,
    pool: &ClipPool,
    duration_s: f64,
    kind: StreamKind,
) -> Option<FeatureSequence> {
    let (dim, rate) = pool.feature_shape()?;
    let rows = (duration_s * rate).ceil() as usize;
    let mut out = FeatureSequence::zeros(rows, dim, rate, kind);
    for seg in &plan.segments {
        let clip = &pool.clips[seg.clip_index];
        let Some(features) = &clip.features else {
            continue;
        };
        let src_start_s = seg.source_start as f64 / SAMPLE_RATE as f64;
        let len_s = seg.length as f64 / SAMPLE_RATE as f64;
        let placed_s = seg.placed_start as f64 / SAMPLE_RATE as f64;
        let src0 = (src_start_s * rate).floor() as usize;
        let src1 = (((src_start_s + len_s) * rate).ceil() as usize).min(features.frames());
        let dst0 = (placed_s * rate).floor() as usize;
        for (offset, src_row) in (src0..src1).enumerate() {
            let dst = dst0 + offset;
            if dst >= rows {
                break;
            }
            for d in 0..dim {
                out.data[[dst, d]] = features.data[[src_row, d]];
            }
        }
    }
    Some(out)
}

/// Synthesize one sample: build three stem tracks, master each stem to the
/// target plus its offset, mix by addition, then rescale the whole chain so
/// the mixture meets the loudness target and true-peak ceiling.
pub fn synthesize_sample(pools: &StemPools, recipe: &MixRecipe) -> Result<SynthesizedSample> {
    pools.validate()?;
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.rng_seed);

    let (mut dx, manifest_dx, plan_dx) = build_stem_track(&pools.dx, recipe, &mut rng)?;
    let (mut fx, manifest_fx, plan_fx) = build_stem_track(&pools.fx, recipe, &mut rng)?;
    let (mut mx, manifest_mx, plan_mx) = build_stem_track(&pools.mx, recipe, &mut rng)?;
    let _ = &plan_mx;

    // Per-stem mastering toward target + offset (no per-stem peak ceiling;
    // the ceiling applies to the mixture chain).
    for (track, stem) in [
        (&mut dx, StemKind::Dx),
        (&mut fx, StemKind::Fx),
        (&mut mx, StemKind::Mx),
    ] {
        if track_is_silent(track) {
            continue;
        }
        let stem_target = recipe.target_loudness + recipe.stem_offsets.get(stem);
        let (normalized, _) = normalize_to_target(track, stem_target, f64::INFINITY)?;
        *track = normalized;
    }

    // Joint rescale of the whole chain so the mixture hits the target.
    let mut mixture = mix_down(&dx, &fx, &mx);
    let mut loudness = measure_loudness(&mixture)?;
    if loudness == SILENCE_LKFS {
        return Err(Error::validation(
            "synthesized mixture is silent; check pools and recipe".to_string(),
        ));
    }
    for _ in 0..4 {
        if (loudness - recipe.target_loudness).abs() <= 0.05 {
            break;
        }
        let step = 10f64.powf((recipe.target_loudness - loudness) / 20.0) as f32;
        dx.scale(step);
        fx.scale(step);
        mx.scale(step);
        mixture = mix_down(&dx, &fx, &mx);
        loudness = measure_loudness(&mixture)?;
    }

    let mut peak_limited = false;
    let mut true_peak = measure_true_peak(&mixture)?;
    if true_peak > recipe.true_peak_ceiling {
        let step = 10f64.powf((recipe.true_peak_ceiling - true_peak) / 20.0) as f32;
        dx.scale(step);
        fx.scale(step);
        mx.scale(step);
        mixture = mix_down(&dx, &fx, &mx);
        peak_limited = true;
        true_peak = measure_true_peak(&mixture)?;
        loudness = measure_loudness(&mixture)?;
    }

    let stem_loudness = PerStem {
        dx: if track_is_silent(&dx) {
            None
        } else {
            Some(measure_loudness(&dx)?)
        },
        fx: if track_is_silent(&fx) {
            None
        } else {
            Some(measure_loudness(&fx)?)
        },
        mx: if track_is_silent(&mx) {
            None
        } else {
            Some(measure_loudness(&mx)?)
        },
    };

    let facial = assemble_feature_track(&plan_dx, &pools.dx, recipe.duration, StreamKind::Facial);
    let scene = assemble_feature_track(&plan_fx, &pools.fx, recipe.duration, StreamKind::Scene);

    let mut manifest = manifest_dx;
    manifest.extend(manifest_fx);
    manifest.extend(manifest_mx);

    Ok(SynthesizedSample {
        stems: StemSet {
            dx,
            fx,
            mx,
            mixture,
            manifest,
        },
        facial,
        scene,
        mastering: MasteringInfo {
            mixture_loudness_lkfs: loudness,
            mixture_true_peak_dbtp: true_peak,
            peak_limited,
            stem_loudness_lkfs: stem_loudness,
        },
    })
}

/// Write `manifest.csv` with header `stem,clip_id,source_start_s,placed_start_s,length_s`.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["stem", "clip_id", "source_start_s", "placed_start_s", "length_s"])?;
    for e in entries {
        w.write_record([
            e.stem.name().to_string(),
            e.clip_id.clone(),
            format!("{:.6}", e.source_start_s),
            format!("{:.6}", e.placed_start_s),
            format!("{:.6}", e.length_s),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::validation(format!(
                "manifest row has {} fields, expected 5",
                record.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::validation(format!("bad manifest number `{s}`: {e}")))
        };
        out.push(ManifestEntry {
            stem: record[0].parse()?,
            clip_id: record[1].to_string(),
            source_start_s: parse(&record[2])?,
            placed_start_s: parse(&record[3])?,
            length_s: parse(&record[4])?,
        });
    }
    Ok(out)
}
