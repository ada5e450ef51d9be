//! Training loop: corpus statistics, window cropping, warm-up and full
//! phases, per-step deterministic seeding, and loss logging.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cassforge_core::conditioning::{Activation, FeatureSequence, FusionParams};
use cassforge_core::dsp::{log_magnitude, stft, Normalization, Spectrogram, StftConfig, LOG_FLOOR};
use cassforge_core::error::{Error, Result};
use cassforge_core::flow::{loss_and_grads, sample_timestep, TrainBatchItem, TrainMode};
use cassforge_core::vfnet::{
    adam_step, load_checkpoint, save_checkpoint, AdamHyper, AdamState, CheckpointMeta,
    ModelParams, VfnConfig, VfnParams,
};

use crate::dataset::{Dataset, LoadedSample};

/// Training phase. Warm-up trains the audio path from scratch; full starts
/// from a warm-up checkpoint with conditioning entering through the
/// zero-initialized gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Full,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "warmup" => Ok(Phase::Warmup),
            "full" => Ok(Phase::Full),
            other => Err(Error::validation(format!(
                "unknown phase `{other}` (expected warmup or full)"
            ))),
        }
    }
}

/// Model geometry and optimization settings for a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stft: StftConfig,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub attn_dim: usize,
    pub cond_dim: usize,
    pub fusion_shared_dim: usize,
    /// Training crop length in seconds.
    pub crop_seconds: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stft: StftConfig::default(),
            hidden: 256,
            time_embed_dim: 32,
            attn_dim: 32,
            cond_dim: 64,
            fusion_shared_dim: 64,
            crop_seconds: 8.192,
            lr: 1e-4,
            batch: 1,
            steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Geometry scaled for the desk-size toy problem (a few thousand
    /// parameters).
    pub fn toy() -> Self {
        TrainConfig {
            stft: StftConfig {
                fft_size: 32,
                window_size: 32,
                hop_size: 16,
                window_kind: cassforge_core::dsp::WindowKind::Hann,
            },
            hidden: 24,
            time_embed_dim: 12,
            attn_dim: 8,
            cond_dim: 8,
            fusion_shared_dim: 8,
            crop_seconds: 0.512,
            lr: 2e-3,
            batch: 4,
            steps: 1000,
            seed: 0,
        }
    }

    pub fn vfn_config(&self) -> VfnConfig {
        VfnConfig {
            bins: self.stft.bins(),
            hidden: self.hidden,
            time_embed_dim: self.time_embed_dim,
            attn_dim: self.attn_dim,
            cond_dim: self.cond_dim,
            gate_hidden: 6,
            activation: Activation::Gelu,
        }
    }
}

/// Pooled mean/std of log-magnitudes over mixture and stems; scale is four
/// standard deviations so normalized values sit roughly in [-1, 1].
pub fn compute_normalization(dataset: &Dataset, stft_cfg: &StftConfig) -> Result<Normalization> {
    let mut count = 0.0f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let probe = dataset.samples.len().min(16);
    for sample in dataset.samples.iter().take(probe) {
        for w in [&sample.mixture, &sample.dx, &sample.fx, &sample.mx] {
            let c = stft(w, stft_cfg)?;
            let m = log_magnitude(&c, LOG_FLOOR)?;
            for &v in m.data.iter() {
                count += 1.0;
                sum += v;
                sum_sq += v * v;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::validation("empty dataset for normalization".to_string()));
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(1e-12);
    Ok(Normalization {
        offset: mean,
        scale: 4.0 * var.sqrt(),
    })
}

fn crop_waveform(
    w: &cassforge_core::dsp::Waveform,
    start: usize,
    len: usize,
) -> cassforge_core::dsp::Waveform {
    cassforge_core::dsp::Waveform::new(
        w.samples[start..start + len].to_vec(),
        w.sample_rate,
    )
}

fn crop_features(f: &FeatureSequence, start_s: f64, dur_s: f64) -> FeatureSequence {
    let r0 = (start_s * f.frame_rate).floor() as usize;
    let r1 = ((start_s + dur_s) * f.frame_rate).ceil() as usize;
    f.crop_rows(r0, r1.max(r0 + 1))
}

fn spec_with_norm(
    w: &cassforge_core::dsp::Waveform,
    cfg: &StftConfig,
    norm: Normalization,
) -> Result<Spectrogram> {
    let c = stft(w, cfg)?;
    let mut m = log_magnitude(&c, LOG_FLOOR)?;
    m.normalization = norm;
    Ok(m)
}

/// Build a training item from a random window of `sample`.
pub fn make_item(
    sample: &LoadedSample,
    cfg: &TrainConfig,
    norm: Normalization,
    rng: &mut impl Rng,
) -> Result<TrainBatchItem> {
    let sr = sample.mixture.sample_rate as f64;
    let crop_len = (cfg.crop_seconds * sr).round() as usize;
    if sample.mixture.len() < crop_len {
        return Err(Error::validation(format!(
            "sample {} shorter than crop window",
            sample.dir.display()
        )));
    }
    let start = rng.random_range(0..=sample.mixture.len() - crop_len);
    let start_s = start as f64 / sr;

    let s_a = spec_with_norm(&crop_waveform(&sample.mixture, start, crop_len), &cfg.stft, norm)?;
    let targets = [
        spec_with_norm(&crop_waveform(&sample.dx, start, crop_len), &cfg.stft, norm)?,
        spec_with_norm(&crop_waveform(&sample.fx, start, crop_len), &cfg.stft, norm)?,
        spec_with_norm(&crop_waveform(&sample.mx, start, crop_len), &cfg.stft, norm)?,
    ];
    let features = match (&sample.facial, &sample.scene) {
        (Some(f), Some(s)) => Some((
            crop_features(f, start_s, cfg.crop_seconds),
            crop_features(s, start_s, cfg.crop_seconds),
        )),
        _ => None,
    };
    Ok(TrainBatchItem {
        s_a,
        targets,
        features,
    })
}

/// Per-step RNG derived from the run seed and the global step index, so a
/// resumed run draws exactly what the uninterrupted run would have drawn.
pub fn step_rng(seed: u64, global_step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (global_step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

/// Freshly initialized model for a training configuration.
pub fn init_model(cfg: &TrainConfig, facial_dim: usize, scene_dim: usize) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6D0D_97C5);
    let fusion = FusionParams::new(
        &mut rng,
        facial_dim,
        scene_dim,
        cfg.fusion_shared_dim,
        cfg.cond_dim,
    );
    let vfn = VfnParams::new(&mut rng, cfg.vfn_config())?;
    Ok(ModelParams { fusion, vfn })
}

/// One logged training step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub wallclock_s: f64,
}

/// Run `cfg.steps` optimization steps, returning the loss trace. The
/// `global_step` offset continues the per-step RNG stream of earlier
/// phases/runs.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    dataset: &Dataset,
    model: &mut ModelParams,
    opt: &mut AdamState,
    mode: TrainMode,
    cfg: &TrainConfig,
    norm: Normalization,
    start_step: u64,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let started = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for i in 0..cfg.steps {
        let global = start_step + i;
        let mut rng = step_rng(cfg.seed, global);

        let mut grad_acc: Option<Vec<f64>> = None;
        let mut loss_acc = 0.0f64;
        for _ in 0..cfg.batch.max(1) {
            let idx = rng.random_range(0..dataset.len());
            let item = make_item(&dataset.samples[idx], cfg, norm, &mut rng)?;
            let t = sample_timestep(&mut rng);
            let (frames, bins) = item.s_a.data.dim();
            let x0 = ndarray_randn(&mut rng, (3, frames, bins));
            let (loss, grads, max_act) = loss_and_grads(&item, model, mode, t, &x0)
                .map_err(|e| Error::numeric(format!("step {global}: {e}")))?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "step {global}: non-finite loss (max |activation| {max_act:.3e})"
                )));
            }
            loss_acc += loss;
            grad_acc = Some(match grad_acc {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        *a += g;
                    }
                    acc
                }
            });
        }
        let b = cfg.batch.max(1) as f64;
        let mut grads = grad_acc.expect("at least one batch member");
        for g in &mut grads {
            *g /= b;
        }
        let mut params = model.collect_params();
        adam_step(&mut params, &grads, opt, &hyper);
        model.set_params(&params);

        let record = LossRecord {
            step: global,
            loss: loss_acc / b,
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}

fn ndarray_randn(
    rng: &mut impl Rng,
    dim: (usize, usize, usize),
) -> ndarray::Array3<f64> {
    use rand_distr::{Distribution, StandardNormal};
    ndarray::Array3::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

/// Arguments for [`cmd_train`].
#[derive(Debug, Clone, Serialize)]
pub struct TrainArgs {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub phase: Phase,
    pub config: TrainConfig,
    /// Warm-up checkpoint to continue from (required for the full phase
    /// unless `allow_cold` is set).
    pub checkpoint: Option<PathBuf>,
    pub allow_cold: bool,
    /// Train the full phase without conditioning (ablation).
    pub audio_only: bool,
}

/// Outcome of a training run.
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub records: Vec<LossRecord>,
    pub model: ModelParams,
    pub meta: CheckpointMeta,
}

/// Train one phase end to end: load data, set up or resume the model, run
/// the loop, save checkpoint and loss log.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let dataset = Dataset::load(&args.dataset_dir)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let feature_dims = dataset
        .samples
        .iter()
        .find(|s| s.has_features())
        .map(|s| {
            (
                s.facial.as_ref().unwrap().dim(),
                s.scene.as_ref().unwrap().dim(),
            )
        });

    let (mut model, norm, start_step, mode) = match (args.phase, &args.checkpoint) {
        (Phase::Warmup, None) => {
            let (fd, sd) = feature_dims.unwrap_or((1, 1));
            let model = init_model(&args.config, fd, sd)?;
            let norm = compute_normalization(&dataset, &args.config.stft)?;
            (model, norm, 0u64, TrainMode::AudioOnly)
        }
        (Phase::Warmup, Some(path)) => {
            let (model, meta) = load_checkpoint(path)?;
            (model, meta.normalization, meta.steps_completed, TrainMode::AudioOnly)
        }
        (Phase::Full, Some(path)) => {
            let (model, meta) = load_checkpoint(path)?;
            let mode = if args.audio_only {
                TrainMode::AudioOnly
            } else {
                TrainMode::AudioVisual
            };
            (model, meta.normalization, meta.steps_completed, mode)
        }
        (Phase::Full, None) => {
            if !args.allow_cold {
                return Err(Error::validation(
                    "full phase requires a warm-up checkpoint (or --allow-cold)".to_string(),
                ));
            }
            let (fd, sd) = feature_dims.unwrap_or((1, 1));
            let model = init_model(&args.config, fd, sd)?;
            let norm = compute_normalization(&dataset, &args.config.stft)?;
            let mode = if args.audio_only {
                TrainMode::AudioOnly
            } else {
                TrainMode::AudioVisual
            };
            (model, norm, 0u64, mode)
        }
    };

    if mode == TrainMode::AudioVisual && feature_dims.is_none() {
        return Err(Error::validation(
            "full audio-visual phase needs feature streams in the dataset".to_string(),
        ));
    }

    let mut opt = AdamState::new(model.param_count());
    let log_path = args.out_dir.join("loss_log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    writeln!(log, "step,loss,wallclock_s").map_err(|e| Error::io(&log_path, e))?;

    let records = run_training(
        &dataset,
        &mut model,
        &mut opt,
        mode,
        &args.config,
        norm,
        start_step,
        |r| {
            let _ = writeln!(log, "{},{:.9},{:.3}", r.step, r.loss, r.wallclock_s);
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let meta = CheckpointMeta {
        vfn: args.config.vfn_config(),
        fusion_facial_dim: model.fusion.facial.input_dim(),
        fusion_scene_dim: model.fusion.scene.input_dim(),
        fusion_shared_dim: model.fusion.facial.output_dim(),
        fusion_activation: model.fusion.activation,
        stft: args.config.stft,
        normalization: norm,
        phase: match args.phase {
            Phase::Warmup => "warmup".to_string(),
            Phase::Full => "full".to_string(),
        },
        steps_completed: start_step + args.config.steps,
        train_seed: args.config.seed,
        param_count: model.param_count(),
    };
    let checkpoint_path = args.out_dir.join("checkpoint.vfnc");
    save_checkpoint(&checkpoint_path, &model, &meta)?;
    crate::write_run_config(&args.out_dir, args)?;

    Ok(TrainOutcome {
        checkpoint_path,
        records,
        model,
        meta,
    })
}

/// Load a checkpoint and evaluate the mean loss over `n_items` fixed items
/// (no parameter updates). Used for the zero-gate preservation check.
pub fn eval_loss(
    dataset: &Dataset,
    model: &ModelParams,
    mode: TrainMode,
    cfg: &TrainConfig,
    norm: Normalization,
    seed: u64,
    n_items: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n_items {
        let mut rng = step_rng(seed, i as u64);
        let idx = rng.random_range(0..dataset.len());
        let item = make_item(&dataset.samples[idx], cfg, norm, &mut rng)?;
        let t = sample_timestep(&mut rng);
        let (frames, bins) = item.s_a.data.dim();
        let x0 = ndarray_randn(&mut rng, (3, frames, bins));
        let (loss, _, _) = loss_and_grads(&item, model, mode, t, &x0)?;
        total += loss;
    }
    Ok(total / n_items as f64)
}

/// Path of the loss log inside a training output directory.
pub fn loss_log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("loss_log.csv")
}
