//! Conditional flow matching over the three-source joint.
//!
//! Training regresses the straight-path field `u = x1 - x0` at a
//! logit-normal timestep; sampling integrates the learned field from
//! Gaussian noise with forward Euler, conditioned on the mixture
//! spectrogram and (optionally) the fused visual condition.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::{fuse, fuse_backward, FeatureSequence, FusionGrad};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::vfnet::{self, adam_step, AdamHyper, AdamState, ModelParams};

/// Whether a training step uses the fused visual condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    AudioOnly,
    AudioVisual,
}

/// One training example: mixture, the three target stems, and the raw
/// feature streams when available.
#[derive(Debug, Clone)]
pub struct TrainBatchItem {
    pub s_a: Spectrogram,
    /// Targets in channel order dx, fx, mx.
    pub targets: [Spectrogram; 3],
    /// (facial, scene) streams; ignored in audio-only mode.
    pub features: Option<(FeatureSequence, FeatureSequence)>,
}

/// Draw `t = sigmoid(z)`, `z ~ N(0,1)`. Strictly inside (0, 1).
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    1.0 / (1.0 + (-z).exp())
}

/// Straight-path interpolant `x_t = (1-t) x0 + t x1`.
pub fn interpolate(x0: &Array3<f64>, x1: &Array3<f64>, t: f64) -> Result<Array3<f64>> {
    if x0.dim() != x1.dim() {
        return Err(Error::validation(format!(
            "interpolate shape mismatch: {:?} vs {:?}",
            x0.dim(),
            x1.dim()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("timestep {t} outside [0, 1]")));
    }
    Ok(x0 * (1.0 - t) + &(x1 * t))
}

/// Mean squared error against the target field `x1 - x0`, with its gradient
/// with respect to the prediction.
pub fn cfm_loss(
    u_pred: &Array3<f64>,
    x0: &Array3<f64>,
    x1: &Array3<f64>,
) -> Result<(f64, Array3<f64>)> {
    if u_pred.dim() != x0.dim() || x0.dim() != x1.dim() {
        return Err(Error::validation(format!(
            "cfm_loss shape mismatch: {:?} / {:?} / {:?}",
            u_pred.dim(),
            x0.dim(),
            x1.dim()
        )));
    }
    let count = u_pred.len() as f64;
    let residual = u_pred - &(x1 - x0);
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / count;
    let grad = residual.mapv(|r| 2.0 * r / count);
    Ok((loss, grad))
}

/// Stack the normalized target spectrograms into (3, T, F).
fn stack_normalized(targets: &[Spectrogram; 3]) -> Result<Array3<f64>> {
    let (frames, bins) = targets[0].data.dim();
    for s in targets.iter() {
        if s.data.dim() != (frames, bins) {
            return Err(Error::validation(format!(
                "target shape {:?} differs from ({frames}, {bins})",
                s.data.dim()
            )));
        }
    }
    let mut out = Array3::zeros((3, frames, bins));
    for (c, s) in targets.iter().enumerate() {
        let n = s.normalized();
        for f in 0..frames {
            for b in 0..bins {
                out[[c, f, b]] = n[[f, b]];
            }
        }
    }
    Ok(out)
}

fn standard_normal_tensor(rng: &mut impl Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

/// Loss and flattened gradients for fixed draws of `t` and `x0`. This is
/// the deterministic core of [`train_step`], exposed so gradient checks can
/// difference it directly.
pub fn loss_and_grads(
    item: &TrainBatchItem,
    model: &ModelParams,
    mode: TrainMode,
    t: f64,
    x0: &Array3<f64>,
) -> Result<(f64, Vec<f64>, f64)> {
    let x1 = stack_normalized(&item.targets)?;
    let x_t = interpolate(x0, &x1, t)?;
    let s_a_norm = item.s_a.normalized();

    let fused = match (mode, &item.features) {
        (TrainMode::AudioVisual, Some((facial, scene))) => {
            Some(fuse(facial, scene, &model.fusion)?)
        }
        (TrainMode::AudioVisual, None) => None,
        (TrainMode::AudioOnly, _) => None,
    };
    let cond = fused.as_ref().map(|(c, _)| &c.data);

    let (u_pred, cache) = vfnet::forward(&x_t, &s_a_norm, t, cond, &model.vfn)?;
    let (loss, grad_u) = cfm_loss(&u_pred, x0, &x1)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss (max |activation| = {:.3e})",
            cache.max_abs_activation()
        )));
    }

    let (vfn_grad, grad_cond) = vfnet::backward(&grad_u, &cache, &model.vfn);
    let fusion_grad = match (&fused, grad_cond) {
        (Some((_, fusion_cache)), Some(gc)) => {
            let (_, _, fg) = fuse_backward(&gc, fusion_cache, &model.fusion);
            fg
        }
        _ => FusionGrad::zeros_like(&model.fusion),
    };

    let flat = model.collect_grads(&fusion_grad, &vfn_grad);
    Ok((loss, flat, cache.max_abs_activation()))
}

/// One optimization step. Draw order is fixed (t, then x0) so audio-only
/// and audio-visual runs consume identical random streams.
pub fn train_step(
    item: &TrainBatchItem,
    model: &mut ModelParams,
    opt: &mut AdamState,
    mode: TrainMode,
    hyper: &AdamHyper,
    rng: &mut impl Rng,
) -> Result<f64> {
    let t = sample_timestep(rng);
    let (frames, bins) = item.s_a.data.dim();
    let x0 = standard_normal_tensor(rng, (3, frames, bins));
    let (loss, grads, _) = loss_and_grads(item, model, mode, t, &x0)?;
    let mut params = model.collect_params();
    adam_step(&mut params, &grads, opt, hyper);
    model.set_params(&params);
    Ok(loss)
}

/// A time-dependent field over the 3-channel state. Implemented by the
/// trained model and by injectable test doubles.
pub trait VectorField {
    fn eval(&self, x: &Array3<f64>, t: f64) -> Result<Array3<f64>>;
}

/// Forward Euler integration of `field` from `x0`: N steps with t = n/N.
pub fn euler_integrate(
    field: &dyn VectorField,
    x0: Array3<f64>,
    n_steps: usize,
) -> Result<Array3<f64>> {
    if n_steps == 0 {
        return Err(Error::validation("euler integration needs N >= 1".to_string()));
    }
    let eta = 1.0 / n_steps as f64;
    let mut x = x0;
    for n in 1..=n_steps {
        let t = n as f64 / n_steps as f64;
        let u = field.eval(&x, t)?;
        x = &x + &u.mapv(|v| v * eta);
    }
    Ok(x)
}

/// The trained model viewed as a vector field for fixed conditioning.
pub struct ModelField<'a> {
    model: &'a ModelParams,
    s_a_norm: Array2<f64>,
    cond: Option<Array2<f64>>,
}

impl VectorField for ModelField<'_> {
    fn eval(&self, x: &Array3<f64>, t: f64) -> Result<Array3<f64>> {
        let (u, _) = vfnet::forward(x, &self.s_a_norm, t, self.cond.as_ref(), &self.model.vfn)?;
        Ok(u)
    }
}

/// Sample the three separated spectrograms from Gaussian noise (Euler, N
/// steps). Features are fused once before the loop; absent features select
/// the audio-only path.
pub fn euler_sample(
    s_a: &Spectrogram,
    features: Option<(&FeatureSequence, &FeatureSequence)>,
    model: &ModelParams,
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<[Spectrogram; 3]> {
    let fused = match features {
        Some((facial, scene)) => Some(fuse(facial, scene, &model.fusion)?.0),
        None => None,
    };
    let field = ModelField {
        model,
        s_a_norm: s_a.normalized(),
        cond: fused.map(|f| f.data),
    };
    let (frames, bins) = s_a.data.dim();
    let x0 = standard_normal_tensor(rng, (3, frames, bins));
    let x1 = euler_integrate(&field, x0, n_steps)?;

    let mut out = Vec::with_capacity(3);
    for c in 0..3 {
        let norm_data = x1.index_axis(ndarray::Axis(0), c).to_owned();
        out.push(Spectrogram::from_normalized(
            norm_data,
            s_a.config,
            s_a.normalization,
        ));
    }
    let [dx, fx, mx]: [Spectrogram; 3] = out.try_into().expect("three channels");
    Ok([dx, fx, mx])
}
