//! Vector-field estimator.
//!
//! A per-frame column network over the channel-concatenated state and
//! mixture spectrogram: each time frame contributes one input row
//! `[x_dx | x_fx | x_mx | s_a | time-embedding]`, processed by two hidden
//! layers with a single cross-attention block in between. The attention
//! output enters through a scalar gate initialized to exactly zero, so a
//! freshly conditioned model reproduces its unconditional behavior bit for
//! bit and conditioning is learned gradually.
//!
//! Gradients are hand-written reverse mode; the flattened parameter order
//! (fusion first, then trunk layers, attention projections, gate) is shared
//! by the optimizer state and the checkpoint blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::conditioning::{Activation, Affine, AffineGrad, FusionGrad, FusionParams};
use crate::dsp::{Normalization, StftConfig};
use crate::error::{Error, Result};
use crate::util::{push_arr2, take_arr2, xavier};

/// Sinusoidal time embedding with frequencies geometric from 1 to 10^4.
/// `dim` must be even.
pub fn time_embed(t: f64, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            4.0 * i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let omega = 10f64.powf(exponent);
        out[2 * i] = (omega * t).sin();
        out[2 * i + 1] = (omega * t).cos();
    }
    out
}

/// Network geometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VfnConfig {
    /// Spectrogram bins per channel.
    pub bins: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub attn_dim: usize,
    /// Width of fused condition rows (C').
    pub cond_dim: usize,
    /// Hidden width of the per-channel time-gate head.
    pub gate_hidden: usize,
    pub activation: Activation,
}

impl Default for VfnConfig {
    fn default() -> Self {
        VfnConfig {
            bins: 513,
            hidden: 256,
            time_embed_dim: 32,
            attn_dim: 32,
            cond_dim: 64,
            gate_hidden: 8,
            activation: Activation::Gelu,
        }
    }
}

impl VfnConfig {
    pub fn input_dim(&self) -> usize {
        4 * self.bins + self.time_embed_dim
    }

    pub fn output_dim(&self) -> usize {
        3 * self.bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0
            || self.hidden == 0
            || self.attn_dim == 0
            || self.cond_dim == 0
            || self.gate_hidden == 0
        {
            return Err(Error::validation("vfnet dims must be positive".to_string()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::validation(
                "time_embed_dim must be even and >= 2".to_string(),
            ));
        }
        Ok(())
    }
}

/// Single-head scaled dot-product cross-attention with a zero-initialized
/// output gate.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub gate: f64,
}

impl CrossAttention {
    fn new(rng: &mut impl Rng, hidden: usize, cond_dim: usize, attn_dim: usize) -> Self {
        CrossAttention {
            wq: xavier(rng, hidden, attn_dim),
            wk: xavier(rng, cond_dim, attn_dim),
            wv: xavier(rng, cond_dim, attn_dim),
            wo: xavier(rng, attn_dim, hidden),
            gate: 0.0,
        }
    }

    fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len() + self.wo.len() + 1
    }
}

/// Number of scalars the time gate emits: per-channel output scale, state
/// skip, and mixture skip.
const GATE_OUTPUTS: usize = 9;

/// Small head mapping the time embedding to per-channel gains.
///
/// The optimal straight-path field scales like `(x1_hat - x_t) / (1 - t)`,
/// an elementwise combination whose gain depends only on `t`. Routing it
/// through the trunk would demand a full-rank pass of the state; these
/// gated skips provide it directly (the desk-scale analogue of U-Net skip
/// connections). Initialization reproduces the plain trunk exactly:
/// output scales start at 1, both skips at 0.
#[derive(Debug, Clone)]
pub struct TimeGate {
    pub l1: Affine,
    pub l2: Affine,
}

impl TimeGate {
    fn new(rng: &mut impl Rng, embed_dim: usize, hidden: usize) -> Self {
        let l1 = Affine::glorot(rng, embed_dim, hidden);
        let mut l2 = Affine {
            w: Array2::zeros((hidden, GATE_OUTPUTS)),
            b: Array1::zeros(GATE_OUTPUTS),
        };
        for c in 0..3 {
            l2.b[c] = 1.0; // output scales start at identity
        }
        TimeGate { l1, l2 }
    }

    fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    /// (gains, hidden pre-activation, hidden activation).
    fn forward(
        &self,
        emb: &Array1<f64>,
        activation: Activation,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let pre = emb.dot(&self.l1.w) + &self.l1.b;
        let act = pre.mapv(|v| activation.apply(v));
        let out = act.dot(&self.l2.w) + &self.l2.b;
        (out, pre, act)
    }
}

/// Trunk + attention + time-gate parameters.
#[derive(Debug, Clone)]
pub struct VfnParams {
    pub config: VfnConfig,
    /// input->hidden, hidden->hidden, hidden->output.
    pub layers: Vec<Affine>,
    pub attention: CrossAttention,
    pub time_gate: TimeGate,
}

impl VfnParams {
    pub fn new(rng: &mut impl Rng, config: VfnConfig) -> Result<Self> {
        config.validate()?;
        let layers = vec![
            Affine::glorot(rng, config.input_dim(), config.hidden),
            Affine::glorot(rng, config.hidden, config.hidden),
            Affine::glorot(rng, config.hidden, config.output_dim()),
        ];
        let attention = CrossAttention::new(rng, config.hidden, config.cond_dim, config.attn_dim);
        let time_gate = TimeGate::new(rng, config.time_embed_dim, config.gate_hidden);
        Ok(VfnParams {
            config,
            layers,
            attention,
            time_gate,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum::<usize>()
            + self.attention.param_count()
            + self.time_gate.param_count()
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.append_params(out);
        }
        push_arr2(out, &self.attention.wq);
        push_arr2(out, &self.attention.wk);
        push_arr2(out, &self.attention.wv);
        push_arr2(out, &self.attention.wo);
        out.push(self.attention.gate);
        self.time_gate.l1.append_params(out);
        self.time_gate.l2.append_params(out);
    }

    pub fn set_params(&mut self, src: &mut &[f64]) {
        for l in &mut self.layers {
            l.read_params(src);
        }
        let a = &mut self.attention;
        a.wq = take_arr2(src, a.wq.nrows(), a.wq.ncols());
        a.wk = take_arr2(src, a.wk.nrows(), a.wk.ncols());
        a.wv = take_arr2(src, a.wv.nrows(), a.wv.ncols());
        a.wo = take_arr2(src, a.wo.nrows(), a.wo.ncols());
        a.gate = src[0];
        *src = &src[1..];
        self.time_gate.l1.read_params(src);
        self.time_gate.l2.read_params(src);
    }
}

/// Gradients mirroring [`VfnParams`].
#[derive(Debug, Clone)]
pub struct VfnGrad {
    pub layers: Vec<AffineGrad>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub gate: f64,
    pub time_gate_l1: AffineGrad,
    pub time_gate_l2: AffineGrad,
}

impl VfnGrad {
    pub fn zeros_like(p: &VfnParams) -> Self {
        VfnGrad {
            layers: p.layers.iter().map(AffineGrad::zeros_like).collect(),
            wq: Array2::zeros(p.attention.wq.dim()),
            wk: Array2::zeros(p.attention.wk.dim()),
            wv: Array2::zeros(p.attention.wv.dim()),
            wo: Array2::zeros(p.attention.wo.dim()),
            gate: 0.0,
            time_gate_l1: AffineGrad::zeros_like(&p.time_gate.l1),
            time_gate_l2: AffineGrad::zeros_like(&p.time_gate.l2),
        }
    }

    pub fn collect(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.append_params(out);
        }
        push_arr2(out, &self.wq);
        push_arr2(out, &self.wk);
        push_arr2(out, &self.wv);
        push_arr2(out, &self.wo);
        out.push(self.gate);
        self.time_gate_l1.append_params(out);
        self.time_gate_l2.append_params(out);
    }
}

/// Forward cache for [`backward`].
pub struct VfnCache {
    input: Array2<f64>,
    h0_pre: Array2<f64>,
    h0: Array2<f64>,
    attn: Option<AttnCache>,
    h0_gated: Array2<f64>,
    h1_pre: Array2<f64>,
    h1: Array2<f64>,
    trunk_out: Array2<f64>,
    emb: Array1<f64>,
    gains: Array1<f64>,
    gate_pre: Array1<f64>,
    gate_act: Array1<f64>,
}

struct AttnCache {
    cond: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Array2<f64>,
    context: Array2<f64>,
    projected: Array2<f64>,
}

impl VfnCache {
    /// Largest absolute activation seen in the forward pass, for NaN-abort
    /// diagnostics.
    pub fn max_abs_activation(&self) -> f64 {
        let m = |a: &Array2<f64>| a.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        m(&self.h0).max(m(&self.h1)).max(m(&self.h0_gated))
    }
}

fn rows_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Run the network on a 3-channel state stacked with the mixture.
///
/// `x` has shape (3, T, bins); `s_a` is the normalized mixture (T, bins);
/// `cond` is the fused condition (rows x cond_dim) or None for the
/// audio-only path, which skips attention entirely.
pub fn forward(
    x: &Array3<f64>,
    s_a: &Array2<f64>,
    t: f64,
    cond: Option<&Array2<f64>>,
    p: &VfnParams,
) -> Result<(Array3<f64>, VfnCache)> {
    let cfg = &p.config;
    let (ch, frames, bins) = x.dim();
    if ch != 3 || bins != cfg.bins {
        return Err(Error::validation(format!(
            "state shape (3, T, {}) expected, got ({ch}, {frames}, {bins})",
            cfg.bins,
        )));
    }
    if s_a.dim() != (frames, bins) {
        return Err(Error::validation(format!(
            "mixture shape {:?} does not match state ({frames}, {bins})",
            s_a.dim()
        )));
    }
    if let Some(c) = cond {
        if c.ncols() != cfg.cond_dim {
            return Err(Error::validation(format!(
                "condition width {} != cond_dim {}",
                c.ncols(),
                cfg.cond_dim
            )));
        }
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("timestep {t} outside [0, 1]")));
    }

    // Assemble per-frame input rows.
    let emb = time_embed(t, cfg.time_embed_dim);
    let mut input = Array2::zeros((frames, cfg.input_dim()));
    for f in 0..frames {
        for c in 0..3 {
            for b in 0..bins {
                input[[f, c * bins + b]] = x[[c, f, b]];
            }
        }
        for b in 0..bins {
            input[[f, 3 * bins + b]] = s_a[[f, b]];
        }
        for e in 0..cfg.time_embed_dim {
            input[[f, 4 * bins + e]] = emb[e];
        }
    }

    let h0_pre = p.layers[0].forward(&input);
    let h0 = h0_pre.mapv(|v| cfg.activation.apply(v));

    let (attn, h0_gated) = match cond {
        Some(c) => {
            let a = &p.attention;
            let q = h0.dot(&a.wq);
            let k = c.dot(&a.wk);
            let v = c.dot(&a.wv);
            let scale = 1.0 / (cfg.attn_dim as f64).sqrt();
            let weights = rows_softmax(&(q.dot(&k.t()) * scale));
            let context = weights.dot(&v);
            let projected = context.dot(&a.wo);
            // Adding gate*projected with gate == 0 can flip signed zeros,
            // so the zero-gate path clones the trunk state outright; the
            // cache still holds the attention tensors for gradients.
            let gated = if a.gate == 0.0 {
                h0.clone()
            } else {
                &h0 + &(projected.mapv(|v| v * a.gate))
            };
            (
                Some(AttnCache {
                    cond: c.clone(),
                    q,
                    k,
                    v,
                    weights,
                    context,
                    projected,
                }),
                gated,
            )
        }
        None => (None, h0.clone()),
    };

    let h1_pre = p.layers[1].forward(&h0_gated);
    let h1 = h1_pre.mapv(|v| cfg.activation.apply(v));
    let trunk_out = p.layers[2].forward(&h1);

    // Per-channel, time-dependent mix of trunk output with elementwise
    // state and mixture skips.
    let (gains, gate_pre, gate_act) = p.time_gate.forward(&emb, cfg.activation);
    let mut out = Array3::zeros((3, frames, bins));
    for f in 0..frames {
        for c in 0..3 {
            for b in 0..bins {
                out[[c, f, b]] = gains[c] * trunk_out[[f, c * bins + b]]
                    + gains[3 + c] * input[[f, c * bins + b]]
                    + gains[6 + c] * input[[f, 3 * bins + b]];
            }
        }
    }

    Ok((
        out,
        VfnCache {
            input,
            h0_pre,
            h0,
            attn,
            h0_gated,
            h1_pre,
            h1,
            trunk_out,
            emb,
            gains,
            gate_pre,
            gate_act,
        },
    ))
}

/// Reverse-mode gradients for every parameter and (when conditioned) for
/// the condition rows.
pub fn backward(
    grad_out: &Array3<f64>,
    cache: &VfnCache,
    p: &VfnParams,
) -> (VfnGrad, Option<Array2<f64>>) {
    let cfg = &p.config;
    let (_, frames, bins) = grad_out.dim();

    // Time-gated combination: split the upstream gradient into the trunk
    // path (scaled by the output gains) and the nine gain scalars.
    let mut d_out = Array2::zeros((frames, cfg.output_dim()));
    let mut d_gains = Array1::zeros(GATE_OUTPUTS);
    for f in 0..frames {
        for c in 0..3 {
            for b in 0..bins {
                let g = grad_out[[c, f, b]];
                d_out[[f, c * bins + b]] = g * cache.gains[c];
                d_gains[c] += g * cache.trunk_out[[f, c * bins + b]];
                d_gains[3 + c] += g * cache.input[[f, c * bins + b]];
                d_gains[6 + c] += g * cache.input[[f, 3 * bins + b]];
            }
        }
    }

    // Gate head.
    let grad_tg_l2_w = {
        let mut w = Array2::zeros((cache.gate_act.len(), GATE_OUTPUTS));
        for i in 0..cache.gate_act.len() {
            for j in 0..GATE_OUTPUTS {
                w[[i, j]] = cache.gate_act[i] * d_gains[j];
            }
        }
        w
    };
    let grad_tg_l2_b = d_gains.clone();
    let d_gate_act = p.time_gate.l2.w.dot(&d_gains);
    let d_gate_pre = &d_gate_act * &cache.gate_pre.mapv(|v| cfg.activation.derivative(v));
    let grad_tg_l1_w = {
        let mut w = Array2::zeros((cache.emb.len(), d_gate_pre.len()));
        for i in 0..cache.emb.len() {
            for j in 0..d_gate_pre.len() {
                w[[i, j]] = cache.emb[i] * d_gate_pre[j];
            }
        }
        w
    };
    let grad_tg_l1_b = d_gate_pre;

    // Output layer.
    let grad_l2_w = cache.h1.t().dot(&d_out);
    let grad_l2_b = d_out.sum_axis(Axis(0));
    let d_h1 = d_out.dot(&p.layers[2].w.t());

    // Second hidden layer.
    let d_h1_pre = &d_h1 * &cache.h1_pre.mapv(|v| cfg.activation.derivative(v));
    let grad_l1_w = cache.h0_gated.t().dot(&d_h1_pre);
    let grad_l1_b = d_h1_pre.sum_axis(Axis(0));
    let d_h0_gated = d_h1_pre.dot(&p.layers[1].w.t());

    // Attention block (identity path plus gated attention path).
    let mut d_h0 = d_h0_gated.clone();
    let mut grad_wq = Array2::zeros(p.attention.wq.dim());
    let mut grad_wk = Array2::zeros(p.attention.wk.dim());
    let mut grad_wv = Array2::zeros(p.attention.wv.dim());
    let mut grad_wo = Array2::zeros(p.attention.wo.dim());
    let mut grad_gate = 0.0;
    let mut grad_cond = None;

    if let Some(attn) = &cache.attn {
        let a = &p.attention;
        grad_gate = (&d_h0_gated * &attn.projected).sum();
        let d_projected = d_h0_gated.mapv(|v| v * a.gate);
        grad_wo = attn.context.t().dot(&d_projected);
        let d_context = d_projected.dot(&a.wo.t());
        let d_weights = d_context.dot(&attn.v.t());
        let mut d_scores = Array2::zeros(attn.weights.dim());
        for f in 0..attn.weights.nrows() {
            let w_row = attn.weights.row(f);
            let dw_row = d_weights.row(f);
            let dot: f64 = w_row.iter().zip(dw_row.iter()).map(|(w, d)| w * d).sum();
            for j in 0..w_row.len() {
                d_scores[[f, j]] = w_row[j] * (dw_row[j] - dot);
            }
        }
        let scale = 1.0 / (cfg.attn_dim as f64).sqrt();
        let d_q = d_scores.dot(&attn.k) * scale;
        let d_k = d_scores.t().dot(&attn.q) * scale;
        let d_v = attn.weights.t().dot(&d_context);

        grad_wq = cache.h0.t().dot(&d_q);
        d_h0 = &d_h0 + &d_q.dot(&a.wq.t());
        grad_wk = attn.cond.t().dot(&d_k);
        grad_wv = attn.cond.t().dot(&d_v);
        grad_cond = Some(d_k.dot(&a.wk.t()) + d_v.dot(&a.wv.t()));
    }

    // First hidden layer.
    let d_h0_pre = &d_h0 * &cache.h0_pre.mapv(|v| cfg.activation.derivative(v));
    let grad_l0_w = cache.input.t().dot(&d_h0_pre);
    let grad_l0_b = d_h0_pre.sum_axis(Axis(0));

    (
        VfnGrad {
            layers: vec![
                AffineGrad {
                    w: grad_l0_w,
                    b: grad_l0_b,
                },
                AffineGrad {
                    w: grad_l1_w,
                    b: grad_l1_b,
                },
                AffineGrad {
                    w: grad_l2_w,
                    b: grad_l2_b,
                },
            ],
            wq: grad_wq,
            wk: grad_wk,
            wv: grad_wv,
            wo: grad_wo,
            gate: grad_gate,
            time_gate_l1: AffineGrad {
                w: grad_tg_l1_w,
                b: grad_tg_l1_b,
            },
            time_gate_l2: AffineGrad {
                w: grad_tg_l2_w,
                b: grad_tg_l2_b,
            },
        },
        grad_cond,
    )
}

/// Adam hyperparameters. Defaults: lr 1e-4, beta1 0.9, beta2 0.999.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place over the flat parameter vector.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for i in 0..params.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grads[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// The full trainable model: fusion followed by the vector-field trunk.
/// Flattening order is fusion first, then trunk.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub fusion: FusionParams,
    pub vfn: VfnParams,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.fusion.param_count() + self.vfn.param_count()
    }

    pub fn collect_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.fusion.collect_params(&mut out);
        self.vfn.collect_params(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut src = flat;
        self.fusion.set_params(&mut src);
        self.vfn.set_params(&mut src);
        assert!(src.is_empty(), "parameter vector length mismatch");
    }

    pub fn collect_grads(&self, fusion: &FusionGrad, vfn: &VfnGrad) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        fusion.collect(&mut out);
        vfn.collect(&mut out);
        out
    }
}

/// Everything a checkpoint header records besides the parameter blob.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub vfn: VfnConfig,
    pub fusion_facial_dim: usize,
    pub fusion_scene_dim: usize,
    pub fusion_shared_dim: usize,
    pub fusion_activation: Activation,
    pub stft: StftConfig,
    pub normalization: Normalization,
    /// "warmup" or "full".
    pub phase: String,
    pub steps_completed: u64,
    pub train_seed: u64,
    pub param_count: usize,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VFNC";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: magic, u32 version, u32 header length, JSON header,
/// then the parameters as a contiguous little-endian f32 blob in
/// declaration order.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelParams,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let mut meta = meta.clone();
    meta.param_count = model.param_count();
    let header = serde_json::to_vec(&meta)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(header.len() as u32).to_le_bytes())?;
    write(&header)?;
    for v in model.collect_params() {
        write(&(v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::validation(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::validation(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(b4) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;

    // Rebuild the parameter skeleton, then overwrite with the blob.
    let mut seed_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let fusion = FusionParams {
        facial: Affine::glorot(&mut seed_rng, meta.fusion_facial_dim, meta.fusion_shared_dim),
        scene: Affine::glorot(&mut seed_rng, meta.fusion_scene_dim, meta.fusion_shared_dim),
        fuse: Affine::glorot(&mut seed_rng, meta.fusion_shared_dim, meta.vfn.cond_dim),
        activation: meta.fusion_activation,
    };
    let vfn = VfnParams::new(&mut seed_rng, meta.vfn)?;
    let mut model = ModelParams { fusion, vfn };
    if model.param_count() != meta.param_count {
        return Err(Error::validation(format!(
            "{}: header param count {} does not match reconstructed {}",
            path.display(),
            meta.param_count,
            model.param_count()
        )));
    }

    let mut raw = vec![0u8; meta.param_count * 4];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let flat: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    model.set_params(&flat);
    Ok((model, meta))
}
