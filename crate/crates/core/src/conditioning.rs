//! Dual-stream feature fusion.
//!
//! Facial and scene feature sequences (stand-ins for frozen video encoder
//! outputs, exchanged as `.fseq` files) are each projected into a shared
//! space, concatenated along time, and passed through a final fusion layer.
//! The fusion parameters are trained jointly with the vector-field network,
//! so exact reverse-mode gradients are provided.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::{push_arr1, push_arr2, take_arr1, take_arr2, xavier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Facial,
    Scene,
    Fused,
}

impl StreamKind {
    fn to_byte(self) -> u8 {
        match self {
            StreamKind::Facial => 0,
            StreamKind::Scene => 1,
            StreamKind::Fused => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(StreamKind::Facial),
            1 => Ok(StreamKind::Scene),
            2 => Ok(StreamKind::Fused),
            other => Err(Error::validation(format!("bad stream kind byte {other}"))),
        }
    }
}

/// Frames x dim feature matrix with its frame rate.
///
/// Defaults in the pipeline: facial streams at 25 fps, scene streams at 4 fps.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub data: Array2<f64>,
    pub frame_rate: f64,
    pub stream_kind: StreamKind,
}

impl FeatureSequence {
    pub fn new(data: Array2<f64>, frame_rate: f64, stream_kind: StreamKind) -> Self {
        FeatureSequence {
            data,
            frame_rate,
            stream_kind,
        }
    }

    pub fn zeros(frames: usize, dim: usize, frame_rate: f64, stream_kind: StreamKind) -> Self {
        FeatureSequence::new(Array2::zeros((frames, dim)), frame_rate, stream_kind)
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite feature value".to_string()));
        }
        Ok(())
    }

    /// Row range [start, end) as a new sequence.
    pub fn crop_rows(&self, start: usize, end: usize) -> FeatureSequence {
        let end = end.min(self.frames());
        let start = start.min(end);
        FeatureSequence::new(
            self.data.slice(ndarray::s![start..end, ..]).to_owned(),
            self.frame_rate,
            self.stream_kind,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    /// Pass-through, for linear test configurations.
    Identity,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_prime(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Per-frame affine map: `y = x W + b` with `W` of shape (in, out).
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Affine {
    pub fn glorot(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        Affine {
            w: xavier(rng, input, output),
            b: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Affine {
            w: Array2::eye(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub(crate) fn append_params(&self, out: &mut Vec<f64>) {
        push_arr2(out, &self.w);
        push_arr1(out, &self.b);
    }

    pub(crate) fn read_params(&mut self, src: &mut &[f64]) {
        self.w = take_arr2(src, self.w.nrows(), self.w.ncols());
        self.b = take_arr1(src, self.b.len());
    }
}

/// Gradients for one affine layer.
#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl AffineGrad {
    pub fn zeros_like(a: &Affine) -> Self {
        AffineGrad {
            w: Array2::zeros(a.w.dim()),
            b: Array1::zeros(a.b.len()),
        }
    }

    pub(crate) fn append_params(&self, out: &mut Vec<f64>) {
        push_arr2(out, &self.w);
        push_arr1(out, &self.b);
    }
}

/// Projection + fusion parameters. Declaration order (facial, scene, fuse)
/// is also the flattening order used by the optimizer and checkpoints.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub facial: Affine,
    pub scene: Affine,
    pub fuse: Affine,
    pub activation: Activation,
}

impl FusionParams {
    pub fn new(
        rng: &mut impl Rng,
        facial_dim: usize,
        scene_dim: usize,
        shared_dim: usize,
        out_dim: usize,
    ) -> Self {
        FusionParams {
            facial: Affine::glorot(rng, facial_dim, shared_dim),
            scene: Affine::glorot(rng, scene_dim, shared_dim),
            fuse: Affine::glorot(rng, shared_dim, out_dim),
            activation: Activation::Gelu,
        }
    }

    /// Identity configuration (square, unit weights, linear) for tests.
    pub fn identity(dim: usize) -> Self {
        FusionParams {
            facial: Affine::identity(dim),
            scene: Affine::identity(dim),
            fuse: Affine::identity(dim),
            activation: Activation::Identity,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fuse.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.facial.param_count() + self.scene.param_count() + self.fuse.param_count()
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        self.facial.append_params(out);
        self.scene.append_params(out);
        self.fuse.append_params(out);
    }

    pub fn set_params(&mut self, src: &mut &[f64]) {
        self.facial.read_params(src);
        self.scene.read_params(src);
        self.fuse.read_params(src);
    }
}

/// Gradients mirroring [`FusionParams`] in the same order.
#[derive(Debug, Clone)]
pub struct FusionGrad {
    pub facial: AffineGrad,
    pub scene: AffineGrad,
    pub fuse: AffineGrad,
}

impl FusionGrad {
    pub fn zeros_like(p: &FusionParams) -> Self {
        FusionGrad {
            facial: AffineGrad::zeros_like(&p.facial),
            scene: AffineGrad::zeros_like(&p.scene),
            fuse: AffineGrad::zeros_like(&p.fuse),
        }
    }

    pub fn collect(&self, out: &mut Vec<f64>) {
        self.facial.append_params(out);
        self.scene.append_params(out);
        self.fuse.append_params(out);
    }
}

/// Forward cache for [`fuse_backward`].
#[derive(Debug, Clone)]
pub struct FusionCache {
    facial_in: Array2<f64>,
    scene_in: Array2<f64>,
    facial_pre: Array2<f64>,
    scene_pre: Array2<f64>,
    concat: Array2<f64>,
    fuse_pre: Array2<f64>,
}

/// Project both streams to the shared space, concatenate along time, apply
/// the fusion layer. Output has `T_f + T_s` rows.
pub fn fuse(
    facial: &FeatureSequence,
    scene: &FeatureSequence,
    p: &FusionParams,
) -> Result<(FeatureSequence, FusionCache)> {
    if facial.stream_kind != StreamKind::Facial || scene.stream_kind != StreamKind::Scene {
        return Err(Error::validation(format!(
            "fuse expects (facial, scene) streams, got ({:?}, {:?})",
            facial.stream_kind, scene.stream_kind
        )));
    }
    if facial.dim() != p.facial.input_dim() || scene.dim() != p.scene.input_dim() {
        return Err(Error::validation(format!(
            "feature dims ({}, {}) do not match projections ({}, {})",
            facial.dim(),
            scene.dim(),
            p.facial.input_dim(),
            p.scene.input_dim()
        )));
    }
    facial.ensure_finite()?;
    scene.ensure_finite()?;

    let facial_pre = p.facial.forward(&facial.data);
    let scene_pre = p.scene.forward(&scene.data);
    let facial_act = facial_pre.mapv(|v| p.activation.apply(v));
    let scene_act = scene_pre.mapv(|v| p.activation.apply(v));

    let concat = ndarray::concatenate(Axis(0), &[facial_act.view(), scene_act.view()])
        .expect("column counts match");
    let fuse_pre = p.fuse.forward(&concat);
    let out = fuse_pre.mapv(|v| p.activation.apply(v));

    let cache = FusionCache {
        facial_in: facial.data.clone(),
        scene_in: scene.data.clone(),
        facial_pre,
        scene_pre,
        concat,
        fuse_pre,
    };
    // The fused condition has no single frame rate; keep the facial one as
    // a nominal value (consumers only use row indices).
    Ok((
        FeatureSequence::new(out, facial.frame_rate, StreamKind::Fused),
        cache,
    ))
}

/// Exact reverse-mode gradients of [`fuse`] for the inputs and parameters.
pub fn fuse_backward(
    grad_out: &Array2<f64>,
    cache: &FusionCache,
    p: &FusionParams,
) -> (Array2<f64>, Array2<f64>, FusionGrad) {
    let t_f = cache.facial_in.nrows();

    let d_fuse_pre = grad_out * &cache.fuse_pre.mapv(|v| p.activation.derivative(v));
    let grad_fuse_w = cache.concat.t().dot(&d_fuse_pre);
    let grad_fuse_b = d_fuse_pre.sum_axis(Axis(0));
    let d_concat = d_fuse_pre.dot(&p.fuse.w.t());

    let d_facial_act = d_concat.slice(ndarray::s![..t_f, ..]).to_owned();
    let d_scene_act = d_concat.slice(ndarray::s![t_f.., ..]).to_owned();

    let d_facial_pre = &d_facial_act * &cache.facial_pre.mapv(|v| p.activation.derivative(v));
    let d_scene_pre = &d_scene_act * &cache.scene_pre.mapv(|v| p.activation.derivative(v));

    let grad_facial_w = cache.facial_in.t().dot(&d_facial_pre);
    let grad_facial_b = d_facial_pre.sum_axis(Axis(0));
    let grad_scene_w = cache.scene_in.t().dot(&d_scene_pre);
    let grad_scene_b = d_scene_pre.sum_axis(Axis(0));

    let grad_facial_in = d_facial_pre.dot(&p.facial.w.t());
    let grad_scene_in = d_scene_pre.dot(&p.scene.w.t());

    (
        grad_facial_in,
        grad_scene_in,
        FusionGrad {
            facial: AffineGrad {
                w: grad_facial_w,
                b: grad_facial_b,
            },
            scene: AffineGrad {
                w: grad_scene_w,
                b: grad_scene_b,
            },
            fuse: AffineGrad {
                w: grad_fuse_w,
                b: grad_fuse_b,
            },
        },
    )
}

const FSEQ_MAGIC: &[u8; 4] = b"FSEQ";
const FSEQ_VERSION: u32 = 1;

/// Write the `.fseq` binary format: magic, u32 version, u32 T, u32 D,
/// f32 frame_rate, u8 stream_kind, then T*D little-endian f32 row-major.
pub fn write_fseq(path: impl AsRef<Path>, fs: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(FSEQ_MAGIC)?;
    write(&FSEQ_VERSION.to_le_bytes())?;
    write(&(fs.frames() as u32).to_le_bytes())?;
    write(&(fs.dim() as u32).to_le_bytes())?;
    write(&(fs.frame_rate as f32).to_le_bytes())?;
    write(&[fs.stream_kind.to_byte()])?;
    for v in fs.data.iter() {
        write(&(*v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fseq(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != FSEQ_MAGIC {
        return Err(Error::validation(format!("{}: not an fseq file", path.display())));
    }
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = read_u32(&mut r)?;
    if version != FSEQ_VERSION {
        return Err(Error::validation(format!(
            "{}: unsupported fseq version {version}",
            path.display()
        )));
    }
    let t = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let frame_rate = f32::from_le_bytes(b4) as f64;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(|e| Error::io(path, e))?;
    let stream_kind = StreamKind::from_byte(b1[0])?;

    let mut raw = vec![0u8; t * d * 4];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((t, d), values)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    Ok(FeatureSequence::new(data, frame_rate, stream_kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: usize, dim: usize, rate: f64, kind: StreamKind, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0));
        FeatureSequence::new(data, rate, kind)
    }

    #[test]
    fn identity_fusion_is_row_concatenation() {
        let f = seq(5, 4, 25.0, StreamKind::Facial, 1);
        let s = seq(3, 4, 4.0, StreamKind::Scene, 2);
        let p = FusionParams::identity(4);
        let (out, _) = fuse(&f, &s, &p).unwrap();
        assert_eq!(out.frames(), 8);
        assert_eq!(out.stream_kind, StreamKind::Fused);
        for t in 0..5 {
            for d in 0..4 {
                assert_eq!(out.data[[t, d]], f.data[[t, d]]);
            }
        }
        for t in 0..3 {
            for d in 0..4 {
                assert_eq!(out.data[[5 + t, d]], s.data[[t, d]]);
            }
        }
    }

    #[test]
    fn output_rows_equal_tf_plus_ts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::new(&mut rng, 6, 3, 8, 8);
        let f = seq(25, 6, 25.0, StreamKind::Facial, 4);
        let s = seq(4, 3, 4.0, StreamKind::Scene, 5);
        let (out, _) = fuse(&f, &s, &p).unwrap();
        assert_eq!(out.frames(), 29);
        assert_eq!(out.dim(), 8);
    }

    #[test]
    fn zero_inputs_zero_biases_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = FusionParams::new(&mut rng, 4, 4, 8, 8);
        let f = FeatureSequence::zeros(3, 4, 25.0, StreamKind::Facial);
        let s = FeatureSequence::zeros(2, 4, 4.0, StreamKind::Scene);
        let (out, _) = fuse(&f, &s, &p).unwrap();
        // gelu(0) = 0 and biases start at zero.
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = FusionParams::new(&mut rng, 4, 4, 8, 8);
        let f = seq(3, 5, 25.0, StreamKind::Facial, 8);
        let s = seq(2, 4, 4.0, StreamKind::Scene, 9);
        assert!(fuse(&f, &s, &p).is_err());
    }

    #[test]
    fn wrong_stream_kinds_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = FusionParams::new(&mut rng, 4, 4, 8, 8);
        let f = seq(3, 4, 25.0, StreamKind::Scene, 8);
        let s = seq(2, 4, 4.0, StreamKind::Scene, 9);
        assert!(fuse(&f, &s, &p).is_err());
    }

    /// Loss = sum of fused outputs weighted by a fixed random matrix, so the
    /// upstream gradient is that matrix.
    fn fd_check(p: &FusionParams, f: &FeatureSequence, s: &FeatureSequence, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (out, cache) = fuse(f, s, p).unwrap();
        let weight = Array2::from_shape_fn(out.data.dim(), |_| rng.random_range(-1.0..1.0));
        let (_, _, grad) = fuse_backward(&weight, &cache, p);

        let mut analytic = Vec::new();
        grad.collect(&mut analytic);

        let mut theta = Vec::new();
        p.collect_params(&mut theta);
        let step = 1e-5;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += step;
            let mut minus = theta.clone();
            minus[i] -= step;
            let mut pp = p.clone();
            pp.set_params(&mut plus.as_slice());
            let (op, _) = fuse(f, s, &pp).unwrap();
            let mut pm = p.clone();
            pm.set_params(&mut minus.as_slice());
            let (om, _) = fuse(f, s, &pm).unwrap();
            let lp = (&op.data * &weight).sum();
            let lm = (&om.data * &weight).sum();
            let numeric = (lp - lm) / (2.0 * step);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            let rel = (numeric - analytic[i]).abs() / denom;
            assert!(
                rel < tol,
                "param {i}: numeric {numeric} vs analytic {} (rel {rel})",
                analytic[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = FusionParams::new(&mut rng, 4, 4, 6, 6);
        let f = seq(8, 4, 25.0, StreamKind::Facial, 12);
        let s = seq(8, 4, 4.0, StreamKind::Scene, 13);
        fd_check(&p, &f, &s, 1e-4);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = FusionParams::new(&mut rng, 4, 4, 6, 6);
        let f = seq(5, 4, 25.0, StreamKind::Facial, 15);
        let s = seq(2, 4, 4.0, StreamKind::Scene, 16);
        let (_, cache) = fuse(&f, &s, &p).unwrap();
        let zero = Array2::zeros((7, 6));
        let (gf, gs, grad) = fuse_backward(&zero, &cache, &p);
        let mut flat = Vec::new();
        grad.collect(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
        assert!(gf.iter().all(|&v| v == 0.0));
        assert!(gs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_mode_gradient_is_the_affine_closed_form() {
        // With all activations linear, out = (F Wf + bf ; S Ws + bs) Wu + bu,
        // so d(sum G.out)/dWf = F^T G_facial Wu^T.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = FusionParams::new(&mut rng, 3, 3, 4, 4);
        p.activation = Activation::Identity;
        let f = seq(4, 3, 25.0, StreamKind::Facial, 18);
        let s = seq(2, 3, 4.0, StreamKind::Scene, 19);
        let (out, cache) = fuse(&f, &s, &p).unwrap();
        let g = Array2::from_shape_fn(out.data.dim(), |_| rng.random_range(-1.0..1.0));
        let (_, _, grad) = fuse_backward(&g, &cache, &p);

        let g_facial_rows = g.slice(ndarray::s![..4, ..]).to_owned();
        let expected = f.data.t().dot(&g_facial_rows.dot(&p.fuse.w.t()));
        let diff = (&grad.facial.w - &expected)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn per_frame_permutation_equivariance() {
        // Swapping two facial rows swaps the corresponding output rows.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p = FusionParams::new(&mut rng, 4, 4, 6, 6);
        let f = seq(6, 4, 25.0, StreamKind::Facial, 21);
        let s = seq(3, 4, 4.0, StreamKind::Scene, 22);
        let (out, _) = fuse(&f, &s, &p).unwrap();

        let mut swapped = f.clone();
        for d in 0..4 {
            swapped.data.swap([1, d], [4, d]);
        }
        let (out2, _) = fuse(&swapped, &s, &p).unwrap();
        for d in 0..6 {
            assert_eq!(out.data[[1, d]], out2.data[[4, d]]);
            assert_eq!(out.data[[4, d]], out2.data[[1, d]]);
            assert_eq!(out.data[[0, d]], out2.data[[0, d]]);
        }
    }

    #[test]
    fn fseq_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fseq");
        let fs = seq(7, 3, 25.0, StreamKind::Facial, 23);
        write_fseq(&path, &fs).unwrap();
        let back = read_fseq(&path).unwrap();
        assert_eq!(back.frames(), 7);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.stream_kind, StreamKind::Facial);
        assert!((back.frame_rate - 25.0).abs() < 1e-6);
        for (a, b) in fs.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() < 1e-6); // f32 storage
        }
    }
}
