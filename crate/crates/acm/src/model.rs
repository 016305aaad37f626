//! Shared encoder, appearance projector, and rotation prediction head.
//!
//! The encoder is a stack of stride-2 3x3 convolution blocks with ReLU,
//! followed by global average pooling. The projector is one linear layer with
//! batch normalization and ReLU; the rotation head is one linear layer with
//! layer normalization and ReLU feeding a K-way linear output.
//!
//! Forward passes are implemented over a generic float so that training runs
//! in f32 while finite-difference oracles run in f64. Convolutions go through
//! im2col + matrix multiplication.

use crate::error::{AcmError, Result};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder_channels: Vec<usize>,
    pub feature_dim: usize,
    pub descriptor_dim: usize,
    pub rotation_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            encoder_channels: vec![16, 32, 64, 128],
            feature_dim: 128,
            descriptor_dim: 64,
            rotation_classes: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(AcmError::parameter("encoder_channels must be nonempty"));
        }
        if self.feature_dim != *self.encoder_channels.last().unwrap() {
            return Err(AcmError::parameter(
                "feature_dim must equal the last encoder channel count (global average pooling)",
            ));
        }
        if self.descriptor_dim < 2 {
            return Err(AcmError::parameter("descriptor_dim must be >= 2"));
        }
        if self.rotation_classes < 2 {
            return Err(AcmError::parameter("rotation_classes must be >= 2"));
        }
        let stages = self.encoder_channels.len() as u32;
        if self.image_size == 0 || self.image_size % (1usize << stages) != 0 {
            return Err(AcmError::parameter(format!(
                "image_size {} must be divisible by 2^{stages}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Forward-pass mode. Training uses batch statistics in the projector's
/// batch norm; evaluation uses the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    /// (out_channels, in_channels, 3, 3)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub conv: Vec<ConvLayer<F>>,
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub proj_gamma: Array1<F>,
    pub proj_beta: Array1<F>,
    pub proj_running_mean: Array1<F>,
    pub proj_running_var: Array1<F>,
    pub head_w1: Array2<F>,
    pub head_b1: Array1<F>,
    pub head_gamma: Array1<F>,
    pub head_beta: Array1<F>,
    pub head_w2: Array2<F>,
    pub head_b2: Array1<F>,
}

fn uniform_fan_in<F: NdFloat>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Vec<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let count: usize = shape.iter().product();
    (0..count)
        .map(|_| F::from(rng.gen_range(-bound..bound)).unwrap())
        .collect()
}

/// Deterministic fan-in-scaled uniform initialization.
pub fn init_params<F: NdFloat>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut conv = Vec::new();
    let mut in_ch = 3usize;
    for &out_ch in &config.encoder_channels {
        let fan_in = in_ch * 9;
        let weight = Array4::from_shape_vec(
            (out_ch, in_ch, 3, 3),
            uniform_fan_in(&mut rng, &[out_ch, in_ch, 3, 3], fan_in),
        )
        .unwrap();
        conv.push(ConvLayer { weight, bias: Array1::zeros(out_ch) });
        in_ch = out_ch;
    }
    let f_dim = config.feature_dim;
    let d_dim = config.descriptor_dim;
    let k = config.rotation_classes;
    let hidden = f_dim;
    let proj_w =
        Array2::from_shape_vec((d_dim, f_dim), uniform_fan_in(&mut rng, &[d_dim, f_dim], f_dim))
            .unwrap();
    let head_w1 = Array2::from_shape_vec(
        (hidden, f_dim),
        uniform_fan_in(&mut rng, &[hidden, f_dim], f_dim),
    )
    .unwrap();
    let head_w2 =
        Array2::from_shape_vec((k, hidden), uniform_fan_in(&mut rng, &[k, hidden], hidden))
            .unwrap();
    Ok(ModelParams {
        config: config.clone(),
        conv,
        proj_w,
        proj_b: Array1::zeros(d_dim),
        proj_gamma: Array1::ones(d_dim),
        proj_beta: Array1::zeros(d_dim),
        proj_running_mean: Array1::zeros(d_dim),
        proj_running_var: Array1::ones(d_dim),
        head_w1,
        head_b1: Array1::zeros(hidden),
        head_gamma: Array1::ones(hidden),
        head_beta: Array1::zeros(hidden),
        head_w2,
        head_b2: Array1::zeros(k),
    })
}

// ---- convolution primitives -------------------------------------------------

/// im2col for 3x3 kernels, stride 2, zero padding 1.
/// Input (C, H, W) -> (C*9, (H/2)*(W/2)).
fn im2col<F: NdFloat>(input: &Array3<F>) -> Array2<F> {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut cols = Array2::zeros((c * 9, oh * ow));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ch * 3 + ky) * 3 + kx;
                for oy in 0..oh {
                    let iy = 2 * oy + ky;
                    if iy == 0 || iy > h {
                        continue; // zero padding (iy-1 out of range)
                    }
                    for ox in 0..ow {
                        let ix = 2 * ox + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = input[[ch, iy - 1, ix - 1]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back to the input grid.
fn col2im<F: NdFloat>(dcols: &Array2<F>, c: usize, h: usize, w: usize) -> Array3<F> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ch * 3 + ky) * 3 + kx;
                for oy in 0..oh {
                    let iy = 2 * oy + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = 2 * ox + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        din[[ch, iy - 1, ix - 1]] =
                            din[[ch, iy - 1, ix - 1]] + dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    din
}

/// Per-sample encoder cache for backpropagation.
pub struct EncoderCache<F> {
    /// im2col matrices per layer.
    cols: Vec<Array2<F>>,
    /// Pre-ReLU outputs per layer, (out_ch, oh*ow).
    pre_act: Vec<Array2<F>>,
    /// Input spatial dims per layer.
    dims: Vec<(usize, usize, usize)>,
}

/// Encoder forward for one sample; returns the pooled feature vector.
pub fn encoder_forward_single<F: NdFloat>(
    params: &ModelParams<F>,
    image: &Array3<F>,
    cache: Option<&mut Vec<EncoderCache<F>>>,
) -> Result<Array1<F>> {
    let (c, h, w) = image.dim();
    if c != 3 || h != params.config.image_size || w != params.config.image_size {
        return Err(AcmError::parameter(format!(
            "encoder expects 3x{s}x{s} input, got {c}x{h}x{w}",
            s = params.config.image_size
        )));
    }
    let mut cur = image.clone();
    let mut layer_cache = EncoderCache { cols: Vec::new(), pre_act: Vec::new(), dims: Vec::new() };
    let want_cache = cache.is_some();
    for layer in &params.conv {
        let (ci, hi, wi) = cur.dim();
        let cols = im2col(&cur);
        let oc = layer.weight.dim().0;
        let wmat = layer
            .weight
            .view()
            .into_shape_with_order((oc, ci * 9))
            .expect("contiguous conv weight");
        let mut out = wmat.dot(&cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(layer.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        if want_cache {
            layer_cache.cols.push(cols);
            layer_cache.pre_act.push(out.clone());
            layer_cache.dims.push((ci, hi, wi));
        }
        out.mapv_inplace(|v| v.max(F::zero()));
        let (oh, ow) = (hi / 2, wi / 2);
        cur = out.into_shape_with_order((oc, oh, ow)).expect("conv output shape");
    }
    // global average pooling
    let (oc, oh, ow) = cur.dim();
    let scale = F::from(1.0 / (oh * ow) as f64).unwrap();
    let features = cur
        .into_shape_with_order((oc, oh * ow))
        .expect("pool shape")
        .sum_axis(Axis(1))
        * scale;
    if let Some(caches) = cache {
        caches.push(layer_cache);
    }
    Ok(features)
}

/// Gradients of the trainable tensors, same shapes as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads<F> {
    pub conv_w: Vec<Array4<F>>,
    pub conv_b: Vec<Array1<F>>,
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub proj_gamma: Array1<F>,
    pub proj_beta: Array1<F>,
    pub head_w1: Array2<F>,
    pub head_b1: Array1<F>,
    pub head_gamma: Array1<F>,
    pub head_beta: Array1<F>,
    pub head_w2: Array2<F>,
    pub head_b2: Array1<F>,
}

impl<F: NdFloat> ModelGrads<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        ModelGrads {
            conv_w: params.conv.iter().map(|l| Array4::zeros(l.weight.raw_dim())).collect(),
            conv_b: params.conv.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
            proj_w: Array2::zeros(params.proj_w.raw_dim()),
            proj_b: Array1::zeros(params.proj_b.raw_dim()),
            proj_gamma: Array1::zeros(params.proj_gamma.raw_dim()),
            proj_beta: Array1::zeros(params.proj_beta.raw_dim()),
            head_w1: Array2::zeros(params.head_w1.raw_dim()),
            head_b1: Array1::zeros(params.head_b1.raw_dim()),
            head_gamma: Array1::zeros(params.head_gamma.raw_dim()),
            head_beta: Array1::zeros(params.head_beta.raw_dim()),
            head_w2: Array2::zeros(params.head_w2.raw_dim()),
            head_b2: Array1::zeros(params.head_b2.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads<F>) {
        for (a, b) in self.conv_w.iter_mut().zip(&other.conv_w) {
            *a += b;
        }
        for (a, b) in self.conv_b.iter_mut().zip(&other.conv_b) {
            *a += b;
        }
        self.proj_w += &other.proj_w;
        self.proj_b += &other.proj_b;
        self.proj_gamma += &other.proj_gamma;
        self.proj_beta += &other.proj_beta;
        self.head_w1 += &other.head_w1;
        self.head_b1 += &other.head_b1;
        self.head_gamma += &other.head_gamma;
        self.head_beta += &other.head_beta;
        self.head_w2 += &other.head_w2;
        self.head_b2 += &other.head_b2;
    }

    pub fn scale(&mut self, factor: F) {
        for a in self.conv_w.iter_mut() {
            a.mapv_inplace(|v| v * factor);
        }
        for a in self.conv_b.iter_mut() {
            a.mapv_inplace(|v| v * factor);
        }
        for a in [
            &mut self.proj_gamma,
            &mut self.proj_beta,
            &mut self.proj_b,
            &mut self.head_b1,
            &mut self.head_gamma,
            &mut self.head_beta,
            &mut self.head_b2,
        ] {
            a.mapv_inplace(|v| v * factor);
        }
        for a in [&mut self.proj_w, &mut self.head_w1, &mut self.head_w2] {
            a.mapv_inplace(|v| v * factor);
        }
    }
}

/// Backpropagate one sample's feature gradient through the encoder.
/// Accumulates weight gradients into `grads`; returns the input gradient.
pub fn encoder_backward_single<F: NdFloat>(
    params: &ModelParams<F>,
    cache: &EncoderCache<F>,
    dfeatures: &Array1<F>,
    grads: &mut ModelGrads<F>,
) -> Array3<F> {
    let layers = params.conv.len();
    let (c_last, h_last, w_last) = cache.dims[layers - 1];
    let (oh, ow) = (h_last / 2, w_last / 2);
    let _ = c_last;
    // GAP backward
    let oc = params.conv[layers - 1].weight.dim().0;
    let scale = F::from(1.0 / (oh * ow) as f64).unwrap();
    let mut dout = Array2::zeros((oc, oh * ow));
    for (mut row, &g) in dout.rows_mut().into_iter().zip(dfeatures.iter()) {
        row.fill(g * scale);
    }
    for li in (0..layers).rev() {
        let (ci, hi, wi) = cache.dims[li];
        let layer = &params.conv[li];
        let ocl = layer.weight.dim().0;
        // ReLU backward
        let pre = &cache.pre_act[li];
        let mut dpre = dout;
        dpre.zip_mut_with(pre, |g, &p| {
            if p <= F::zero() {
                *g = F::zero();
            }
        });
        // weight/bias grads
        let cols = &cache.cols[li];
        let dwmat = dpre.dot(&cols.t()); // (oc, ci*9)
        let dw4 = dwmat.into_shape_with_order((ocl, ci, 3, 3)).expect("weight grad shape");
        grads.conv_w[li] += &dw4;
        let db = dpre.sum_axis(Axis(1));
        grads.conv_b[li] += &db;
        // input grads
        let wmat = layer
            .weight
            .view()
            .into_shape_with_order((ocl, ci * 9))
            .expect("contiguous conv weight");
        let dcols = wmat.t().dot(&dpre);
        let din = col2im(&dcols, ci, hi, wi);
        if li == 0 {
            return din;
        }
        // (ci, hi, wi) is the previous layer's post-ReLU output grid
        dout = din.into_shape_with_order((ci, hi * wi)).expect("grad shape");
    }
    unreachable!("loop returns at layer 0")
}

// ---- projector --------------------------------------------------------------

pub struct ProjectorCache<F> {
    features: Array2<F>,
    var: Array1<F>,
    xhat: Array2<F>,
    post_bn: Array2<F>,
}

/// Batch statistics of the last training-mode projector pass, for updating
/// running averages.
pub struct BatchStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// Projector forward: linear -> batch norm -> ReLU. Output is NOT
/// L2-normalized; normalization belongs to the retrieval stage.
pub fn projector_forward<F: NdFloat>(
    params: &ModelParams<F>,
    features: ArrayView2<F>,
    mode: Mode,
) -> Result<Array2<F>> {
    projector_forward_cached(params, features, mode, false).map(|(out, _, _)| out)
}

pub fn projector_forward_cached<F: NdFloat>(
    params: &ModelParams<F>,
    features: ArrayView2<F>,
    mode: Mode,
    want_cache: bool,
) -> Result<(Array2<F>, Option<ProjectorCache<F>>, Option<BatchStats<F>>)> {
    let (b, f) = features.dim();
    if f != params.config.feature_dim {
        return Err(AcmError::parameter(format!(
            "projector expects feature dim {}, got {f}",
            params.config.feature_dim
        )));
    }
    if b == 0 {
        return Err(AcmError::parameter("empty batch"));
    }
    let eps = F::from(BN_EPS).unwrap();
    let linear_out = features.dot(&params.proj_w.t()) + &params.proj_b;
    let (mean, var) = match mode {
        Mode::Train => {
            let bn = F::from(b as f64).unwrap();
            let mean = linear_out.sum_axis(Axis(0)) / bn;
            let centered = &linear_out - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / bn;
            (mean, var)
        }
        Mode::Eval => (params.proj_running_mean.clone(), params.proj_running_var.clone()),
    };
    let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = (&linear_out - &mean) * &inv_std;
    let post_bn = &xhat * &params.proj_gamma + &params.proj_beta;
    let out = post_bn.mapv(|v| v.max(F::zero()));
    let stats = match mode {
        Mode::Train => Some(BatchStats { mean: mean.clone(), var: var.clone() }),
        Mode::Eval => None,
    };
    let cache = if want_cache {
        Some(ProjectorCache { features: features.to_owned(), var, xhat, post_bn })
    } else {
        None
    };
    Ok((out, cache, stats))
}

/// Projector backward (training-mode batch norm). Returns dFeatures.
pub fn projector_backward<F: NdFloat>(
    params: &ModelParams<F>,
    cache: &ProjectorCache<F>,
    dout: &Array2<F>,
    mode: Mode,
    grads: &mut ModelGrads<F>,
) -> Array2<F> {
    let b = cache.features.nrows();
    let eps = F::from(BN_EPS).unwrap();
    // ReLU
    let mut dpost = dout.clone();
    dpost.zip_mut_with(&cache.post_bn, |g, &p| {
        if p <= F::zero() {
            *g = F::zero();
        }
    });
    // affine
    grads.proj_gamma += &(&dpost * &cache.xhat).sum_axis(Axis(0));
    grads.proj_beta += &dpost.sum_axis(Axis(0));
    let dxhat = &dpost * &params.proj_gamma;
    let inv_std = cache.var.mapv(|v| F::one() / (v + eps).sqrt());
    let dlinear = match mode {
        Mode::Eval => &dxhat * &inv_std,
        Mode::Train => {
            // full batch-norm backward with batch statistics
            let bn = F::from(b as f64).unwrap();
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let mut dlin = Array2::zeros(dxhat.raw_dim());
            for r in 0..b {
                for c in 0..dxhat.ncols() {
                    let term = dxhat[[r, c]] * bn
                        - sum_dxhat[c]
                        - cache.xhat[[r, c]] * sum_dxhat_xhat[c];
                    dlin[[r, c]] = inv_std[c] / bn * term;
                }
            }
            dlin
        }
    };
    grads.proj_w += &dlinear.t().dot(&cache.features);
    grads.proj_b += &dlinear.sum_axis(Axis(0));
    dlinear.dot(&params.proj_w)
}

// ---- rotation head ----------------------------------------------------------

pub struct HeadCache<F> {
    features: Array2<F>,
    linear_out: Array2<F>,
    xhat: Array2<F>,
    inv_std: Array1<F>,
    post_ln: Array2<F>,
    activated: Array2<F>,
}

/// Rotation head forward: linear -> layer norm -> ReLU -> K-way linear.
/// Returns logits; the softmax lives in the loss.
pub fn rotation_head_forward<F: NdFloat>(
    params: &ModelParams<F>,
    features: ArrayView2<F>,
) -> Result<Array2<F>> {
    rotation_head_forward_cached(params, features, false).map(|(l, _)| l)
}

pub fn rotation_head_forward_cached<F: NdFloat>(
    params: &ModelParams<F>,
    features: ArrayView2<F>,
    want_cache: bool,
) -> Result<(Array2<F>, Option<HeadCache<F>>)> {
    let (b, f) = features.dim();
    if f != params.config.feature_dim {
        return Err(AcmError::parameter(format!(
            "rotation head expects feature dim {}, got {f}",
            params.config.feature_dim
        )));
    }
    let eps = F::from(LN_EPS).unwrap();
    let linear_out = features.dot(&params.head_w1.t()) + &params.head_b1;
    let h = linear_out.ncols();
    let hn = F::from(h as f64).unwrap();
    let mut xhat = Array2::zeros(linear_out.raw_dim());
    let mut inv_std = Array1::zeros(b);
    for r in 0..b {
        let row = linear_out.row(r);
        let mean = row.sum() / hn;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / hn;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..h {
            xhat[[r, c]] = (linear_out[[r, c]] - mean) * istd;
        }
    }
    let post_ln = &xhat * &params.head_gamma + &params.head_beta;
    let activated = post_ln.mapv(|v| v.max(F::zero()));
    let logits = activated.dot(&params.head_w2.t()) + &params.head_b2;
    let cache = if want_cache {
        Some(HeadCache { features: features.to_owned(), linear_out, xhat, inv_std, post_ln, activated })
    } else {
        None
    };
    Ok((logits, cache))
}

/// Rotation head backward; returns dFeatures.
pub fn rotation_head_backward<F: NdFloat>(
    params: &ModelParams<F>,
    cache: &HeadCache<F>,
    dlogits: &Array2<F>,
    grads: &mut ModelGrads<F>,
) -> Array2<F> {
    let (b, h) = cache.linear_out.dim();
    grads.head_w2 += &dlogits.t().dot(&cache.activated);
    grads.head_b2 += &dlogits.sum_axis(Axis(0));
    let mut dact = dlogits.dot(&params.head_w2);
    dact.zip_mut_with(&cache.post_ln, |g, &p| {
        if p <= F::zero() {
            *g = F::zero();
        }
    });
    grads.head_gamma += &(&dact * &cache.xhat).sum_axis(Axis(0));
    grads.head_beta += &dact.sum_axis(Axis(0));
    let dxhat = &dact * &params.head_gamma;
    // layer-norm backward, per row
    let hn = F::from(h as f64).unwrap();
    let mut dlinear = Array2::zeros((b, h));
    for r in 0..b {
        let mut sum_d = F::zero();
        let mut sum_dx = F::zero();
        for c in 0..h {
            sum_d = sum_d + dxhat[[r, c]];
            sum_dx = sum_dx + dxhat[[r, c]] * cache.xhat[[r, c]];
        }
        for c in 0..h {
            dlinear[[r, c]] = cache.inv_std[r]
                * (dxhat[[r, c]] - sum_d / hn - cache.xhat[[r, c]] * sum_dx / hn);
        }
    }
    grads.head_w1 += &dlinear.t().dot(&cache.features);
    grads.head_b1 += &dlinear.sum_axis(Axis(0));
    dlinear.dot(&params.head_w1)
}

// ---- parameter flattening (optimizer and finite differences) ---------------

impl<F: NdFloat> ModelParams<F> {
    /// Trainable parameters as one flat vector (fixed ordering; running
    /// batch-norm statistics are excluded).
    pub fn flatten_trainable(&self) -> Vec<F> {
        let mut out = Vec::new();
        for layer in &self.conv {
            out.extend(layer.weight.iter().cloned());
            out.extend(layer.bias.iter().cloned());
        }
        out.extend(self.proj_w.iter().cloned());
        out.extend(self.proj_b.iter().cloned());
        out.extend(self.proj_gamma.iter().cloned());
        out.extend(self.proj_beta.iter().cloned());
        out.extend(self.head_w1.iter().cloned());
        out.extend(self.head_b1.iter().cloned());
        out.extend(self.head_gamma.iter().cloned());
        out.extend(self.head_beta.iter().cloned());
        out.extend(self.head_w2.iter().cloned());
        out.extend(self.head_b2.iter().cloned());
        out
    }

    /// Write a flat vector produced by [`Self::flatten_trainable`] back.
    pub fn unflatten_trainable(&mut self, flat: &[F]) {
        let mut it = flat.iter().cloned();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut F>| {
            for v in dst {
                *v = it.next().expect("flat vector long enough");
            }
        };
        for layer in &mut self.conv {
            fill(&mut layer.weight.iter_mut());
            fill(&mut layer.bias.iter_mut());
        }
        fill(&mut self.proj_w.iter_mut());
        fill(&mut self.proj_b.iter_mut());
        fill(&mut self.proj_gamma.iter_mut());
        fill(&mut self.proj_beta.iter_mut());
        fill(&mut self.head_w1.iter_mut());
        fill(&mut self.head_b1.iter_mut());
        fill(&mut self.head_gamma.iter_mut());
        fill(&mut self.head_beta.iter_mut());
        fill(&mut self.head_w2.iter_mut());
        fill(&mut self.head_b2.iter_mut());
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn trainable_count(&self) -> usize {
        self.flatten_trainable().len()
    }

    /// Update batch-norm running averages after a training-mode pass.
    pub fn update_bn_running(&mut self, stats: &BatchStats<F>) {
        let m = F::from(BN_MOMENTUM).unwrap();
        let one_m = F::one() - m;
        self.proj_running_mean =
            self.proj_running_mean.mapv(|v| v * m) + &stats.mean.mapv(|v| v * one_m);
        self.proj_running_var =
            self.proj_running_var.mapv(|v| v * m) + &stats.var.mapv(|v| v * one_m);
    }

    /// Cast every tensor (f32 <-> f64 and friends).
    pub fn cast<G: NdFloat>(&self) -> ModelParams<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from(v).unwrap());
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from(v).unwrap());
        ModelParams {
            config: self.config.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.mapv(|v| G::from(v).unwrap()),
                    bias: c1(&l.bias),
                })
                .collect(),
            proj_w: c2(&self.proj_w),
            proj_b: c1(&self.proj_b),
            proj_gamma: c1(&self.proj_gamma),
            proj_beta: c1(&self.proj_beta),
            proj_running_mean: c1(&self.proj_running_mean),
            proj_running_var: c1(&self.proj_running_var),
            head_w1: c2(&self.head_w1),
            head_b1: c1(&self.head_b1),
            head_gamma: c1(&self.head_gamma),
            head_beta: c1(&self.head_beta),
            head_w2: c2(&self.head_w2),
            head_b2: c1(&self.head_b2),
        }
    }
}

impl<F: NdFloat> ModelGrads<F> {
    /// Same ordering as [`ModelParams::flatten_trainable`].
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.extend(w.iter().cloned());
            out.extend(b.iter().cloned());
        }
        out.extend(self.proj_w.iter().cloned());
        out.extend(self.proj_b.iter().cloned());
        out.extend(self.proj_gamma.iter().cloned());
        out.extend(self.proj_beta.iter().cloned());
        out.extend(self.head_w1.iter().cloned());
        out.extend(self.head_b1.iter().cloned());
        out.extend(self.head_gamma.iter().cloned());
        out.extend(self.head_beta.iter().cloned());
        out.extend(self.head_w2.iter().cloned());
        out.extend(self.head_b2.iter().cloned());
        out
    }
}

/// Batched encoder forward over a slice of images; parallel per sample.
pub fn encoder_forward_batch<F: NdFloat>(
    params: &ModelParams<F>,
    images: &[Array3<F>],
) -> Result<Array2<F>> {
    let rows: Result<Vec<Array1<F>>> = crate::parallel::map_slice(images, |img| {
        encoder_forward_single(params, img, None)
    })
    .into_iter()
    .collect();
    let rows = rows?;
    let f = params.config.feature_dim;
    let mut out = Array2::zeros((images.len(), f));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

// ---- named tensors (checkpoint container) -----------------------------------

/// A named tensor with shape, used by the checkpoint container.
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ModelParams<f32> {
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("conv{i}.weight"),
                shape: layer.weight.shape().to_vec(),
                data: layer.weight.iter().cloned().collect(),
            });
            out.push(NamedTensor {
                name: format!("conv{i}.bias"),
                shape: layer.bias.shape().to_vec(),
                data: layer.bias.to_vec(),
            });
        }
        let mut push1 = |name: &str, a: &Array1<f32>| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.to_vec(),
            });
        };
        push1("proj.bias", &self.proj_b);
        push1("proj.gamma", &self.proj_gamma);
        push1("proj.beta", &self.proj_beta);
        push1("proj.running_mean", &self.proj_running_mean);
        push1("proj.running_var", &self.proj_running_var);
        push1("head.bias1", &self.head_b1);
        push1("head.gamma", &self.head_gamma);
        push1("head.beta", &self.head_beta);
        push1("head.bias2", &self.head_b2);
        for (name, a) in
            [("proj.weight", &self.proj_w), ("head.weight1", &self.head_w1), ("head.weight2", &self.head_w2)]
        {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.iter().cloned().collect(),
            });
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn from_named_tensors(config: &ModelConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let mut params: ModelParams<f32> = init_params(config)?;
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| AcmError::Format(format!("checkpoint missing tensor '{name}'")))
        };
        let load1 = |t: &NamedTensor, dst: &mut Array1<f32>| -> Result<()> {
            if t.shape != dst.shape() {
                return Err(AcmError::Format(format!("tensor '{}' has wrong shape", t.name)));
            }
            dst.assign(&Array1::from_vec(t.data.clone()));
            Ok(())
        };
        for i in 0..params.conv.len() {
            let wt = find(&format!("conv{i}.weight"))?;
            let shape = params.conv[i].weight.shape().to_vec();
            if wt.shape != shape {
                return Err(AcmError::Format(format!("tensor '{}' has wrong shape", wt.name)));
            }
            params.conv[i].weight =
                Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), wt.data.clone())
                    .expect("validated shape");
            let bt = find(&format!("conv{i}.bias"))?;
            load1(bt, &mut params.conv[i].bias)?;
        }
        let load2 = |t: &NamedTensor, dst: &mut Array2<f32>| -> Result<()> {
            if t.shape != dst.shape() {
                return Err(AcmError::Format(format!("tensor '{}' has wrong shape", t.name)));
            }
            *dst = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .expect("validated shape");
            Ok(())
        };
        load2(find("proj.weight")?, &mut params.proj_w)?;
        load1(find("proj.bias")?, &mut params.proj_b)?;
        load1(find("proj.gamma")?, &mut params.proj_gamma)?;
        load1(find("proj.beta")?, &mut params.proj_beta)?;
        load1(find("proj.running_mean")?, &mut params.proj_running_mean)?;
        load1(find("proj.running_var")?, &mut params.proj_running_var)?;
        load2(find("head.weight1")?, &mut params.head_w1)?;
        load1(find("head.bias1")?, &mut params.head_b1)?;
        load1(find("head.gamma")?, &mut params.head_gamma)?;
        load1(find("head.beta")?, &mut params.head_beta)?;
        load2(find("head.weight2")?, &mut params.head_w2)?;
        load1(find("head.bias2")?, &mut params.head_b2)?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference_gradient, max_relative_error};
    use ndarray::Array3;
    use rand::Rng;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            encoder_channels: vec![4, 8],
            feature_dim: 8,
            descriptor_dim: 4,
            rotation_classes: 4,
            init_seed: seed,
        }
    }

    fn random_image(seed: u64, size: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, size, size), |_| rng.gen_range(0.0..1.0))
    }

    fn random_features(seed: u64, b: usize, f: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((b, f), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let config = small_config(3);
        let a: ModelParams<f64> = init_params(&config).unwrap();
        let b: ModelParams<f64> = init_params(&config).unwrap();
        assert_eq!(a.flatten_trainable(), b.flatten_trainable());
        let other: ModelParams<f64> = init_params(&small_config(4)).unwrap();
        assert_ne!(a.flatten_trainable(), other.flatten_trainable());
        // weights are fan-in bounded; norm gains start at exactly 1
        for v in a.flatten_trainable() {
            assert!(v.is_finite() && v.abs() <= 1.0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(0);
        c.image_size = 17;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.feature_dim = 5;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.descriptor_dim = 1;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.rotation_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_config_parameter_count_is_stable() {
        let params: ModelParams<f32> = init_params(&ModelConfig::default()).unwrap();
        assert_eq!(params.trainable_count(), 123_108);
    }

    #[test]
    fn encoder_handles_zero_image_and_rejects_bad_shapes() {
        let params: ModelParams<f64> = init_params(&small_config(1)).unwrap();
        let zero = Array3::zeros((3, 16, 16));
        let f = encoder_forward_single(&params, &zero, None).unwrap();
        assert_eq!(f.len(), 8);
        assert!(f.iter().all(|v| v.is_finite()));
        let bad = Array3::zeros((3, 8, 8));
        assert!(encoder_forward_single(&params, &bad, None).is_err());
    }

    #[test]
    fn batched_encoder_rows_are_per_sample_deterministic() {
        let params: ModelParams<f64> = init_params(&small_config(1)).unwrap();
        let img = random_image(7, 16);
        let batch = encoder_forward_batch(&params, &[img.clone(), img]).unwrap();
        assert_eq!(batch.row(0), batch.row(1));
    }

    #[test]
    fn projector_output_dims() {
        for d in [2usize, 64, 1024] {
            let mut config = small_config(0);
            config.descriptor_dim = d;
            let params: ModelParams<f64> = init_params(&config).unwrap();
            let feats = random_features(1, 3, 8);
            let out = projector_forward(&params, feats.view(), Mode::Eval).unwrap();
            assert_eq!(out.dim(), (3, d));
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn head_softmax_normalizes() {
        let params: ModelParams<f64> = init_params(&small_config(2)).unwrap();
        let feats = random_features(2, 5, 8);
        let logits = rotation_head_forward(&params, feats.view()).unwrap();
        assert_eq!(logits.ncols(), 4);
        for row in logits.rows() {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - m).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let config = small_config(seed);
            let params: ModelParams<f64> = init_params(&config).unwrap();
            let images = vec![random_image(seed * 2, 16), random_image(seed * 2 + 1, 16)];
            // analytic: probe = sum of all features over the batch
            let mut caches = Vec::new();
            for img in &images {
                encoder_forward_single(&params, img, Some(&mut caches)).unwrap();
            }
            let mut grads = ModelGrads::zeros_like(&params);
            let dfeat = Array1::ones(config.feature_dim);
            for cache in &caches {
                encoder_backward_single(&params, cache, &dfeat, &mut grads);
            }
            let analytic = grads.flatten();
            let flat = params.flatten_trainable();
            let probe = |x: &[f64]| -> f64 {
                let mut p = params.clone();
                p.unflatten_trainable(x);
                images
                    .iter()
                    .map(|img| encoder_forward_single(&p, img, None).unwrap().sum())
                    .sum()
            };
            let fd = finite_difference_gradient(&flat, 1e-5, probe);
            let fd_coarse = finite_difference_gradient(&flat, 1e-4, probe);
            let mut err = 0f64;
            for i in 0..flat.len() {
                // a step-dependent FD means a ReLU kink sits inside the probe
                // interval; the true derivative is undefined there, skip it
                if (fd[i] - fd_coarse[i]).abs() > 1e-4 * fd[i].abs().max(1.0) {
                    continue;
                }
                let denom = fd[i].abs().max(analytic[i].abs()).max(1e-6);
                err = err.max((analytic[i] - fd[i]).abs() / denom);
            }
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn encoder_input_gradients_match_finite_differences() {
        let config = small_config(9);
        let params: ModelParams<f64> = init_params(&config).unwrap();
        let image = random_image(30, 16);
        let mut caches = Vec::new();
        encoder_forward_single(&params, &image, Some(&mut caches)).unwrap();
        let mut grads = ModelGrads::zeros_like(&params);
        let din = encoder_backward_single(
            &params,
            &caches[0],
            &Array1::ones(config.feature_dim),
            &mut grads,
        );
        let analytic: Vec<f64> = din.iter().cloned().collect();
        let flat: Vec<f64> = image.iter().cloned().collect();
        let fd = finite_difference_gradient(&flat, 1e-5, |x| {
            let img = Array3::from_shape_vec((3, 16, 16), x.to_vec()).unwrap();
            encoder_forward_single(&params, &img, None).unwrap().sum()
        });
        let err = max_relative_error(&analytic, &fd, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let config = small_config(seed + 10);
            let params: ModelParams<f64> = init_params(&config).unwrap();
            let feats = random_features(seed, 4, 8);
            for mode in [Mode::Train, Mode::Eval] {
                let (out, cache, _) =
                    projector_forward_cached(&params, feats.view(), mode, true).unwrap();
                let mut grads = ModelGrads::zeros_like(&params);
                let dfeats = projector_backward(
                    &params,
                    cache.as_ref().unwrap(),
                    &Array2::ones(out.raw_dim()),
                    mode,
                    &mut grads,
                );
                let analytic = grads.flatten();
                let flat = params.flatten_trainable();
                let fd = finite_difference_gradient(&flat, 1e-5, |x| {
                    let mut p = params.clone();
                    p.unflatten_trainable(x);
                    projector_forward(&p, feats.view(), mode).unwrap().sum()
                });
                let err = max_relative_error(&analytic, &fd, 1e-6);
                assert!(err < 1e-4, "seed {seed} {mode:?}: params error {err}");

                let analytic_in: Vec<f64> = dfeats.iter().cloned().collect();
                let flat_in: Vec<f64> = feats.iter().cloned().collect();
                let fd_in = finite_difference_gradient(&flat_in, 1e-5, |x| {
                    let f = Array2::from_shape_vec((4, 8), x.to_vec()).unwrap();
                    projector_forward(&params, f.view(), mode).unwrap().sum()
                });
                let err = max_relative_error(&analytic_in, &fd_in, 1e-6);
                assert!(err < 1e-4, "seed {seed} {mode:?}: input error {err}");
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let config = small_config(seed + 20);
            let params: ModelParams<f64> = init_params(&config).unwrap();
            let feats = random_features(seed + 50, 4, 8);
            let (logits, cache) =
                rotation_head_forward_cached(&params, feats.view(), true).unwrap();
            let mut grads = ModelGrads::zeros_like(&params);
            let dfeats = rotation_head_backward(
                &params,
                cache.as_ref().unwrap(),
                &Array2::ones(logits.raw_dim()),
                &mut grads,
            );
            let analytic = grads.flatten();
            let flat = params.flatten_trainable();
            let fd = finite_difference_gradient(&flat, 1e-5, |x| {
                let mut p = params.clone();
                p.unflatten_trainable(x);
                rotation_head_forward(&p, feats.view()).unwrap().sum()
            });
            let err = max_relative_error(&analytic, &fd, 1e-6);
            assert!(err < 1e-4, "seed {seed}: params error {err}");

            let analytic_in: Vec<f64> = dfeats.iter().cloned().collect();
            let flat_in: Vec<f64> = feats.iter().cloned().collect();
            let fd_in = finite_difference_gradient(&flat_in, 1e-5, |x| {
                let f = Array2::from_shape_vec((4, 8), x.to_vec()).unwrap();
                rotation_head_forward(&params, f.view()).unwrap().sum()
            });
            let err = max_relative_error(&analytic_in, &fd_in, 1e-6);
            assert!(err < 1e-4, "seed {seed}: input error {err}");
        }
    }

    #[test]
    fn named_tensor_round_trip() {
        let config = small_config(5);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let tensors = params.named_tensors();
        let back = ModelParams::from_named_tensors(&config, &tensors).unwrap();
        assert_eq!(params, back);
    }
}
