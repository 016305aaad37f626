//! Appearance transformation family, geometric transformation groups, and
//! training batch assembly.
//!
//! Appearance transforms are pixel-level only: they change color statistics
//! but never move scene content. Each sampled pipeline is captured in a
//! replayable descriptor, so any augmented view can be reproduced exactly.

use crate::error::{AcmError, Result};
use crate::image::{derive_seed, ImageTensor, CHANNELS};
use crate::parallel::map_range;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The nine appearance transform kinds, in application (table) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    PlanckianJitter,
    ColorJiggle,
    PlasmaBrightness,
    PlasmaContrast,
    Grayscale,
    BoxBlur,
    ChannelShuffle,
    MotionBlur,
    Solarize,
}

pub const TRANSFORM_ORDER: [TransformKind; 9] = [
    TransformKind::PlanckianJitter,
    TransformKind::ColorJiggle,
    TransformKind::PlasmaBrightness,
    TransformKind::PlasmaContrast,
    TransformKind::Grayscale,
    TransformKind::BoxBlur,
    TransformKind::ChannelShuffle,
    TransformKind::MotionBlur,
    TransformKind::Solarize,
];

impl TransformKind {
    /// Per-transform application probability.
    pub fn probability(self) -> f64 {
        match self {
            TransformKind::PlanckianJitter => 0.8,
            TransformKind::ColorJiggle => 0.5,
            TransformKind::PlasmaBrightness => 0.5,
            TransformKind::PlasmaContrast => 0.3,
            TransformKind::Grayscale => 0.3,
            TransformKind::BoxBlur => 0.5,
            TransformKind::ChannelShuffle => 0.5,
            TransformKind::MotionBlur => 0.3,
            TransformKind::Solarize => 0.5,
        }
    }
}

/// One step of a sampled appearance pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStep {
    pub kind: TransformKind,
    pub applied: bool,
    pub params: Vec<f64>,
}

/// A fully sampled, replayable appearance pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceTransformDescriptor {
    pub rng_seed: u64,
    pub steps: Vec<TransformStep>,
}

impl AppearanceTransformDescriptor {
    /// Descriptor that applies nothing (identity pipeline).
    pub fn identity() -> Self {
        AppearanceTransformDescriptor {
            rng_seed: 0,
            steps: TRANSFORM_ORDER
                .iter()
                .map(|&kind| TransformStep { kind, applied: false, params: Vec::new() })
                .collect(),
        }
    }
}

const CHANNEL_PERMS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Sample one appearance pipeline. Every step gets its parameters drawn even
/// when not applied, so the descriptor alone fixes the pixel mapping.
pub fn sample_appearance_transform(rng_seed: u64) -> AppearanceTransformDescriptor {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let steps = TRANSFORM_ORDER
        .iter()
        .map(|&kind| {
            let applied = rng.gen::<f64>() < kind.probability();
            let params = match kind {
                TransformKind::PlanckianJitter => vec![rng.gen_range(3000.0..15000.0)],
                TransformKind::ColorJiggle => vec![
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(-0.1..0.1),
                ],
                TransformKind::PlasmaBrightness | TransformKind::PlasmaContrast => {
                    vec![rng.gen::<u32>() as f64]
                }
                TransformKind::Grayscale | TransformKind::BoxBlur => Vec::new(),
                TransformKind::ChannelShuffle => {
                    vec![rng.gen_range(0..CHANNEL_PERMS.len()) as f64]
                }
                TransformKind::MotionBlur => vec![rng.gen_range(0.0..std::f64::consts::PI)],
                TransformKind::Solarize => vec![rng.gen_range(0.4..0.6)],
            };
            TransformStep { kind, applied, params }
        })
        .collect();
    AppearanceTransformDescriptor { rng_seed, steps }
}

/// Blackbody per-channel gains at temperature `temp` K, normalized to green.
fn planckian_gains(temp: f64) -> [f32; 3] {
    // Planck radiance at representative channel wavelengths, in meters.
    const LAMBDA: [f64; 3] = [610e-9, 550e-9, 465e-9];
    const HC_OVER_K: f64 = 0.0143877688; // h*c/k_B  [m·K]
    let radiance = |lambda: f64| {
        1.0 / (lambda.powi(5) * ((HC_OVER_K / (lambda * temp)).exp() - 1.0))
    };
    let g = radiance(LAMBDA[1]);
    let mut gains = [0f32; 3];
    for (i, &l) in LAMBDA.iter().enumerate() {
        gains[i] = (radiance(l) / g) as f32;
    }
    // keep total intensity roughly stable
    let maxg = gains.iter().cloned().fold(f32::MIN, f32::max);
    for v in &mut gains {
        *v /= maxg;
    }
    gains
}

/// 3-octave value noise in [-1,1], deterministic in `seed`.
fn plasma_field(seed: u64, h: usize, w: usize) -> Vec<f32> {
    let lattice = |octave: u64, ix: i64, iy: i64| -> f32 {
        let v = derive_seed(seed, octave, ((ix as u64) << 32) ^ (iy as u64 & 0xffff_ffff));
        (v as f64 / u64::MAX as f64 * 2.0 - 1.0) as f32
    };
    let mut field = vec![0f32; h * w];
    let mut norm = 0f32;
    for octave in 0..3u64 {
        let cells = 2usize << octave; // 2, 4, 8 lattice cells per image side
        let amp = 0.5f32.powi(octave as i32);
        norm += amp;
        for y in 0..h {
            let fy = y as f32 / h as f32 * cells as f32;
            let iy = fy.floor() as i64;
            let ty = fy - iy as f32;
            for x in 0..w {
                let fx = x as f32 / w as f32 * cells as f32;
                let ix = fx.floor() as i64;
                let tx = fx - ix as f32;
                let v00 = lattice(octave, ix, iy);
                let v10 = lattice(octave, ix + 1, iy);
                let v01 = lattice(octave, ix, iy + 1);
                let v11 = lattice(octave, ix + 1, iy + 1);
                let v = v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty;
                field[y * w + x] += amp * v;
            }
        }
    }
    for v in &mut field {
        *v /= norm;
    }
    field
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn apply_step(image: &ImageTensor, step: &TransformStep) -> ImageTensor {
    let (_, h, w) = image.dim();
    match step.kind {
        TransformKind::PlanckianJitter => {
            let gains = planckian_gains(step.params[0]);
            let mut out = image.clone();
            for (ch, mut plane) in out.outer_iter_mut().enumerate() {
                let g = gains[ch];
                plane.mapv_inplace(|v| v * g);
            }
            out
        }
        TransformKind::ColorJiggle => {
            let (bright, contrast, sat, hue) = (
                step.params[0] as f32,
                step.params[1] as f32,
                step.params[2] as f32,
                step.params[3] as f32,
            );
            // hue rotation about the gray axis
            let theta = hue * 2.0 * std::f32::consts::PI;
            let (cos_t, sin_t) = (theta.cos(), theta.sin());
            let a = cos_t + (1.0 - cos_t) / 3.0;
            let b = (1.0 - cos_t) / 3.0 - sin_t / 3.0f32.sqrt();
            let c = (1.0 - cos_t) / 3.0 + sin_t / 3.0f32.sqrt();
            let mut out = image.clone();
            for y in 0..h {
                for x in 0..w {
                    let (r0, g0, b0) =
                        (out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                    let mut r = r0 * bright;
                    let mut g = g0 * bright;
                    let mut bl = b0 * bright;
                    r = (r - 0.5) * contrast + 0.5;
                    g = (g - 0.5) * contrast + 0.5;
                    bl = (bl - 0.5) * contrast + 0.5;
                    let l = luma(r, g, bl);
                    r = l + sat * (r - l);
                    g = l + sat * (g - l);
                    bl = l + sat * (bl - l);
                    out[[0, y, x]] = a * r + b * g + c * bl;
                    out[[1, y, x]] = c * r + a * g + b * bl;
                    out[[2, y, x]] = b * r + c * g + a * bl;
                }
            }
            out
        }
        TransformKind::PlasmaBrightness => {
            let field = plasma_field(step.params[0] as u64, h, w);
            let mut out = image.clone();
            for ch in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        out[[ch, y, x]] *= 1.0 + 0.3 * field[y * w + x];
                    }
                }
            }
            out
        }
        TransformKind::PlasmaContrast => {
            let field = plasma_field(step.params[0] as u64, h, w);
            let mut out = image.clone();
            for ch in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        let gain = 1.0 + 0.3 * field[y * w + x];
                        out[[ch, y, x]] = (out[[ch, y, x]] - 0.5) * gain + 0.5;
                    }
                }
            }
            out
        }
        TransformKind::Grayscale => {
            let mut out = image.clone();
            for y in 0..h {
                for x in 0..w {
                    let l = luma(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
                    for ch in 0..CHANNELS {
                        out[[ch, y, x]] = l;
                    }
                }
            }
            out
        }
        TransformKind::BoxBlur => {
            // 3x3 mean with replicate borders
            let mut out = Array3::zeros(image.raw_dim());
            let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
            for ch in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0f32;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                acc += image[[ch, clampi(y as i64 + dy, h), clampi(x as i64 + dx, w)]];
                            }
                        }
                        out[[ch, y, x]] = acc / 9.0;
                    }
                }
            }
            out
        }
        TransformKind::ChannelShuffle => {
            let perm = CHANNEL_PERMS[step.params[0] as usize];
            let mut out = Array3::zeros(image.raw_dim());
            for (ch, &src) in perm.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(0), ch)
                    .assign(&image.index_axis(ndarray::Axis(0), src));
            }
            out
        }
        TransformKind::MotionBlur => {
            // length-5 line kernel, bilinear taps, replicate borders
            let theta = step.params[0] as f32;
            let (dx, dy) = (theta.cos(), theta.sin());
            let mut out = Array3::zeros(image.raw_dim());
            let sample = |ch: usize, py: f32, px: f32| -> f32 {
                let px = px.clamp(0.0, w as f32 - 1.0);
                let py = py.clamp(0.0, h as f32 - 1.0);
                let x0 = px.floor() as usize;
                let y0 = py.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let tx = px - x0 as f32;
                let ty = py - y0 as f32;
                image[[ch, y0, x0]] * (1.0 - tx) * (1.0 - ty)
                    + image[[ch, y0, x1]] * tx * (1.0 - ty)
                    + image[[ch, y1, x0]] * (1.0 - tx) * ty
                    + image[[ch, y1, x1]] * tx * ty
            };
            for ch in 0..CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0f32;
                        for t in -2i32..=2 {
                            acc += sample(
                                ch,
                                y as f32 + t as f32 * dy,
                                x as f32 + t as f32 * dx,
                            );
                        }
                        out[[ch, y, x]] = acc / 5.0;
                    }
                }
            }
            out
        }
        TransformKind::Solarize => {
            let t = step.params[0] as f32;
            image.mapv(|v| if v >= t { 1.0 - v } else { v })
        }
    }
}

/// Replay an appearance pipeline. Pure in (image, descriptor); output clamped
/// to [0,1].
pub fn apply_appearance_transform(
    image: &ImageTensor,
    desc: &AppearanceTransformDescriptor,
) -> ImageTensor {
    let mut out = image.clone();
    for step in &desc.steps {
        if step.applied {
            out = apply_step(&out, step);
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Exact 90° counter-clockwise rotation, iterated `k` times.
/// Convention for k=1: `output[r][c] = input[c][H-1-r]`.
pub fn rotate90(image: &ImageTensor, k: usize) -> Result<ImageTensor> {
    let (_, h, w) = image.dim();
    if h != w {
        return Err(AcmError::parameter(format!(
            "rotate90 requires a square image, got {h}x{w}"
        )));
    }
    if k >= 4 {
        return Err(AcmError::parameter("rotation count k must be in 0..4"));
    }
    let mut out = image.clone();
    for _ in 0..k {
        let prev = out;
        let mut next = Array3::zeros(prev.raw_dim());
        for ch in 0..prev.dim().0 {
            for r in 0..h {
                for c in 0..w {
                    next[[ch, r, c]] = prev[[ch, c, h - 1 - r]];
                }
            }
        }
        out = next;
    }
    Ok(out)
}

/// Geometric transformation groups for the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformGroup {
    C4Rotations,
    Rotations2d,
    Affine2d,
    Projective2d,
}

impl TransformGroup {
    /// Number of classes for the prediction head. All groups are discretized
    /// to 4 representative elements (element 0 is always the identity).
    pub const K: usize = 4;

    pub fn all() -> [TransformGroup; 4] {
        [
            TransformGroup::C4Rotations,
            TransformGroup::Rotations2d,
            TransformGroup::Affine2d,
            TransformGroup::Projective2d,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformGroup::C4Rotations => "c4-rotations",
            TransformGroup::Rotations2d => "rotations-2d",
            TransformGroup::Affine2d => "affine-2d",
            TransformGroup::Projective2d => "projective-2d",
        }
    }

    /// Inverse-map homography (output unit coords -> input unit coords) for a
    /// representative element, for the warped (non-C4) groups.
    fn inverse_homography(self, element: usize) -> [[f32; 3]; 3] {
        const ID: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rot = |deg: f32| {
            let t = deg.to_radians();
            let (c, s) = (t.cos(), t.sin());
            // rotate about the image center (0.5, 0.5); inverse = rotate by -t
            [
                [c, s, 0.5 - 0.5 * c - 0.5 * s],
                [-s, c, 0.5 + 0.5 * s - 0.5 * c],
                [0.0, 0.0, 1.0],
            ]
        };
        match (self, element) {
            (_, 0) => ID,
            (TransformGroup::Rotations2d, 1) => rot(60.0),
            (TransformGroup::Rotations2d, 2) => rot(150.0),
            (TransformGroup::Rotations2d, 3) => rot(240.0),
            // shear, anisotropic scale, rotate-and-shift
            (TransformGroup::Affine2d, 1) => {
                [[1.0, 0.25, -0.125], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            }
            (TransformGroup::Affine2d, 2) => {
                [[1.25, 0.0, -0.125], [0.0, 0.8, 0.1], [0.0, 0.0, 1.0]]
            }
            (TransformGroup::Affine2d, 3) => {
                let mut m = rot(30.0);
                m[0][2] += 0.1;
                m[1][2] -= 0.05;
                m
            }
            // mild perspective tilts
            (TransformGroup::Projective2d, 1) => {
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.0, 0.85]]
            }
            (TransformGroup::Projective2d, 2) => {
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.3, 0.85]]
            }
            (TransformGroup::Projective2d, 3) => {
                [[0.9, 0.1, 0.0], [-0.1, 0.9, 0.1], [0.2, -0.2, 1.0]]
            }
            _ => unreachable!("element index out of range"),
        }
    }
}

/// Bilinear warp with zero padding, `hom` maps output unit coords to input
/// unit coords.
fn warp_homography(image: &ImageTensor, hom: &[[f32; 3]; 3]) -> ImageTensor {
    let (chs, h, w) = image.dim();
    let mut out = Array3::zeros(image.raw_dim());
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 + 0.5) / w as f32;
            let v = (y as f32 + 0.5) / h as f32;
            let du = hom[0][0] * u + hom[0][1] * v + hom[0][2];
            let dv = hom[1][0] * u + hom[1][1] * v + hom[1][2];
            let dw = hom[2][0] * u + hom[2][1] * v + hom[2][2];
            if dw.abs() < 1e-8 {
                continue;
            }
            let px = du / dw * w as f32 - 0.5;
            let py = dv / dw * h as f32 - 0.5;
            if px < -1.0 || py < -1.0 || px > w as f32 || py > h as f32 {
                continue;
            }
            let x0 = px.floor() as i64;
            let y0 = py.floor() as i64;
            let tx = px - x0 as f32;
            let ty = py - y0 as f32;
            let read = |ch: usize, yy: i64, xx: i64| -> f32 {
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    0.0
                } else {
                    image[[ch, yy as usize, xx as usize]]
                }
            };
            for ch in 0..chs {
                out[[ch, y, x]] = read(ch, y0, x0) * (1.0 - tx) * (1.0 - ty)
                    + read(ch, y0, x0 + 1) * tx * (1.0 - ty)
                    + read(ch, y0 + 1, x0) * (1.0 - tx) * ty
                    + read(ch, y0 + 1, x0 + 1) * tx * ty;
            }
        }
    }
    out
}

/// Apply group element `element` (class label) to an image.
pub fn apply_group_element(
    group: TransformGroup,
    element: usize,
    image: &ImageTensor,
) -> Result<ImageTensor> {
    if element >= TransformGroup::K {
        return Err(AcmError::parameter("group element index out of range"));
    }
    match group {
        TransformGroup::C4Rotations => rotate90(image, element),
        _ => Ok(warp_homography(image, &group.inverse_homography(element))),
    }
}

/// Uniformly sample a group element; returns (element index, class label).
pub fn sample_group_element(group: TransformGroup, rng_seed: u64) -> (usize, usize) {
    let _ = group; // all groups use K=4 representative elements
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let e = rng.gen_range(0..TransformGroup::K);
    (e, e)
}

/// Contrastive + predictive batch built from N reference images.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    /// 2N images ordered (x_{1,0}, x_{1,1}, ..., x_{N,0}, x_{N,1}).
    pub contrastive: Vec<ImageTensor>,
    /// 4N images: the four group elements of each original, in element order.
    pub predictive: Vec<ImageTensor>,
    /// Class labels for the predictive batch; balanced multiset {0..K}×N.
    pub predictive_labels: Vec<usize>,
    /// Index into the input image list for every original.
    pub source_indices: Vec<usize>,
}

/// Build a view batch with the C4 rotation group for the predictive branch.
pub fn build_view_batch(images: &[ImageTensor], rng_seed: u64) -> Result<ViewBatch> {
    build_view_batch_with_group(images, rng_seed, TransformGroup::C4Rotations)
}

/// Build a view batch with an explicit geometric group.
pub fn build_view_batch_with_group(
    images: &[ImageTensor],
    rng_seed: u64,
    group: TransformGroup,
) -> Result<ViewBatch> {
    let n = images.len();
    if n < 2 {
        return Err(AcmError::parameter(
            "batch size N must be >= 2: the contrastive loss denominator is empty for N = 1",
        ));
    }
    for img in images {
        let (_, h, w) = img.dim();
        if h != w {
            return Err(AcmError::parameter(format!(
                "predictive branch needs square images, got {h}x{w}"
            )));
        }
    }
    let per_sample: Vec<(Vec<ImageTensor>, Vec<ImageTensor>)> = map_range(n, |i| {
        let desc = sample_appearance_transform(derive_seed(rng_seed, 0xa0, i as u64));
        let augmented = apply_appearance_transform(&images[i], &desc);
        let contrastive = vec![images[i].clone(), augmented];
        let predictive = (0..TransformGroup::K)
            .map(|k| apply_group_element(group, k, &images[i]).expect("square input image"))
            .collect();
        (contrastive, predictive)
    });
    let mut batch = ViewBatch {
        contrastive: Vec::with_capacity(2 * n),
        predictive: Vec::with_capacity(4 * n),
        predictive_labels: Vec::with_capacity(4 * n),
        source_indices: (0..n).collect(),
    };
    for (contrastive, predictive) in per_sample {
        batch.contrastive.extend(contrastive);
        batch.predictive.extend(predictive);
        batch.predictive_labels.extend(0..TransformGroup::K);
    }
    Ok(batch)
}
