//! End-to-end self-supervised training loop with Adam, per-step logging, and
//! per-epoch checkpointing.
//!
//! One step: sample N reference images (without replacement within the
//! epoch, last partial batch dropped), build the view batch, push the
//! contrastive sub-batch through encoder -> projector and the predictive
//! sub-batch through encoder -> rotation head, combine L = L_C + lambda*L_P,
//! and apply one Adam update. Disabled modules contribute exactly zero: their
//! branch is skipped entirely, so the parameter trajectory is bit-identical
//! to lambda-masking.

use crate::augment::{build_view_batch_with_group, TransformGroup};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::datagen::Dataset;
use crate::error::{AcmError, Result};
use crate::image::derive_seed;
use crate::loss::{
    ntxent_loss_grad, rotation_ce_loss_grad, ContrastiveConfig, DenominatorMode, LossBreakdown,
};
use crate::model::{
    encoder_backward_single, encoder_forward_single, init_params, projector_backward,
    projector_forward_cached, rotation_head_backward, rotation_head_forward_cached, Mode,
    ModelConfig, ModelGrads, ModelParams,
};
use ndarray::{Array1, Array2, Array3, NdFloat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// N reference images per step; the contrastive batch holds 2N views.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub denominator_mode: DenominatorMode,
    pub global_seed: u64,
    pub enable_appearance_module: bool,
    pub enable_geometry_module: bool,
    pub geometry_group: TransformGroup,
}

impl TrainConfig {
    /// CPU-minutes defaults for desk-scale experiments.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.003,
            epochs: 30,
            temperature: 0.01,
            lambda: 1.0,
            denominator_mode: DenominatorMode::PaperExcludesSelfImage,
            global_seed: 0,
            enable_appearance_module: true,
            enable_geometry_module: true,
            geometry_group: TransformGroup::C4Rotations,
        }
    }

    /// Full-scale preset: batch 64, lr 0.003, 1000 epochs, tau 0.01, lambda 1.
    pub fn paper() -> Self {
        TrainConfig { batch_size: 64, epochs: 1000, ..TrainConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(AcmError::parameter("learning_rate must be positive"));
        }
        if self.enable_appearance_module && self.batch_size < 2 {
            return Err(AcmError::parameter(
                "batch_size must be >= 2 with the appearance module enabled",
            ));
        }
        if self.batch_size < 1 {
            return Err(AcmError::parameter("batch_size must be >= 1"));
        }
        if self.temperature <= 0.0 {
            return Err(AcmError::parameter("temperature must be positive"));
        }
        Ok(())
    }

    fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            denominator_mode: self.denominator_mode,
        }
    }

    /// Geometry branch is active only if enabled and actually weighted.
    fn geometry_active(&self) -> bool {
        self.enable_geometry_module && self.lambda != 0.0
    }
}

// ---- Adam -------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment estimates over the flat trainable parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: NdFloat> AdamState<F> {
    pub fn new(param_count: usize) -> Self {
        AdamState { m: vec![F::zero(); param_count], v: vec![F::zero(); param_count], t: 0 }
    }
}

/// One Adam update with bias correction. Mutates `params` and `state`.
pub fn adam_step<F: NdFloat>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AcmError::parameter(format!(
            "adam shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = F::from(ADAM_BETA1).unwrap();
    let b2 = F::from(ADAM_BETA2).unwrap();
    let eps = F::from(ADAM_EPS).unwrap();
    let lr = F::from(learning_rate).unwrap();
    let corr1 = F::one() - F::from(ADAM_BETA1.powi(state.t as i32)).unwrap();
    let corr2 = F::one() - F::from(ADAM_BETA2.powi(state.t as i32)).unwrap();
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

// ---- training loop ----------------------------------------------------------

/// One NDJSON log record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "L_C")]
    pub l_c: f64,
    #[serde(rename = "L_P")]
    pub l_p: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub wall_ms: f64,
}

pub struct TrainOptions<'a> {
    /// Directory for per-epoch checkpoints (`epoch_NNNN.ckpt`, `final.ckpt`).
    pub checkpoint_dir: Option<&'a Path>,
    /// NDJSON sink for log records.
    pub log_writer: Option<&'a mut dyn Write>,
    /// Resume state; when set, training continues from `next_epoch`.
    pub resume: Option<Checkpoint>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { checkpoint_dir: None, log_writer: None, resume: None }
    }
}

/// Deterministic within-epoch sampling order.
pub fn epoch_permutation(global_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(global_seed, 0xe9, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Run the training loop; returns the final parameters and the full log.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<(ModelParams<f32>, Vec<LogRecord>)> {
    model_config.validate()?;
    train_config.validate()?;
    let reference: Vec<Array3<f32>> = dataset
        .reference_sequence()
        .frames
        .iter()
        .map(|f| f.image.clone())
        .collect();
    if reference.is_empty() {
        return Err(AcmError::parameter("dataset has no reference images"));
    }
    if train_config.batch_size > reference.len() {
        return Err(AcmError::parameter(format!(
            "batch_size {} exceeds the {} reference images",
            train_config.batch_size,
            reference.len()
        )));
    }

    let (mut params, mut adam, start_epoch) = match opts.resume.take() {
        Some(ckpt) => {
            if &ckpt.params.config != model_config {
                return Err(AcmError::parameter(
                    "resume checkpoint was written with a different model config",
                ));
            }
            let count = ckpt.params.trainable_count();
            let adam = ckpt.adam.unwrap_or_else(|| AdamState::new(count));
            (ckpt.params, adam, ckpt.next_epoch)
        }
        None => {
            let params: ModelParams<f32> = init_params(model_config)?;
            let count = params.trainable_count();
            (params, AdamState::new(count), 0)
        }
    };

    let mut log = Vec::new();
    let mut step: u64 = (start_epoch * (reference.len() / train_config.batch_size)) as u64;
    for epoch in start_epoch..train_config.epochs {
        let order = epoch_permutation(train_config.global_seed, epoch, reference.len());
        let n = train_config.batch_size;
        for (batch_idx, chunk) in order.chunks_exact(n).enumerate() {
            let started = Instant::now();
            let images: Vec<Array3<f32>> =
                chunk.iter().map(|&i| reference[i].clone()).collect();
            let batch_seed = derive_seed(
                train_config.global_seed,
                epoch as u64,
                batch_idx as u64,
            );
            let breakdown =
                train_step(&mut params, &mut adam, &images, batch_seed, train_config)
                    .map_err(|e| {
                        AcmError::domain(format!("training aborted at step {step}: {e}"))
                    })?;
            let record = LogRecord {
                step,
                epoch,
                l_c: breakdown.contrastive,
                l_p: breakdown.predictive,
                l_total: breakdown.total,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            if let Some(w) = opts.log_writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&record)?)?;
            }
            log.push(record);
            step += 1;
        }
        if let Some(dir) = opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let ckpt = Checkpoint {
                params: params.clone(),
                adam: Some(adam.clone()),
                next_epoch: epoch + 1,
            };
            save_checkpoint(&ckpt, &dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
    }
    calibrate_bn_statistics(&mut params, &reference)?;
    if let Some(dir) = opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = Checkpoint {
            params: params.clone(),
            adam: Some(adam.clone()),
            next_epoch: train_config.epochs,
        };
        save_checkpoint(&ckpt, &dir.join("final.ckpt"))?;
    }
    Ok((params, log))
}

/// Recompute the projector's normalization statistics over a clean image set.
///
/// Step-wise momentum tracking only happens while the appearance branch
/// trains; a model whose projector never ran (geometry-only, or an untrained
/// baseline) would otherwise normalize against the initial (0, 1) statistics,
/// which leaves every descriptor in the same orthant and saturates all cosine
/// comparisons. Recalibrating on the training images at the end gives every
/// configuration honestly centered evaluation-mode descriptors.
pub fn calibrate_bn_statistics(
    params: &mut ModelParams<f32>,
    images: &[Array3<f32>],
) -> Result<()> {
    if images.is_empty() {
        return Err(AcmError::parameter("cannot calibrate statistics on zero images"));
    }
    let features = crate::model::encoder_forward_batch(params, images)?;
    let linear = features.dot(&params.proj_w.t()) + &params.proj_b;
    let m = images.len() as f32;
    let mean = linear.sum_axis(ndarray::Axis(0)) / m;
    let centered = &linear - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(ndarray::Axis(0)) / m;
    params.proj_running_mean = mean;
    params.proj_running_var = var;
    Ok(())
}

/// One optimizer step over a fixed set of reference images.
pub fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    images: &[Array3<f32>],
    batch_seed: u64,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut grads = ModelGrads::zeros_like(params);
    let mut l_c = 0.0f64;
    let mut l_p = 0.0f64;
    let mut bn_stats = None;

    let batch = build_view_batch_with_group(images, batch_seed, config.geometry_group)?;

    if config.enable_appearance_module {
        let mut caches = Vec::with_capacity(batch.contrastive.len());
        let mut features = Array2::zeros((batch.contrastive.len(), params.config.feature_dim));
        for (i, img) in batch.contrastive.iter().enumerate() {
            let f = encoder_forward_single(params, img, Some(&mut caches))?;
            features.row_mut(i).assign(&f);
        }
        let (descriptors, proj_cache, stats) =
            projector_forward_cached(params, features.view(), Mode::Train, true)?;
        bn_stats = stats;
        let (loss, dz) = ntxent_loss_grad(descriptors.view(), &config.contrastive())?;
        l_c = loss as f64;
        let dfeatures = projector_backward(
            params,
            proj_cache.as_ref().expect("cache requested"),
            &dz,
            Mode::Train,
            &mut grads,
        );
        for (i, cache) in caches.iter().enumerate() {
            let row: Array1<f32> = dfeatures.row(i).to_owned();
            encoder_backward_single(params, cache, &row, &mut grads);
        }
    }

    if config.geometry_active() {
        let mut caches = Vec::with_capacity(batch.predictive.len());
        let mut features = Array2::zeros((batch.predictive.len(), params.config.feature_dim));
        for (i, img) in batch.predictive.iter().enumerate() {
            let f = encoder_forward_single(params, img, Some(&mut caches))?;
            features.row_mut(i).assign(&f);
        }
        let (logits, head_cache) = rotation_head_forward_cached(params, features.view(), true)?;
        let (loss, mut dlogits) = rotation_ce_loss_grad(logits.view(), &batch.predictive_labels)?;
        l_p = loss as f64;
        let lambda = config.lambda as f32;
        dlogits.mapv_inplace(|v| v * lambda);
        let dfeatures = rotation_head_backward(
            params,
            head_cache.as_ref().expect("cache requested"),
            &dlogits,
            &mut grads,
        );
        for (i, cache) in caches.iter().enumerate() {
            let row: Array1<f32> = dfeatures.row(i).to_owned();
            encoder_backward_single(params, cache, &row, &mut grads);
        }
    }

    let breakdown = LossBreakdown::new(l_c, l_p, config.lambda)?;
    if !breakdown.total.is_finite() {
        return Err(AcmError::domain("non-finite combined loss"));
    }

    if let Some(stats) = bn_stats {
        params.update_bn_running(&stats);
    }
    let mut flat = params.flatten_trainable();
    let flat_grads = grads.flatten();
    adam_step(&mut flat, &flat_grads, adam, config.learning_rate)?;
    params.unflatten_trainable(&flat);
    Ok(breakdown)
}
