//! Contrastive (NT-Xent), rotation cross-entropy, and combined losses.
//!
//! The contrastive denominator defaults to the indicator form that excludes
//! every view of the anchor image, including the positive; the standard
//! SimCLR denominator (positive included, only the anchor itself excluded)
//! is available as a config switch. At temperature 0.01 the scaled
//! similarities reach 100, so all softmax paths are max-subtracted.

use crate::error::{AcmError, Result};
use ndarray::{Array2, ArrayView1, ArrayView2, NdFloat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DenominatorMode {
    /// The indicator 1_{k != i}: all views of the anchor image are excluded
    /// from the denominator, the positive term among them.
    PaperExcludesSelfImage,
    /// Standard SimCLR: only the anchor view itself is excluded.
    SimclrStandard,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub denominator_mode: DenominatorMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.01,
            denominator_mode: DenominatorMode::PaperExcludesSelfImage,
        }
    }
}

impl ContrastiveConfig {
    fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(AcmError::parameter("temperature must be positive and finite"))
        }
    }
}

/// Per-step loss values and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub predictive: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, predictive: f64, lambda: f64) -> Result<Self> {
        let total = total_loss(contrastive, predictive, lambda)?;
        Ok(LossBreakdown { contrastive, predictive, lambda, total })
    }
}

/// s(z1, z2) = z1·z2 / (|z1| |z2|).
pub fn cosine_similarity<F: NdFloat>(z1: ArrayView1<F>, z2: ArrayView1<F>) -> Result<F> {
    let n1 = z1.dot(&z1).sqrt();
    let n2 = z2.dot(&z2).sqrt();
    let tiny = F::from(1e-30).unwrap();
    if n1 <= tiny || n2 <= tiny {
        return Err(AcmError::domain("cosine similarity of a zero vector"));
    }
    Ok(z1.dot(&z2) / (n1 * n2))
}

fn normalized_rows<F: NdFloat>(z: ArrayView2<F>) -> Result<(Array2<F>, Vec<F>)> {
    let mut unit = z.to_owned();
    let mut norms = Vec::with_capacity(z.nrows());
    let tiny = F::from(1e-30).unwrap();
    for mut row in unit.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n <= tiny {
            return Err(AcmError::domain("zero descriptor in contrastive batch"));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((unit, norms))
}

fn denominator_members(anchor: usize, other: usize, mode: DenominatorMode) -> bool {
    match mode {
        DenominatorMode::PaperExcludesSelfImage => other / 2 != anchor / 2,
        DenominatorMode::SimclrStandard => other != anchor,
    }
}

/// NT-Xent loss over 2N descriptors ordered (z_{1,0}, z_{1,1}, ..., z_{N,1}).
pub fn ntxent_loss<F: NdFloat>(
    descriptors: ArrayView2<F>,
    config: &ContrastiveConfig,
) -> Result<F> {
    ntxent_forward(descriptors, config, false).map(|(loss, _)| loss)
}

/// NT-Xent loss plus its gradient with respect to every (unnormalized)
/// descriptor.
pub fn ntxent_loss_grad<F: NdFloat>(
    descriptors: ArrayView2<F>,
    config: &ContrastiveConfig,
) -> Result<(F, Array2<F>)> {
    let (loss, grad) = ntxent_forward(descriptors, config, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn ntxent_forward<F: NdFloat>(
    descriptors: ArrayView2<F>,
    config: &ContrastiveConfig,
    with_grad: bool,
) -> Result<(F, Option<Array2<F>>)> {
    config.validate()?;
    let rows = descriptors.nrows();
    if rows < 4 || rows % 2 != 0 {
        return Err(AcmError::parameter(format!(
            "contrastive batch needs 2N descriptors with N >= 2, got {rows} rows"
        )));
    }
    let tau = F::from(config.temperature).unwrap();
    let (unit, norms) = normalized_rows(descriptors)?;
    let sims = unit.dot(&unit.t()); // cosine similarity matrix

    let inv_2n = F::one() / F::from(rows).unwrap();
    let mut loss = F::zero();
    // dL/dS accumulated per ordered pair (anchor, other)
    let mut dsim = if with_grad { Some(Array2::<F>::zeros((rows, rows))) } else { None };

    for anchor in 0..rows {
        let positive = anchor ^ 1;
        let members: Vec<usize> = (0..rows)
            .filter(|&b| denominator_members(anchor, b, config.denominator_mode))
            .collect();
        debug_assert!(!members.is_empty());
        let mut max_val = F::neg_infinity();
        for &b in &members {
            max_val = max_val.max(sims[[anchor, b]] / tau);
        }
        let mut sum_exp = F::zero();
        for &b in &members {
            sum_exp = sum_exp + (sims[[anchor, b]] / tau - max_val).exp();
        }
        let lse = max_val + sum_exp.ln();
        loss = loss + (-sims[[anchor, positive]] / tau + lse) * inv_2n;

        if let Some(dsim) = dsim.as_mut() {
            dsim[[anchor, positive]] = dsim[[anchor, positive]] - inv_2n / tau;
            for &b in &members {
                let p = (sims[[anchor, b]] / tau - max_val).exp() / sum_exp;
                dsim[[anchor, b]] = dsim[[anchor, b]] + p * inv_2n / tau;
            }
        }
    }

    let grad = match dsim {
        None => None,
        Some(dsim) => {
            // chain through s(z_a, z_b) = unit_a · unit_b
            let cols = descriptors.ncols();
            let mut grad = Array2::<F>::zeros((rows, cols));
            for a in 0..rows {
                for b in 0..rows {
                    let c = dsim[[a, b]];
                    if c == F::zero() || a == b {
                        continue;
                    }
                    let s = sims[[a, b]];
                    for d in 0..cols {
                        // ds/dz_a = (unit_b - s * unit_a) / |z_a|, and the
                        // symmetric term for z_b
                        grad[[a, d]] =
                            grad[[a, d]] + c * (unit[[b, d]] - s * unit[[a, d]]) / norms[a];
                        grad[[b, d]] =
                            grad[[b, d]] + c * (unit[[a, d]] - s * unit[[b, d]]) / norms[b];
                    }
                }
            }
            Some(grad)
        }
    };
    Ok((loss, grad))
}

/// Rotation-prediction cross-entropy: the unnormalized sum over all samples
/// of −log softmax(logits)[label].
pub fn rotation_ce_loss<F: NdFloat>(logits: ArrayView2<F>, labels: &[usize]) -> Result<F> {
    rotation_ce_forward(logits, labels, false).map(|(l, _)| l)
}

/// Cross-entropy loss and gradient with respect to the logits.
pub fn rotation_ce_loss_grad<F: NdFloat>(
    logits: ArrayView2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>)> {
    let (loss, grad) = rotation_ce_forward(logits, labels, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn rotation_ce_forward<F: NdFloat>(
    logits: ArrayView2<F>,
    labels: &[usize],
    with_grad: bool,
) -> Result<(F, Option<Array2<F>>)> {
    let (rows, k) = logits.dim();
    if labels.len() != rows {
        return Err(AcmError::parameter(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(AcmError::parameter(format!("label {bad} out of range 0..{k}")));
    }
    let mut loss = F::zero();
    let mut grad = if with_grad { Some(Array2::<F>::zeros((rows, k))) } else { None };
    for (r, row) in logits.rows().into_iter().enumerate() {
        let max_val = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum_exp = F::zero();
        for &v in row.iter() {
            sum_exp = sum_exp + (v - max_val).exp();
        }
        let lse = max_val + sum_exp.ln();
        loss = loss + lse - row[labels[r]];
        if let Some(grad) = grad.as_mut() {
            for c in 0..k {
                let p = (row[c] - max_val).exp() / sum_exp;
                grad[[r, c]] = if c == labels[r] { p - F::one() } else { p };
            }
        }
    }
    Ok((loss, grad))
}

/// L = L_C + λ·L_P.
pub fn total_loss(contrastive: f64, predictive: f64, lambda: f64) -> Result<f64> {
    if !(contrastive.is_finite() && predictive.is_finite() && lambda.is_finite()) {
        return Err(AcmError::domain("non-finite loss input"));
    }
    Ok(contrastive + lambda * predictive)
}
