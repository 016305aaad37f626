//! Quantitative evaluation: recall@N with a frame tolerance window,
//! pose-bucket accuracy, and the appearance-invariance / rotation-equivariance
//! measures used to characterize what the descriptors respond to.

use crate::augment::{apply_appearance_transform, rotate90, sample_appearance_transform};
use crate::datagen::{Dataset, Frame, Pose};
use crate::error::{AcmError, Result};
use crate::image::{derive_seed, ImageTensor};
use crate::loss::cosine_similarity;
use crate::model::ModelParams;
use crate::retrieval::{build_bank, embed, knn_query};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Cumulative (translation meters, rotation degrees) bucket thresholds,
/// fine -> coarse.
pub const POSE_BUCKETS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

/// Fraction of queries with at least one top-n retrieval within
/// `window_radius` frames of the ground-truth reference frame.
pub fn recall_at_n(
    retrievals: &[(u32, Vec<u32>)],
    correspondence: &BTreeMap<u32, u32>,
    n: usize,
    window_radius: u32,
) -> Result<f64> {
    if retrievals.is_empty() {
        return Err(AcmError::parameter("no queries to score"));
    }
    let mut hits = 0usize;
    for (query, ranked) in retrievals {
        let gt = *correspondence
            .get(query)
            .ok_or_else(|| AcmError::parameter(format!("query frame {query} has no ground-truth correspondence")))?;
        if ranked.len() < n {
            return Err(AcmError::parameter(format!(
                "query frame {query} has only {} retrievals, need {n}",
                ranked.len()
            )));
        }
        if ranked[..n].iter().any(|&r| within_window(r, gt, window_radius)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / retrievals.len() as f64)
}

fn within_window(frame: u32, gt: u32, radius: u32) -> bool {
    frame.abs_diff(gt) <= radius
}

/// Rotation error between two unit quaternions (w, x, y, z) in degrees.
/// The absolute dot product handles the double cover (q and -q are the same
/// rotation).
pub fn quaternion_angle_deg(qa: [f64; 4], qb: [f64; 4]) -> f64 {
    let dot: f64 = qa.iter().zip(&qb).map(|(a, b)| a * b).sum();
    2.0 * dot.abs().clamp(0.0, 1.0).acos().to_degrees()
}

/// Fraction of queries within each cumulative (translation, rotation) bucket.
/// A query satisfies a bucket iff BOTH errors are within its thresholds.
pub fn pose_bucket_accuracy(predicted: &[Pose], ground_truth: &[Pose]) -> Result<[f64; 3]> {
    if predicted.is_empty() || predicted.len() != ground_truth.len() {
        return Err(AcmError::parameter(format!(
            "pose lists must be nonempty and equal length, got {} and {}",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let mut counts = [0usize; 3];
    for (p, g) in predicted.iter().zip(ground_truth) {
        let trans_err = p
            .t
            .iter()
            .zip(&g.t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rot_err = quaternion_angle_deg(p.q, g.q);
        for (b, &(t_max, r_max)) in POSE_BUCKETS.iter().enumerate() {
            if trans_err <= t_max && rot_err <= r_max {
                counts[b] += 1;
            }
        }
    }
    let n = predicted.len() as f64;
    Ok([counts[0] as f64 / n, counts[1] as f64 / n, counts[2] as f64 / n])
}

/// Mean cosine similarity between descriptors of each image and its three
/// non-identity quarter-turn rotations. Lower = more rotation-sensitive.
pub fn equivariance_measure(params: &ModelParams<f32>, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(AcmError::parameter("equivariance measure needs at least one image"));
    }
    let base = embed(params, images)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for k in 1..4 {
        let rotated: Vec<ImageTensor> =
            images.iter().map(|im| rotate90(im, k)).collect::<Result<_>>()?;
        let zr = embed(params, &rotated)?;
        for i in 0..images.len() {
            total += cosine_similarity(base.row(i), zr.row(i))? as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean cosine similarity between descriptors of each image and sampled
/// appearance-transformed views of it. Higher = more appearance-robust.
/// Transform seeds are derived internally, so the measure is deterministic
/// for a given image set and sample count.
pub fn invariance_measure(
    params: &ModelParams<f32>,
    images: &[ImageTensor],
    num_appearance_samples: usize,
) -> Result<f64> {
    if num_appearance_samples == 0 {
        return Err(AcmError::parameter("need at least one appearance sample"));
    }
    let descriptors: Vec<_> = (0..num_appearance_samples)
        .map(|s| sample_appearance_transform(derive_seed(0x1ae5, 0, s as u64)))
        .collect();
    invariance_measure_with_transforms(params, images, &descriptors)
}

/// Invariance measure against an explicit set of transform descriptors.
pub fn invariance_measure_with_transforms(
    params: &ModelParams<f32>,
    images: &[ImageTensor],
    transforms: &[crate::augment::AppearanceTransformDescriptor],
) -> Result<f64> {
    if images.is_empty() || transforms.is_empty() {
        return Err(AcmError::parameter("invariance measure needs images and transforms"));
    }
    let base = embed(params, images)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in transforms {
        let views: Vec<ImageTensor> =
            images.iter().map(|im| apply_appearance_transform(im, t)).collect();
        let zv = embed(params, &views)?;
        for i in 0..images.len() {
            total += cosine_similarity(base.row(i), zv.row(i))? as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub frame: u32,
    pub gt: u32,
    pub top_k: Vec<u32>,
    /// 1-based rank of the first retrieval inside the tolerance window, if any.
    pub localized_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// N -> recall fraction. Integer keys serialize as ascending string keys.
    pub recall: BTreeMap<usize, f64>,
    pub pose_buckets: Option<[f64; 3]>,
    pub invariance: f64,
    pub equivariance: f64,
    pub config: serde_json::Value,
    pub queries: Vec<QueryDetail>,
}

/// Write the report as pretty JSON.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    /// Recall cutoffs to report.
    pub recall_ns: Vec<usize>,
    /// Tolerance window radius in frames.
    pub window_radius: u32,
    /// Appearance transforms sampled for the invariance measure.
    pub invariance_samples: usize,
    /// Cap on images used for the two measures (keeps eval cheap).
    pub measure_images: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { recall_ns: vec![1, 5, 10], window_radius: 2, invariance_samples: 8, measure_images: 32 }
    }
}

/// Full evaluation: build the reference bank, retrieve for every query frame,
/// and compute recall, optional pose buckets, and both measures.
///
/// If the dataset has no query sequences, the reference frames double as
/// queries (self-evaluation) with identity correspondence.
pub fn evaluate(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    settings: &EvalSettings,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if settings.recall_ns.is_empty() {
        return Err(AcmError::parameter("no recall cutoffs requested"));
    }
    let bank = build_bank(params, dataset.reference_sequence())?;
    let m = bank.descriptors.nrows();

    let query_frames: Vec<&Frame> = dataset.query_frames().collect();
    let self_eval = query_frames.is_empty();
    let queries: Vec<&Frame> = if self_eval {
        dataset.reference_sequence().frames.iter().collect()
    } else {
        query_frames
    };
    let correspondence: BTreeMap<u32, u32> = if self_eval {
        queries.iter().map(|f| (f.frame_index, f.frame_index)).collect()
    } else {
        dataset.correspondence.clone()
    };

    let k = settings.recall_ns.iter().copied().max().unwrap().min(m).max(1);
    let images: Vec<ImageTensor> = queries.iter().map(|f| f.image.clone()).collect();
    let descriptors = embed(params, &images)?;

    let mut retrievals: Vec<(u32, Vec<u32>)> = Vec::with_capacity(queries.len());
    let mut details = Vec::with_capacity(queries.len());
    let mut predicted_poses = Vec::new();
    let mut gt_poses = Vec::new();
    let poses_available = dataset.has_poses();
    for (qi, frame) in queries.iter().enumerate() {
        let hits = knn_query(&bank, descriptors.row(qi), k)?;
        let top_k: Vec<u32> = hits.iter().map(|&(row, _)| bank.manifest[row].frame_index).collect();
        let gt = *correspondence.get(&frame.frame_index).ok_or_else(|| {
            AcmError::parameter(format!(
                "query frame {} has no ground-truth correspondence",
                frame.frame_index
            ))
        })?;
        let localized_at = top_k
            .iter()
            .position(|&r| within_window(r, gt, settings.window_radius))
            .map(|p| p + 1);
        if poses_available {
            let best_row = hits[0].0;
            let ref_pose = dataset.reference_sequence().frames[best_row]
                .pose
                .clone()
                .ok_or_else(|| AcmError::parameter("reference frame missing pose"))?;
            let query_pose = frame
                .pose
                .clone()
                .ok_or_else(|| AcmError::parameter("query frame missing pose"))?;
            predicted_poses.push(ref_pose);
            gt_poses.push(query_pose);
        }
        retrievals.push((frame.frame_index, top_k.clone()));
        details.push(QueryDetail { frame: frame.frame_index, gt, top_k, localized_at });
    }

    let mut recall = BTreeMap::new();
    for &n in &settings.recall_ns {
        recall.insert(n, recall_at_n(&retrievals, &correspondence, n.min(k), settings.window_radius)?);
    }
    let pose_buckets = if poses_available {
        Some(pose_bucket_accuracy(&predicted_poses, &gt_poses)?)
    } else {
        None
    };

    let measure_set: Vec<ImageTensor> =
        images.iter().take(settings.measure_images.max(1)).cloned().collect();
    let invariance = invariance_measure(params, &measure_set, settings.invariance_samples)?;
    let equivariance = equivariance_measure(params, &measure_set)?;

    Ok(EvalReport { recall, pose_buckets, invariance, equivariance, config: config_echo, queries: details })
}

// ---------------------------------------------------------------------------
// Bar chart rendering (for the geometric-group ablation figure)
// ---------------------------------------------------------------------------

// 3x5 bitmaps for the characters needed in bar labels.
fn glyph(c: char) -> Option<[u8; 5]> {
    // each row is 3 bits, MSB = left pixel
    let rows = match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'n' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        _ => return None,
    };
    Some(rows)
}

fn draw_text(canvas: &mut image::RgbImage, text: &str, x0: u32, y0: u32) {
    let mut x = x0;
    for c in text.chars() {
        if let Some(rows) = glyph(c.to_ascii_lowercase()) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3u32 {
                    if row >> (2 - dx) & 1 == 1 {
                        let (px, py) = (x + dx, y0 + dy as u32);
                        if px < canvas.width() && py < canvas.height() {
                            canvas.put_pixel(px, py, image::Rgb([30, 30, 30]));
                        }
                    }
                }
            }
        }
        x += 4;
    }
}

/// Render a labeled bar chart to a PNG. Bars are scaled against the largest
/// value (or 1.0 if all values are below it).
pub fn render_bar_chart(entries: &[(String, f64)], title: &str, path: &Path) -> Result<()> {
    if entries.is_empty() {
        return Err(AcmError::parameter("no bars to draw"));
    }
    let bar_w = 56u32;
    let gap = 24u32;
    let width = gap + entries.len() as u32 * (bar_w + gap);
    let (height, top, bottom) = (220u32, 30u32, 40u32);
    let plot_h = height - top - bottom;
    let mut canvas = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let max_val = entries.iter().map(|e| e.1).fold(1.0f64, f64::max);
    for (i, (label, value)) in entries.iter().enumerate() {
        let x0 = gap + i as u32 * (bar_w + gap);
        let h = ((value.max(0.0) / max_val) * plot_h as f64).round() as u32;
        let y_top = top + plot_h - h;
        for x in x0..x0 + bar_w {
            for y in y_top..top + plot_h {
                canvas.put_pixel(x, y, image::Rgb([70, 110, 180]));
            }
        }
        draw_text(&mut canvas, &format!("{value:.3}"), x0 + 4, y_top.saturating_sub(8));
        draw_text(&mut canvas, label, x0.saturating_sub(gap / 2), top + plot_h + 6);
    }
    // baseline
    for x in 0..width {
        canvas.put_pixel(x, top + plot_h, image::Rgb([0, 0, 0]));
    }
    draw_text(&mut canvas, title, 4, 4);
    canvas.save(path)?;
    Ok(())
}
