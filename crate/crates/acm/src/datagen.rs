//! Synthetic place traverses and dataset directory loading.
//!
//! A traverse is modeled as a long horizontal strip of colored primitives seen
//! through a sliding window: adjacent frame indices look at overlapping strip
//! segments, which gives the frame-tolerance window of the evaluation a
//! meaningful geometric interpretation. Appearance conditions only re-color
//! the very same geometry.

use crate::error::{AcmError, Result};
use crate::image::{derive_seed, load_png, quantize_u8, save_png, ImageTensor, CHANNELS};
use crate::parallel::map_range;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

/// Sliding-window stride between adjacent places, in strip units.
/// The window itself is 1.0 wide, so neighbors share 75% of their content.
const WINDOW_STRIDE: f64 = 0.25;
/// Primitives are generated per strip cell of this width.
const CELL_WIDTH: f64 = 0.25;
const PRIMS_PER_CELL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// One colored primitive, in window-local unit coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub kind: ShapeKind,
    /// Center position in [0,1]².
    pub position: (f64, f64),
    /// Half-extent in [0,1].
    pub scale: f64,
    /// Base hue in [0,1).
    pub base_hue: f64,
}

/// Deterministic description of one place's geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceSpec {
    pub place_id: u32,
    pub layout_seed: u64,
    pub geometry_params: Vec<PrimitiveSpec>,
}

/// An appearance condition: pixel statistics only, never geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub condition_id: String,
    pub global_tint: [f32; 3],
    pub brightness_shift: f32,
    pub contrast_scale: f32,
    pub noise_sigma: f32,
}

impl ConditionSpec {
    pub fn reference() -> Self {
        ConditionSpec {
            condition_id: "reference".to_string(),
            global_tint: [0.0; 3],
            brightness_shift: 0.0,
            contrast_scale: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Deterministic preset for the i-th non-reference condition: a cycle of
    /// tint/brightness/contrast shifts with mild sensor noise.
    pub fn variant(index: usize) -> Self {
        let presets: [([f32; 3], f32, f32); 4] = [
            ([-0.06, -0.02, 0.05], -0.08, 0.90), // dusk: blue shift, darker
            ([0.06, 0.02, -0.05], 0.06, 1.10),   // noon: warm, brighter
            ([0.0, 0.03, 0.0], -0.03, 0.75),     // overcast: flat contrast
            ([-0.03, -0.03, -0.03], -0.12, 1.05), // night-ish: uniformly dark
        ];
        let (global_tint, brightness_shift, contrast_scale) = presets[index % presets.len()];
        ConditionSpec {
            condition_id: format!("condition-{index:02}"),
            global_tint,
            brightness_shift,
            contrast_scale,
            noise_sigma: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.global_tint.iter().all(|t| (-0.5..=0.5).contains(t))
            && (-0.4..=0.4).contains(&self.brightness_shift)
            && (0.5..=1.5).contains(&self.contrast_scale)
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AcmError::parameter(format!(
                "condition '{}' has out-of-range parameters",
                self.condition_id
            )))
        }
    }

    /// Apply the condition to a clean render. `noise_seed` fixes the noise field.
    pub fn apply(&self, image: &ImageTensor, noise_seed: u64) -> ImageTensor {
        let mut out = image.clone();
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            let tint = self.global_tint[ch.min(2)];
            plane.mapv_inplace(|v| {
                self.contrast_scale * (v - 0.5) + 0.5 + self.brightness_shift + tint
            });
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for v in out.iter_mut() {
                // Box-Muller, one normal draw per pixel.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += self.noise_sigma * n as f32;
            }
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Position in meters.
    pub t: [f64; 3],
    /// Unit quaternion, (w, x, y, z).
    pub q: [f64; 4],
}

impl Pose {
    pub fn identity_at(x: f64) -> Self {
        Pose { t: [x, 0.0, 0.0], q: [1.0, 0.0, 0.0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_index: u32,
    pub condition_id: String,
    pub image: ImageTensor,
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub sequence_id: String,
    pub frames: Vec<Frame>,
}

/// A loaded or generated traverse dataset. The first sequence is the
/// reference traverse; all later sequences hold query frames whose
/// ground-truth correspondence points into the reference sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    /// query frame_index -> reference frame_index
    pub correspondence: BTreeMap<u32, u32>,
}

impl Dataset {
    pub fn reference_sequence(&self) -> &Sequence {
        &self.sequences[0]
    }

    pub fn query_frames(&self) -> impl Iterator<Item = &Frame> {
        self.sequences.iter().skip(1).flat_map(|s| s.frames.iter())
    }

    pub fn num_images(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn has_poses(&self) -> bool {
        self.sequences
            .iter()
            .all(|s| s.frames.iter().all(|f| f.pose.is_some()))
    }
}

/// Geometry of one place: primitives of the strip cells covered by its window.
pub fn place_geometry(place_id: u32, layout_seed: u64) -> PlaceSpec {
    let window_start = place_id as f64 * WINDOW_STRIDE;
    let first_cell = (window_start / CELL_WIDTH).floor() as i64;
    let last_cell = ((window_start + 1.0) / CELL_WIDTH).ceil() as i64;
    let mut geometry_params = Vec::new();
    for cell in first_cell..=last_cell {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(layout_seed, 0x0ce1, cell as u64));
        for _ in 0..PRIMS_PER_CELL {
            let strip_x = cell as f64 * CELL_WIDTH + rng.gen_range(0.0..CELL_WIDTH);
            let y = rng.gen_range(0.1..0.9);
            let scale = rng.gen_range(0.06..0.16);
            let base_hue = rng.gen_range(0.0..1.0);
            let kind = match rng.gen_range(0..3u8) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Square,
                _ => ShapeKind::Triangle,
            };
            let local_x = strip_x - window_start;
            // keep primitives whose disc can touch the window
            if local_x > -0.2 && local_x < 1.2 {
                geometry_params.push(PrimitiveSpec {
                    kind,
                    position: (local_x.clamp(0.0, 1.0), y),
                    scale,
                    base_hue,
                });
            }
        }
    }
    PlaceSpec { place_id, layout_seed, geometry_params }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Rasterize the clean (condition-free) render of a place.
pub fn render_place(spec: &PlaceSpec, image_size: usize) -> ImageTensor {
    let n = image_size;
    let mut img: ImageTensor = Array3::zeros((CHANNELS, n, n));
    // dim vertical gradient background
    for y in 0..n {
        let g = 0.08 + 0.10 * (y as f32 / n as f32);
        for x in 0..n {
            for c in 0..CHANNELS {
                img[[c, y, x]] = g;
            }
        }
    }
    for prim in &spec.geometry_params {
        let color = hsv_to_rgb(prim.base_hue, 0.8, 0.9);
        let (cx, cy) = prim.position;
        let r = prim.scale;
        let x_lo = (((cx - r) * n as f64).floor().max(0.0)) as usize;
        let x_hi = (((cx + r) * n as f64).ceil().min(n as f64)) as usize;
        let y_lo = (((cy - r) * n as f64).floor().max(0.0)) as usize;
        let y_hi = (((cy + r) * n as f64).ceil().min(n as f64)) as usize;
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let ux = (px as f64 + 0.5) / n as f64 - cx;
                let uy = (py as f64 + 0.5) / n as f64 - cy;
                let inside = match prim.kind {
                    ShapeKind::Circle => ux * ux + uy * uy <= r * r,
                    ShapeKind::Square => ux.abs() <= r && uy.abs() <= r,
                    ShapeKind::Triangle => {
                        // upward triangle inscribed in the square of half-extent r
                        uy <= r && uy >= -r && ux.abs() <= (uy + r) / 2.0
                    }
                };
                if inside {
                    for c in 0..CHANNELS {
                        img[[c, py, px]] = color[c];
                    }
                }
            }
        }
    }
    img
}

fn condition_stream(condition_index: usize) -> u64 {
    0xc0_0000 + condition_index as u64
}

/// Generate a deterministic synthetic traverse: one sequence per condition,
/// `num_places` frames each, identical geometry across conditions.
pub fn generate_synthetic_traverse(
    num_places: usize,
    conditions: &[ConditionSpec],
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_places < 1 {
        return Err(AcmError::parameter("num_places must be >= 1"));
    }
    if image_size < 16 {
        return Err(AcmError::parameter("image_size must be >= 16"));
    }
    if conditions.is_empty() {
        return Err(AcmError::parameter("at least one condition is required"));
    }
    let mut ids = HashSet::new();
    for cond in conditions {
        cond.validate()?;
        if !ids.insert(cond.condition_id.clone()) {
            return Err(AcmError::parameter(format!(
                "duplicate condition_id '{}'",
                cond.condition_id
            )));
        }
    }
    let layout_seed = derive_seed(seed, 0x1a10, 0);

    let clean: Vec<ImageTensor> = map_range(num_places, |p| {
        let spec = place_geometry(p as u32, layout_seed);
        render_place(&spec, image_size)
    });

    let mut sequences = Vec::with_capacity(conditions.len());
    for (ci, cond) in conditions.iter().enumerate() {
        let frames: Vec<Frame> = map_range(num_places, |p| {
            let noise_seed = derive_seed(seed, condition_stream(ci), p as u64);
            let mut img = cond.apply(&clean[p], noise_seed);
            quantize_u8(&mut img);
            Frame {
                frame_index: p as u32,
                condition_id: cond.condition_id.clone(),
                image: img,
                pose: Some(Pose::identity_at(p as f64)),
            }
        });
        sequences.push(Sequence { sequence_id: cond.condition_id.clone(), frames });
    }

    let correspondence = (0..num_places as u32).map(|i| (i, i)).collect();
    Ok(Dataset { sequences, correspondence })
}

// ---- manifest serialization -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestPose {
    t: [f64; 3],
    q: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    frame_index: u32,
    condition_id: String,
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose: Option<ManifestPose>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSequence {
    sequence_id: String,
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestCorrespondence {
    query_frame: u32,
    reference_frame: u32,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sequences: Vec<ManifestSequence>,
    correspondence: Vec<ManifestCorrespondence>,
}

/// Write the dataset to `dir` using the manifest layout under `images/`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut manifest = Manifest { sequences: Vec::new(), correspondence: Vec::new() };
    for seq in &dataset.sequences {
        let mut frames = Vec::new();
        for frame in &seq.frames {
            let file = format!("images/{}_{:05}.png", seq.sequence_id, frame.frame_index);
            save_png(&frame.image, &dir.join(&file))?;
            frames.push(ManifestFrame {
                frame_index: frame.frame_index,
                condition_id: frame.condition_id.clone(),
                file,
                pose: frame.pose.as_ref().map(|p| ManifestPose { t: p.t, q: p.q }),
            });
        }
        manifest.sequences.push(ManifestSequence {
            sequence_id: seq.sequence_id.clone(),
            frames,
        });
    }
    for (q, r) in &dataset.correspondence {
        manifest
            .correspondence
            .push(ManifestCorrespondence { query_frame: *q, reference_frame: *r });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`] or by hand.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| AcmError::Load {
        path: manifest_path.clone(),
        reason: format!("missing or unreadable manifest: {e}"),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AcmError::Load {
        path: manifest_path.clone(),
        reason: format!("malformed manifest: {e}"),
    })?;

    let mut sequences = Vec::new();
    for mseq in &manifest.sequences {
        let mut frames = Vec::new();
        let mut last_index: Option<u32> = None;
        for mframe in &mseq.frames {
            if let Some(prev) = last_index {
                if mframe.frame_index <= prev {
                    return Err(AcmError::Load {
                        path: manifest_path.clone(),
                        reason: format!(
                            "sequence '{}': frame_index {} not strictly increasing (duplicate or out of order)",
                            mseq.sequence_id, mframe.frame_index
                        ),
                    });
                }
            }
            last_index = Some(mframe.frame_index);
            let img_path = dir.join(&mframe.file);
            if !img_path.is_file() {
                return Err(AcmError::Load {
                    path: img_path,
                    reason: "referenced image file does not exist".to_string(),
                });
            }
            let image = load_png(&img_path)?;
            let pose = match &mframe.pose {
                None => None,
                Some(p) => {
                    let norm =
                        (p.q.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    if !(0.999..=1.001).contains(&norm) {
                        return Err(AcmError::Load {
                            path: manifest_path.clone(),
                            reason: format!(
                                "frame {} pose quaternion norm {:.6} outside [0.999, 1.001]",
                                mframe.frame_index, norm
                            ),
                        });
                    }
                    let q = [p.q[0] / norm, p.q[1] / norm, p.q[2] / norm, p.q[3] / norm];
                    Some(Pose { t: p.t, q })
                }
            };
            frames.push(Frame {
                frame_index: mframe.frame_index,
                condition_id: mframe.condition_id.clone(),
                image,
                pose,
            });
        }
        sequences.push(Sequence { sequence_id: mseq.sequence_id.clone(), frames });
    }

    let mut correspondence = BTreeMap::new();
    for c in &manifest.correspondence {
        if correspondence.insert(c.query_frame, c.reference_frame).is_some() {
            return Err(AcmError::Load {
                path: manifest_path,
                reason: format!("duplicate correspondence for query frame {}", c.query_frame),
            });
        }
    }
    Ok(Dataset { sequences, correspondence })
}
