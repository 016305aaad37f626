//! Descriptor bank construction and exact cosine k-nearest-neighbor search.
//!
//! Inference pipeline: encoder -> projector -> L2 normalization. The bank is
//! immutable after build; queries are exact top-k by dot product (equal to
//! cosine for unit vectors) with ties broken by ascending row id.

use crate::checkpoint::params_fingerprint;
use crate::datagen::Sequence;
use crate::error::{AcmError, Result};
use crate::image::ImageTensor;
use crate::model::{encoder_forward_batch, projector_forward, Mode, ModelParams};
use crate::parallel::map_slice;
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ACMB";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRow {
    pub frame_index: u32,
    pub sequence_id: String,
    pub condition_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBank {
    /// M x D, rows unit-norm.
    pub descriptors: Array2<f32>,
    pub manifest: Vec<BankRow>,
    /// Fingerprint of the model that produced the rows.
    pub model_fingerprint: u64,
}

/// Embed images: encoder -> projector (eval mode) -> L2 normalization.
pub fn embed(params: &ModelParams<f32>, images: &[ImageTensor]) -> Result<Array2<f32>> {
    let features = encoder_forward_batch(params, images)?;
    let mut descriptors = projector_forward(params, features.view(), Mode::Eval)?;
    for mut row in descriptors.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm <= 1e-20 {
            return Err(AcmError::domain(
                "descriptor collapsed to the zero vector; cannot L2-normalize",
            ));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(descriptors)
}

/// Build the reference descriptor bank from a dataset split.
pub fn build_bank(params: &ModelParams<f32>, reference: &Sequence) -> Result<DescriptorBank> {
    if reference.frames.is_empty() {
        return Err(AcmError::parameter("reference split is empty"));
    }
    let images: Vec<ImageTensor> =
        reference.frames.iter().map(|f| f.image.clone()).collect();
    let descriptors = embed(params, &images)?;
    let manifest = reference
        .frames
        .iter()
        .map(|f| BankRow {
            frame_index: f.frame_index,
            sequence_id: reference.sequence_id.clone(),
            condition_id: f.condition_id.clone(),
        })
        .collect();
    Ok(DescriptorBank {
        descriptors,
        manifest,
        model_fingerprint: params_fingerprint(params),
    })
}

/// Exact top-k rows by descending similarity; ties broken by ascending row id.
pub fn knn_query(
    bank: &DescriptorBank,
    query: ArrayView1<f32>,
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    let m = bank.descriptors.nrows();
    if k == 0 || k > m {
        return Err(AcmError::parameter(format!("k = {k} out of range 1..={m}")));
    }
    if query.len() != bank.descriptors.ncols() {
        return Err(AcmError::parameter(format!(
            "query dim {} does not match bank dim {}",
            query.len(),
            bank.descriptors.ncols()
        )));
    }
    let norm = query.dot(&query).sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(AcmError::parameter(format!("query must be unit-norm, got |q| = {norm}")));
    }
    let rows: Vec<_> = bank.descriptors.axis_iter(Axis(0)).collect();
    let mut scored: Vec<(usize, f32)> = map_slice(&rows, |row| row.dot(&query))
        .into_iter()
        .enumerate()
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Bank file: magic, version u16, D u32, M u32, M*D little-endian f32
/// row-major, then a length-prefixed UTF-8 JSON manifest trailer.
pub fn save_bank(bank: &DescriptorBank, path: &Path) -> Result<()> {
    let m = bank.descriptors.nrows();
    let d = bank.descriptors.ncols();
    if m == 0 {
        return Err(AcmError::parameter("refusing to save an empty bank"));
    }
    if bank.manifest.len() != m {
        return Err(AcmError::parameter("manifest length does not match row count"));
    }
    #[derive(Serialize)]
    struct Trailer<'a> {
        rows: &'a [BankRow],
        model_fingerprint: u64,
    }
    let trailer =
        serde_json::to_vec(&Trailer { rows: &bank.manifest, model_fingerprint: bank.model_fingerprint })?;
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    buf.write_all(&(d as u32).to_le_bytes())?;
    buf.write_all(&(m as u32).to_le_bytes())?;
    for &v in bank.descriptors.iter() {
        buf.write_all(&v.to_le_bytes())?;
    }
    buf.write_all(&(trailer.len() as u32).to_le_bytes())?;
    buf.write_all(&trailer)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<DescriptorBank> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let fail = |msg: &str| AcmError::Format(format!("bank file: {msg}"));
    let take = |n: usize, r: &mut &[u8]| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| fail("truncated"))?;
        Ok(buf)
    };
    let magic = take(4, &mut r)?;
    if magic != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes(take(2, &mut r)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(take(4, &mut r)?.try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(take(4, &mut r)?.try_into().unwrap()) as usize;
    let data = take(4 * m * d, &mut r)?;
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let descriptors =
        Array2::from_shape_vec((m, d), floats).map_err(|_| fail("bad tensor shape"))?;
    let trailer_len = u32::from_le_bytes(take(4, &mut r)?.try_into().unwrap()) as usize;
    let trailer = take(trailer_len, &mut r)?;
    if !r.is_empty() {
        return Err(fail("trailing bytes"));
    }
    #[derive(Deserialize)]
    struct Trailer {
        rows: Vec<BankRow>,
        model_fingerprint: u64,
    }
    let trailer: Trailer =
        serde_json::from_slice(&trailer).map_err(|e| fail(&format!("bad manifest: {e}")))?;
    if trailer.rows.len() != m {
        return Err(fail("manifest length does not match row count"));
    }
    Ok(DescriptorBank {
        descriptors,
        manifest: trailer.rows,
        model_fingerprint: trailer.model_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic_traverse, ConditionSpec};
    use crate::model::{init_params, ModelConfig};
    use crate::oracle::brute_force_top_k;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_params(seed: u64) -> ModelParams<f32> {
        init_params(&ModelConfig {
            image_size: 16,
            encoder_channels: vec![4, 8],
            feature_dim: 8,
            descriptor_dim: 16,
            rotation_classes: 4,
            init_seed: seed,
        })
        .unwrap()
    }

    fn random_bank(m: usize, d: usize, seed: u64) -> DescriptorBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut descriptors = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0f32..1.0));
        for mut row in descriptors.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        let manifest = (0..m)
            .map(|i| BankRow {
                frame_index: i as u32,
                sequence_id: "ref".to_string(),
                condition_id: "reference".to_string(),
            })
            .collect();
        DescriptorBank { descriptors, manifest, model_fingerprint: seed }
    }

    fn unit_query(d: usize, seed: u64) -> Array1<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0f32..1.0));
        let n = q.dot(&q).sqrt();
        q.mapv_inplace(|v| v / n);
        q
    }

    #[test]
    fn embed_produces_unit_deterministic_descriptors() {
        let params = tiny_params(3);
        let ds = generate_synthetic_traverse(3, &[ConditionSpec::reference()], 16, 5).unwrap();
        let images: Vec<_> =
            ds.reference_sequence().frames.iter().map(|f| f.image.clone()).collect();
        let z1 = embed(&params, &images).unwrap();
        let z2 = embed(&params, &images).unwrap();
        assert_eq!(z1, z2);
        for row in z1.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // distinct images map to distinct descriptors under a random model
        assert_ne!(z1.row(0), z1.row(1));
    }

    #[test]
    fn bank_build_and_self_retrieval() {
        let params = tiny_params(1);
        let ds =
            generate_synthetic_traverse(10, &[ConditionSpec::reference()], 16, 2).unwrap();
        let bank = build_bank(&params, ds.reference_sequence()).unwrap();
        assert_eq!(bank.descriptors.nrows(), 10);
        assert_eq!(bank.manifest.len(), 10);
        let bank2 = build_bank(&params, ds.reference_sequence()).unwrap();
        assert_eq!(bank, bank2);
        // query with its own row: rank 1, similarity 1
        let q = bank.descriptors.row(4).to_owned();
        let hits = knn_query(&bank, q.view(), 1).unwrap();
        assert_eq!(hits[0].0, 4);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn knn_full_ranking_is_sorted_and_orthonormal_case() {
        let bank = random_bank(20, 8, 7);
        let q = unit_query(8, 9);
        let ranking = knn_query(&bank, q.view(), 20).unwrap();
        for pair in ranking.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
        // standard basis bank
        let mut eye = Array2::zeros((4, 4));
        for i in 0..4 {
            eye[[i, i]] = 1.0f32;
        }
        let bank = DescriptorBank {
            descriptors: eye,
            manifest: (0..4)
                .map(|i| BankRow {
                    frame_index: i,
                    sequence_id: "ref".into(),
                    condition_id: "reference".into(),
                })
                .collect(),
            model_fingerprint: 0,
        };
        let mut e3 = Array1::zeros(4);
        e3[2] = 1.0f32;
        let hits = knn_query(&bank, e3.view(), 1).unwrap();
        assert_eq!(hits[0], (2, 1.0));
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let bank = random_bank(50, 16, 21);
        let rows: Vec<Vec<f32>> =
            bank.descriptors.rows().into_iter().map(|r| r.to_vec()).collect();
        for qs in 0..10u64 {
            let q = unit_query(16, 100 + qs);
            for k in [1usize, 5, 10] {
                let fast = knn_query(&bank, q.view(), k).unwrap();
                let slow = brute_force_top_k(&rows, q.as_slice().unwrap(), k);
                assert_eq!(
                    fast.iter().map(|x| x.0).collect::<Vec<_>>(),
                    slow.iter().map(|x| x.0).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn knn_prefix_property() {
        let bank = random_bank(30, 8, 2);
        let q = unit_query(8, 3);
        let long = knn_query(&bank, q.view(), 20).unwrap();
        for k in 1..20 {
            let short = knn_query(&bank, q.view(), k).unwrap();
            assert_eq!(short, long[..k]);
        }
    }

    #[test]
    fn knn_parameter_validation() {
        let bank = random_bank(5, 4, 1);
        let q = unit_query(4, 1);
        assert!(knn_query(&bank, q.view(), 0).is_err());
        assert!(knn_query(&bank, q.view(), 6).is_err());
        let not_unit = Array1::from_elem(4, 2.0f32);
        assert!(knn_query(&bank, not_unit.view(), 1).is_err());
    }

    #[test]
    fn ranking_invariant_to_positive_descriptor_scaling() {
        // scaling the pre-normalization outputs is absorbed by L2 normalization
        let params = tiny_params(4);
        let ds =
            generate_synthetic_traverse(8, &[ConditionSpec::reference()], 16, 6).unwrap();
        let images: Vec<_> =
            ds.reference_sequence().frames.iter().map(|f| f.image.clone()).collect();
        let base = embed(&params, &images).unwrap();
        let mut scaled_params = params.clone();
        scaled_params.proj_gamma.mapv_inplace(|v| v * 3.5);
        scaled_params.proj_beta.mapv_inplace(|v| v * 3.5);
        scaled_params.proj_b.mapv_inplace(|v| v); // bias acts pre-BN, leave it
        let scaled = embed(&scaled_params, &images).unwrap();
        let q = base.row(0);
        for r in 0..8 {
            let a = q.dot(&base.row(r));
            let b = scaled.row(0).dot(&scaled.row(r));
            assert!((a - b).abs() < 1e-5, "row {r}: {a} vs {b}");
        }
    }

    #[test]
    fn bank_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bank = random_bank(12, 6, 8);
        let path = dir.path().join("bank.acmb");
        save_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(bank, back);
        // byte-exact second save
        let path2 = dir.path().join("bank2.acmb");
        save_bank(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        // corrupted header
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_bank(&path), Err(AcmError::Format(_))));
        // empty bank rejected at save time
        let empty = DescriptorBank {
            descriptors: Array2::zeros((0, 4)),
            manifest: Vec::new(),
            model_fingerprint: 0,
        };
        assert!(save_bank(&empty, &dir.path().join("e.acmb")).is_err());
    }
}
