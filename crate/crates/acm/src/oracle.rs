//! Independent reference implementations used to verify the fast paths.
//!
//! Everything here is deliberately brute-force and shares no code with the
//! implementations it checks: central finite differences for gradients, a
//! full-sort scan for nearest neighbors, and an exhaustive window scan for
//! recall. Used by unit tests and the acceptance suite.

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Max relative error between two gradients, with an absolute floor to avoid
/// blowing up near-zero entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Brute-force top-k by descending dot product, ties broken by ascending row.
pub fn brute_force_top_k(bank: &[Vec<f32>], query: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut scored: Vec<(usize, f32)> = bank
        .iter()
        .enumerate()
        .map(|(i, row)| (i, row.iter().zip(query).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Exhaustive recall@n: checks every (query, rank, window offset) combination.
pub fn brute_force_recall(
    retrievals: &[(u32, Vec<u32>)], // (query frame, ranked reference frames)
    correspondence: &std::collections::BTreeMap<u32, u32>,
    n: usize,
    window_radius: u32,
) -> f64 {
    let mut hits = 0usize;
    for (query, ranked) in retrievals {
        let gt = correspondence[query];
        let mut localized = false;
        for rank in 0..n.min(ranked.len()) {
            for offset in 0..=window_radius {
                if ranked[rank] == gt + offset || ranked[rank] + offset == gt {
                    localized = true;
                }
            }
        }
        if localized {
            hits += 1;
        }
    }
    hits as f64 / retrievals.len() as f64
}

/// Quaternion (w, x, y, z) to rotation matrix, used as the independent route
/// for pose-bucket angle computation.
pub fn quaternion_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation angle between two unit quaternions via the matrix route:
/// angle = arccos((trace(Ra^T Rb) - 1) / 2), in degrees.
pub fn rotation_angle_via_matrices(qa: [f64; 4], qb: [f64; 4]) -> f64 {
    let ra = quaternion_to_matrix(qa);
    let rb = quaternion_to_matrix(qb);
    let mut trace = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            trace += ra[j][i] * rb[j][i]; // (Ra^T Rb)[i][i]
        }
    }
    (((trace - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees()
}
