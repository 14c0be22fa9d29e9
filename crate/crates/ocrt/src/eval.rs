//! Evaluation metrics: IoU, Hungarian best-match slot scoring against
//! ground-truth masks, thresholded segmentation IoU, and embedding
//! distances.

use crate::error::{OcrtError, Result};
use crate::scene::SyntheticScene;
use crate::Tensor;

pub fn iou_binary(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of a soft prediction thresholded at 0.5 against a {0,1} target.
pub fn seg_iou(pred: &[f64], target: &[f64]) -> f64 {
    let a: Vec<bool> = pred.iter().map(|p| *p >= 0.5).collect();
    let b: Vec<bool> = target.iter().map(|t| *t >= 0.5).collect();
    iou_binary(&a, &b)
}

/// Minimum-cost assignment of rows to columns (rows ≤ columns),
/// shortest-augmenting-path formulation with potentials, O(n²m).
/// Returns the assigned column for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if m < n || cost.iter().any(|r| r.len() != m) {
        return Err(OcrtError::Contract(format!(
            "hungarian: need a rectangular {n}x{m} matrix with rows <= cols"
        )));
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // column -> assigned row (1-based), 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Per-pixel hard segments from coarse slot masks: each pixel takes the
/// argmax slot of its token cell (nearest-neighbor upsampling).
pub fn slot_segments(masks: &Tensor, image_size: usize) -> Result<Vec<usize>> {
    let (n, k) = (masks.shape()[0], masks.shape()[1]);
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || image_size % side != 0 {
        return Err(OcrtError::Contract(format!(
            "slot_segments: {n} tokens do not tile a {image_size}x{image_size} image"
        )));
    }
    let factor = image_size / side;
    let d = masks.to_vec();
    let mut labels = Vec::with_capacity(image_size * image_size);
    for y in 0..image_size {
        for x in 0..image_size {
            let cell = (y / factor) * side + x / factor;
            let mut best = 0;
            for s in 1..k {
                if d[cell * k + s] > d[cell * k + best] {
                    best = s;
                }
            }
            labels.push(best);
        }
    }
    Ok(labels)
}

/// Mean IoU of the Hungarian best match between ground-truth segments
/// (objects plus background) and the hard slot segments.
pub fn slot_match_iou(masks: &Tensor, scene: &SyntheticScene) -> Result<f64> {
    let labels = slot_segments(masks, scene.size)?;
    labels_match_iou(&labels, masks.shape()[1], scene)
}

/// Hungarian best-match IoU between an arbitrary per-pixel labelling
/// (k labels) and the scene's ground-truth segments.
pub fn labels_match_iou(labels: &[usize], k: usize, scene: &SyntheticScene) -> Result<f64> {
    if labels.len() != scene.pixels() {
        return Err(OcrtError::Contract(format!(
            "labels_match_iou: {} labels for {} pixels",
            labels.len(),
            scene.pixels()
        )));
    }
    let slot_bin: Vec<Vec<bool>> = (0..k)
        .map(|s| labels.iter().map(|&l| l == s).collect())
        .collect();
    let mut gt: Vec<Vec<bool>> = scene
        .masks
        .iter()
        .map(|m| m.iter().map(|&v| v >= 0.5).collect())
        .collect();
    gt.push(scene.background.iter().map(|&v| v >= 0.5).collect());
    if gt.len() > k {
        return Err(OcrtError::Contract(format!(
            "scene has {} segments but only {k} slots",
            gt.len()
        )));
    }
    let cost: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| slot_bin.iter().map(|s| -iou_binary(g, s)).collect())
        .collect();
    let assign = hungarian(&cost)?;
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(g, &s)| iou_binary(&gt[g], &slot_bin[s]))
        .sum();
    Ok(total / gt.len() as f64)
}

/// Euclidean distance between two embedding vectors.
pub fn embedding_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(OcrtError::ShapeMismatch {
            op: "embedding_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d: f64 = a
        .to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(d.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        let mut cols: Vec<usize> = (0..m).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, n, &mut |perm| {
            let total: f64 = (0..n).map(|i| cost[i][perm[i]]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(cols: &mut Vec<usize>, depth: usize, n: usize, f: &mut impl FnMut(&[usize])) {
        if depth == n {
            f(cols);
            return;
        }
        for i in depth..cols.len() {
            cols.swap(depth, i);
            permute(cols, depth + 1, n, f);
            cols.swap(depth, i);
        }
    }

    #[test]
    fn iou_basics() {
        assert_eq!(iou_binary(&[true, true], &[true, true]), 1.0);
        assert_eq!(iou_binary(&[true, false], &[false, true]), 0.0);
        assert_eq!(iou_binary(&[false, false], &[false, false]), 1.0);
        assert!((iou_binary(&[true, true, false], &[true, false, false]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hungarian_identity_costs() {
        let cost = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..40 {
            let n = 2 + trial % 5; // up to 6
            let m = n + trial % 2;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let assign = hungarian(&cost).unwrap();
            let mut seen = vec![false; m];
            for &c in &assign {
                assert!(!seen[c]);
                seen[c] = true;
            }
            let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            assert!((total - brute_force(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_rejects_wide_rows() {
        assert!(hungarian(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn perfect_slot_masks_score_one() {
        let spec = crate::scene::SceneSpec::default();
        let scene = crate::scene::generate_scene(&spec, 3).unwrap();
        let size = scene.size;
        let side = size / 2;
        let k = scene.masks.len() + 1;
        // Build coarse one-hot slot masks straight off the ground truth,
        // using the top-left pixel of each 2x2 cell (masks are blocky
        // enough for this to reproduce the scene exactly only when every
        // cell is uniform; use cell-majority instead).
        let mut data = vec![0.0; side * side * k];
        for cy in 0..side {
            for cx in 0..side {
                let mut votes = vec![0usize; k];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = (cy * 2 + dy) * size + cx * 2 + dx;
                        let mut owner = k - 1;
                        for (i, m) in scene.masks.iter().enumerate() {
                            if m[p] >= 0.5 {
                                owner = i;
                            }
                        }
                        votes[owner] += 1;
                    }
                }
                let best = (0..k).max_by_key(|&i| votes[i]).unwrap();
                data[(cy * side + cx) * k + best] = 1.0;
            }
        }
        let masks = Tensor::from_vec(data, &[side * side, k]).unwrap();
        let score = slot_match_iou(&masks, &scene).unwrap();
        // Cell-majority quantization costs a little IoU at boundaries.
        assert!(score > 0.75, "score = {score}");
    }

    #[test]
    fn embedding_distance_is_euclidean() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![4.0, 6.0], &[1, 2]).unwrap();
        assert!((embedding_distance(&a, &b).unwrap() - 5.0).abs() < 1e-15);
    }
}
