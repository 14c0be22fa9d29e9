//! Concept extraction: slot-masked features, cosine importance, Top-K̃
//! selection, detail/semantic fusion, and concept-gated features.

use rand::Rng;

use crate::error::{OcrtError, Result};
use crate::nn::{Linear, ParamList, prefixed};
use crate::Tensor;

pub struct ConceptSet {
    pub concepts: Vec<Tensor>,
    pub omega: Vec<f64>,
    pub selected: Vec<usize>,
}

/// cₖ = z ⊙ mₖ: each concept is the feature map masked by one slot's
/// competition weights.
pub fn form_concepts(z: &Tensor, masks: &Tensor) -> Result<Vec<Tensor>> {
    let (n, k) = (masks.shape()[0], masks.shape()[1]);
    if z.shape()[0] != n {
        return Err(OcrtError::ShapeMismatch {
            op: "form_concepts",
            lhs: z.shape().to_vec(),
            rhs: masks.shape().to_vec(),
        });
    }
    (0..k).map(|i| z.mul(&masks.slice_cols(i, i + 1)?)).collect()
}

/// ωₖ = (1/K) Σⱼ cos(cₖ, cⱼ) over concepts flattened to vectors; the
/// self-term is included. Zero-norm concepts contribute 0 to every
/// pairwise term and trigger a warning on stderr.
pub fn importance(concepts: &[Tensor]) -> Vec<f64> {
    let k = concepts.len();
    let flat: Vec<Vec<f64>> = concepts.iter().map(|c| c.to_vec()).collect();
    let norms: Vec<f64> = flat
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for (i, n) in norms.iter().enumerate() {
        if *n == 0.0 {
            eprintln!("warning: degenerate concept {i} has zero norm");
        }
    }
    (0..k)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..k {
                if norms[a] > 0.0 && norms[b] > 0.0 {
                    let dot: f64 = flat[a].iter().zip(&flat[b]).map(|(x, y)| x * y).sum();
                    s += dot / (norms[a] * norms[b]);
                }
            }
            s / k as f64
        })
        .collect()
}

/// Indices of the K̃ largest entries, ties broken by lower index.
pub fn top_select(omega: &[f64], k_tilde: usize) -> Result<Vec<usize>> {
    let k = omega.len();
    if k_tilde == 0 || k_tilde > k {
        return Err(OcrtError::Contract(format!(
            "top_select: K~ = {k_tilde} out of range [1, {k}]"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        omega[b]
            .partial_cmp(&omega[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..k_tilde].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Learnable 2x2 stride-2 transposed convolution (four D_z x D_z taps
/// plus a shared bias) and a linear projection of the detail stream.
pub struct FusionParams {
    pub taps: [Tensor; 4],
    pub bias: Tensor,
    pub detail_proj: Linear<f64>,
    pub d_z: usize,
}

impl FusionParams {
    pub fn new(d_z: usize, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / (2 * d_z) as f64).sqrt();
        let taps = std::array::from_fn(|_| Tensor::randn_param(&[d_z, d_z], scale, rng));
        FusionParams {
            taps,
            bias: Tensor::param(vec![0.0; d_z], &[1, d_z]).unwrap(),
            detail_proj: Linear::new(d_z, d_z, true, rng),
            d_z,
        }
    }

    /// Identity taps and zero bias: each semantic token is replicated
    /// into its 2x2 output block.
    pub fn nearest_init(d_z: usize, rng: &mut impl Rng) -> Self {
        let p = FusionParams::new(d_z, rng);
        let mut eye = vec![0.0; d_z * d_z];
        for i in 0..d_z {
            eye[i * d_z + i] = 1.0;
        }
        for t in &p.taps {
            t.set_data(eye.clone()).unwrap();
        }
        p
    }

    pub fn params(&self) -> ParamList<f64> {
        let mut out: ParamList<f64> = self
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("fusion.tap{i}"), t.clone()))
            .collect();
        out.push(("fusion.bias".to_string(), self.bias.clone()));
        out.extend(prefixed("fusion.detail", self.detail_proj.params()));
        out
    }
}

fn grid_side(n: usize, op: &'static str) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(OcrtError::Contract(format!("{op}: {n} tokens is not a square grid")));
    }
    Ok(side)
}

/// Row map from the fine (2s x 2s, row-major) grid into four stacked
/// coarse blocks: fine row (2i+di, 2j+dj) reads block (2di+dj), row i*s+j.
fn interleave_rows(side: usize) -> Vec<usize> {
    let n = side * side;
    let fine = 2 * side;
    let mut rows = Vec::with_capacity(4 * n);
    for y in 0..fine {
        for x in 0..fine {
            let block = 2 * (y % 2) + x % 2;
            rows.push(block * n + (y / 2) * side + x / 2);
        }
    }
    rows
}

/// Upsample the semantic map by the transposed convolution and add the
/// projected detail stream. N' must be exactly 4N.
pub fn fuse_detail(z_detail: &Tensor, z_sem: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let n = z_sem.shape()[0];
    if z_detail.shape()[0] != 4 * n {
        return Err(OcrtError::Contract(format!(
            "fuse_detail: detail grid {} is not 4x the semantic grid {n}",
            z_detail.shape()[0]
        )));
    }
    let side = grid_side(n, "fuse_detail")?;
    let blocks: Vec<Tensor> = params
        .taps
        .iter()
        .map(|t| z_sem.matmul(t)?.add(&params.bias))
        .collect::<Result<_>>()?;
    let block_refs: Vec<&Tensor> = blocks.iter().collect();
    let stacked = Tensor::concat(&block_refs, 0)?;
    let upsampled = stacked.gather_rows(&interleave_rows(side))?;
    upsampled.add(&params.detail_proj.forward(z_detail)?)
}

/// Nearest-neighbor upsampling of the mask columns to the fine grid.
pub fn upsample_masks(masks: &Tensor) -> Result<Tensor> {
    let side = grid_side(masks.shape()[0], "upsample_masks")?;
    let fine = 2 * side;
    let mut rows = Vec::with_capacity(4 * side * side);
    for y in 0..fine {
        for x in 0..fine {
            rows.push((y / 2) * side + x / 2);
        }
    }
    masks.gather_rows(&rows)
}

/// z_cpt = z_obj ⊙ g with g[n] = Σ_{k ∈ selected} m'[n,k], computed as
/// the complement 1 − Σ_{k ∉ selected} m'[n,k] so that selecting every
/// concept leaves z_obj bit-identical. Masks are given on the coarse
/// grid and upsampled here.
pub fn concept_features(z_obj: &Tensor, masks: &Tensor, selected: &[usize]) -> Result<Tensor> {
    let k = masks.shape()[1];
    let fine = upsample_masks(masks)?;
    let dropped: Vec<usize> = (0..k).filter(|i| !selected.contains(i)).collect();
    if dropped.is_empty() {
        return z_obj.mul_scalar(1.0);
    }
    let mut sum_dropped: Option<Tensor> = None;
    for i in dropped {
        let col = fine.slice_cols(i, i + 1)?;
        sum_dropped = Some(match sum_dropped {
            Some(s) => s.add(&col)?,
            None => col,
        });
    }
    let gate = sum_dropped
        .unwrap()
        .neg()?
        .add_scalar(1.0)?
        .clamp(0.0, 1.0)?;
    z_obj.mul(&gate)
}
