//! Spatial-broadcast decoding of slots into alpha maps and feature
//! reconstructions, with softmax competition across slots.

use rand::Rng;

use crate::encoder::sinusoidal_codes;
use crate::error::{OcrtError, Result};
use crate::nn::{Mlp, ParamList, prefixed};
use crate::Tensor;

pub const POS_DIM: usize = 8;
pub const HIDDEN: usize = 128;

pub struct DecoderParams {
    pub mlp: Mlp<f64>,
    pos: Tensor,
    pub n: usize,
    pub d_o: usize,
    pub d_z: usize,
}

impl DecoderParams {
    /// `side` is the token-grid side length (N = side^2).
    pub fn new(side: usize, d_o: usize, d_z: usize, rng: &mut impl Rng) -> Self {
        DecoderParams {
            mlp: Mlp::new(&[d_o + POS_DIM, HIDDEN, HIDDEN, d_z + 1], rng),
            pos: sinusoidal_codes(side, POS_DIM),
            n: side * side,
            d_o,
            d_z,
        }
    }

    pub fn params(&self) -> ParamList<f64> {
        prefixed("mlp", self.mlp.params())
    }
}

/// Broadcast one slot to every location, append the position code, and
/// run the MLP. Returns (alpha logits N x 1, reconstruction N x D_z);
/// the alpha logit is the last output channel.
pub fn decode_slot(slot: &Tensor, params: &DecoderParams) -> Result<(Tensor, Tensor)> {
    if slot.shape() != [1, params.d_o] {
        return Err(OcrtError::ShapeMismatch {
            op: "decode_slot",
            lhs: slot.shape().to_vec(),
            rhs: vec![1, params.d_o],
        });
    }
    let broadcast = Tensor::ones(&[params.n, 1]).matmul(slot)?;
    let x = Tensor::concat(&[&broadcast, &params.pos], 1)?;
    let y = params.mlp.forward(&x)?;
    let feats = y.slice_cols(0, params.d_z)?;
    let alpha = y.slice_cols(params.d_z, params.d_z + 1)?;
    Ok((alpha, feats))
}

/// Mask competition: softmax across the slot axis per location.
pub fn compete(alphas: &Tensor) -> Result<Tensor> {
    alphas.softmax(1)
}

fn check_simplex(m: &Tensor) -> Result<()> {
    let (n, k) = (m.shape()[0], m.shape()[1]);
    let d = m.data();
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..k {
            let v = d[i * k + j];
            if v < 0.0 {
                return Err(OcrtError::Contract(format!(
                    "mask entry ({i},{j}) = {v} is negative"
                )));
            }
            s += v;
        }
        if (s - 1.0).abs() > 1e-9 {
            return Err(OcrtError::Contract(format!(
                "mask row {i} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Convex per-location combination of the slot reconstructions.
pub fn reconstruct(slot_feats: &[Tensor], masks: &Tensor) -> Result<Tensor> {
    check_simplex(masks)?;
    if slot_feats.len() != masks.shape()[1] {
        return Err(OcrtError::ShapeMismatch {
            op: "reconstruct",
            lhs: vec![slot_feats.len()],
            rhs: masks.shape().to_vec(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (k, feats) in slot_feats.iter().enumerate() {
        let weighted = feats.mul(&masks.slice_cols(k, k + 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&weighted)?,
            None => weighted,
        });
    }
    acc.ok_or_else(|| OcrtError::Contract("reconstruct with zero slots".into()))
}

/// Mean squared error over all entries.
pub fn rec_loss(z_hat: &Tensor, z: &Tensor) -> Result<Tensor> {
    if z_hat.shape() != z.shape() {
        return Err(OcrtError::ShapeMismatch {
            op: "rec_loss",
            lhs: z_hat.shape().to_vec(),
            rhs: z.shape().to_vec(),
        });
    }
    z_hat.sub(z)?.square()?.mean()
}

/// Full decode of a slot bank: masks (N x K), reconstruction (N x D_z),
/// and the raw alpha logits.
pub fn decode_all(slots: &Tensor, params: &DecoderParams) -> Result<(Tensor, Tensor, Tensor)> {
    let (masks, z_hat, _, alpha_mat) = decode_parts(slots, params)?;
    Ok((masks, z_hat, alpha_mat))
}

/// Full decode: masks, blended reconstruction, the per-slot feature
/// patches before blending (so callers can re-blend them under a
/// different — e.g. detached — mask), and the raw alpha logits.
pub fn decode_parts(
    slots: &Tensor,
    params: &DecoderParams,
) -> Result<(Tensor, Tensor, Vec<Tensor>, Tensor)> {
    let k = slots.shape()[0];
    let mut alphas = Vec::with_capacity(k);
    let mut feats = Vec::with_capacity(k);
    for i in 0..k {
        let (a, f) = decode_slot(&slots.slice_rows(i, i + 1)?, params)?;
        alphas.push(a);
        feats.push(f);
    }
    let alpha_refs: Vec<&Tensor> = alphas.iter().collect();
    let alpha_mat = Tensor::concat(&alpha_refs, 1)?;
    let masks = compete(&alpha_mat)?;
    let z_hat = reconstruct(&feats, &masks)?;
    Ok((masks, z_hat, feats, alpha_mat))
}
