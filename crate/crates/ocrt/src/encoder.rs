//! Frozen toy image encoder standing in for a foundation-model backbone.
//!
//! Per-patch features are a fixed random linear projection of patch
//! pixels plus a sinusoidal position code, mixed once by a frozen
//! self-attention layer. The detail stream is an analogous per-pixel
//! projection taken before any mixing, on a grid 4x as dense.

use crate::error::{OcrtError, Result};
use crate::nn::{Linear, ParamList, prefixed};
use crate::rng;
use crate::Tensor;

pub const PATCH: usize = 2;

/// Relative scale of the sinusoidal position code vs the pixel
/// projection. Unit-scale codes drown the content signal (position
/// explains ~97% of the feature variance across locations), leaving
/// reconstruction with no incentive to separate objects; these weights
/// put the content term in charge while keeping position recoverable.
const POS_SCALE: f64 = 0.1;
const CONTENT_SCALE: f64 = 3.0;

/// Coarse tokens `z` plus the 4x-denser pre-mixing detail stream.
pub struct FeatureMap {
    /// N x D_z, N = (H/PATCH)^2.
    pub z: Tensor,
    /// N' x D_z, N' = 4N.
    pub detail: Tensor,
}

/// Single-head self-attention with a residual connection.
pub struct MixingLayer {
    pub wq: Linear<f64>,
    pub wk: Linear<f64>,
    pub wv: Linear<f64>,
    pub wo: Linear<f64>,
    dim: usize,
}

impl MixingLayer {
    fn init(dim: usize, trainable: bool, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            if trainable {
                Linear::new(dim, dim, false, r)
            } else {
                Linear::frozen(dim, dim, false, r)
            }
        };
        MixingLayer {
            wq: mk(rng),
            wk: mk(rng),
            wv: mk(rng),
            wo: mk(rng),
            dim,
        }
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(tokens)?;
        let k = self.wk.forward(tokens)?;
        let v = self.wv.forward(tokens)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let scores = q.matmul(&k.transpose()?)?.mul_scalar(scale)?;
        let attn = scores.softmax(1)?;
        let mixed = attn.matmul(&v)?;
        tokens.add(&self.wo.forward(&mixed)?)
    }

    /// Trainable layer initialized to the same weights.
    pub fn trainable_copy(&self) -> Result<MixingLayer> {
        let copy = |l: &Linear<f64>| -> Result<Linear<f64>> {
            Ok(Linear {
                weight: Tensor::param(l.weight.to_vec(), l.weight.shape())?,
                bias: None,
            })
        };
        Ok(MixingLayer {
            wq: copy(&self.wq)?,
            wk: copy(&self.wk)?,
            wv: copy(&self.wv)?,
            wo: copy(&self.wo)?,
            dim: self.dim,
        })
    }

    pub fn params(&self) -> ParamList<f64> {
        let mut p = ParamList::new();
        for (name, l) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            p.extend(prefixed(name, l.params()));
        }
        p
    }
}

pub struct ToyEncoder {
    pub size: usize,
    pub d_z: usize,
    patch_proj: Linear<f64>,
    detail_proj: Linear<f64>,
    pub mixing: MixingLayer,
    pos_coarse: Tensor,
    pos_fine: Tensor,
    patch_gather: Vec<usize>,
}

pub(crate) fn sinusoidal_codes(side: usize, dim: usize) -> Tensor {
    let n = side * side;
    let mut data = vec![0.0f64; n * dim];
    let half = dim / 2;
    for gy in 0..side {
        for gx in 0..side {
            let row = gy * side + gx;
            for i in 0..half / 2 {
                let freq = 1.0 / 100f64.powf(2.0 * i as f64 / half as f64);
                data[row * dim + 2 * i] = (gx as f64 * freq).sin();
                data[row * dim + 2 * i + 1] = (gx as f64 * freq).cos();
                data[row * dim + half + 2 * i] = (gy as f64 * freq).sin();
                data[row * dim + half + 2 * i + 1] = (gy as f64 * freq).cos();
            }
        }
    }
    Tensor::from_vec(data, &[n, dim]).expect("finite position codes")
}

impl ToyEncoder {
    pub fn new(frozen_seed: u64, size: usize, d_z: usize) -> Result<ToyEncoder> {
        if size % PATCH != 0 {
            return Err(OcrtError::Contract(format!(
                "image side {size} not divisible by patch size {PATCH}"
            )));
        }
        let mut r = rng::stream(frozen_seed, "encoder", 0);
        let patch_dim = PATCH * PATCH * 3;
        let scale_up = |l: &Linear<f64>| {
            let w: Vec<f64> = l.weight.to_vec().iter().map(|v| v * CONTENT_SCALE).collect();
            l.weight.set_data(w).expect("same length");
            if let Some(b) = &l.bias {
                let bv: Vec<f64> = b.to_vec().iter().map(|v| v * CONTENT_SCALE).collect();
                b.set_data(bv).expect("same length");
            }
        };
        let patch_proj = Linear::frozen(patch_dim, d_z, true, &mut r);
        scale_up(&patch_proj);
        let detail_proj = Linear::frozen(3, d_z, true, &mut r);
        scale_up(&detail_proj);
        let mixing = MixingLayer::init(d_z, false, &mut r);
        let side = size / PATCH;
        // Flat indices into an [H*W, 3] image for each patch row.
        let mut patch_gather = Vec::with_capacity(side * side * patch_dim);
        for py in 0..side {
            for px in 0..side {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let pixel = (py * PATCH + dy) * size + px * PATCH + dx;
                        for c in 0..3 {
                            patch_gather.push(pixel * 3 + c);
                        }
                    }
                }
            }
        }
        Ok(ToyEncoder {
            size,
            d_z,
            patch_proj,
            detail_proj,
            mixing,
            pos_coarse: sinusoidal_codes(side, d_z).mul_scalar(POS_SCALE)?,
            pos_fine: sinusoidal_codes(size, d_z).mul_scalar(POS_SCALE)?,
            patch_gather,
        })
    }

    pub fn n_tokens(&self) -> usize {
        (self.size / PATCH) * (self.size / PATCH)
    }

    /// Patch projections, optionally without the position code
    /// (used by the translation-equivariance check).
    pub fn patch_embeddings(&self, image: &Tensor, with_pos: bool) -> Result<Tensor> {
        let n = self.n_tokens();
        let patch_dim = PATCH * PATCH * 3;
        let patches = image.gather(&self.patch_gather, &[n, patch_dim])?;
        let proj = self.patch_proj.forward(&patches)?;
        if with_pos {
            proj.add(&self.pos_coarse)
        } else {
            Ok(proj)
        }
    }

    /// Pre-mixing token sequence (projection + position code).
    pub fn tokens(&self, image: &Tensor) -> Result<Tensor> {
        self.patch_embeddings(image, true)
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        let expected = self.size * self.size;
        if image.shape() != [expected, 3] {
            return Err(OcrtError::ShapeMismatch {
                op: "encode",
                lhs: image.shape().to_vec(),
                rhs: vec![expected, 3],
            });
        }
        let tokens = self.tokens(image)?;
        let z = self.mixing.forward(&tokens)?;
        let detail = self.detail_proj.forward(image)?.add(&self.pos_fine)?;
        Ok(FeatureMap { z, detail })
    }

    /// Mean-pooled embedding of the mixed tokens: the toy stand-in for
    /// a contrastive image embedding.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.encode(image)?.z.mean_axis(0)?)
    }

    /// Embedding with relation tokens concatenated to the sequence
    /// before the given mixing layer; pooled over the image tokens only.
    pub fn embed_with_tokens(
        &self,
        image: &Tensor,
        relation_tokens: &Tensor,
        mixing: &MixingLayer,
    ) -> Result<Tensor> {
        let tokens = self.tokens(image)?;
        let n = tokens.shape()[0];
        let seq = Tensor::concat(&[&tokens, relation_tokens], 0)?;
        let mixed = mixing.forward(&seq)?;
        mixed.slice_rows(0, n)?.mean_axis(0)
    }

    pub fn frozen_params(&self) -> ParamList<f64> {
        let mut p = ParamList::new();
        p.extend(prefixed("patch_proj", self.patch_proj.params()));
        p.extend(prefixed("detail_proj", self.detail_proj.params()));
        p.extend(prefixed("mixing", self.mixing.params()));
        p
    }
}
