//! End-to-end stack: frozen encoder, slot binding, mask-competition
//! decoding, concept extraction/suppression, and the relation graph.

use crate::binding::{init_slots, refine_trace, BindingParams, SlotBank};
use crate::concept::{concept_features, form_concepts, fuse_detail, importance, top_select, FusionParams};
use crate::config::RunConfig;
use crate::decoder::{decode_parts, rec_loss, DecoderParams};
use crate::encoder::{FeatureMap, ToyEncoder, PATCH};
use crate::error::Result;
use crate::graph::{relational_forward, GraphParams};
use crate::nn::{ParamList, prefixed};
use crate::rng;
use crate::Tensor;

pub struct OcrtStack {
    pub cfg: RunConfig,
    pub encoder: ToyEncoder,
    pub bank: SlotBank,
    pub binding: BindingParams,
    pub decoder: DecoderParams,
    pub fusion: FusionParams,
    pub graph: GraphParams,
}

/// Object-centric pass over one image.
pub struct Perception {
    pub features: FeatureMap,
    pub slots: Tensor,
    pub attn: Tensor,
    pub masks: Tensor,
    /// Per-slot reconstructed feature patches, before mask blending.
    pub slot_feats: Vec<Tensor>,
    pub z_hat: Tensor,
    pub rec: Tensor,
}

/// Concept/relation pass built on a perception.
pub struct SceneEncoding {
    pub slots: Tensor,
    pub masks: Tensor,
    pub omega: Vec<f64>,
    pub selected: Vec<usize>,
    pub z_obj: Tensor,
    pub z_cpt: Tensor,
    pub t_rel: Tensor,
}

impl OcrtStack {
    pub fn new(cfg: &RunConfig) -> Result<OcrtStack> {
        cfg.validate()?;
        let encoder = ToyEncoder::new(cfg.seed, cfg.size, cfg.d_z)?;
        let mut r = rng::stream(cfg.seed, "init", 0);
        let bank = SlotBank::new(cfg.k, cfg.d_o, &mut r)?;
        let binding = BindingParams::new(cfg.d_z, cfg.d_o, cfg.t, &mut r);
        let decoder = DecoderParams::new(cfg.size / PATCH, cfg.d_o, cfg.d_z, &mut r);
        let fusion = FusionParams::new(cfg.d_z, &mut r);
        let graph = GraphParams::new(cfg.k, cfg.d_o, cfg.d_r, cfg.n_r, &mut r);
        Ok(OcrtStack {
            cfg: cfg.clone(),
            encoder,
            bank,
            binding,
            decoder,
            fusion,
            graph,
        })
    }

    /// Encode, bind slots, decode, and score reconstruction.
    pub fn perceive(&self, image: &Tensor, seed: u64) -> Result<Perception> {
        let features = self.encoder.encode(image)?;
        let slots0 = init_slots(&self.bank, seed)?;
        let (slots, attn) = refine_trace(&slots0, &features.z, &self.binding)?;
        let (masks, z_hat, slot_feats, _) = decode_parts(&slots, &self.decoder)?;
        let rec = rec_loss(&z_hat, &features.z)?;
        Ok(Perception {
            features,
            slots,
            attn,
            masks,
            slot_feats,
            z_hat,
            rec,
        })
    }

    /// Concept extraction, suppression, fusion and the relational pass.
    /// With `freeze_perception` the slot/mask tensors are detached, so
    /// gradients stop at the fusion and graph parameters (the
    /// fine-tuning regime).
    pub fn encode_scene(
        &self,
        image: &Tensor,
        seed: u64,
        freeze_perception: bool,
    ) -> Result<SceneEncoding> {
        let p = self.perceive(image, seed)?;
        let (slots, masks) = if freeze_perception {
            (p.slots.detach(), p.masks.detach())
        } else {
            (p.slots.clone(), p.masks.clone())
        };
        let concepts = form_concepts(&p.features.z, &masks)?;
        let omega = importance(&concepts);
        let selected = top_select(&omega, self.cfg.k_tilde)?;
        let z_obj = fuse_detail(&p.features.detail, &p.features.z, &self.fusion)?;
        let z_cpt = concept_features(&z_obj, &masks, &selected)?;
        let t_rel = relational_forward(
            &slots,
            &omega,
            &self.graph,
            self.cfg.graph_layers,
            self.cfg.resolved_max_degree(),
            rng::derive(seed, "relation", 0),
        )?;
        Ok(SceneEncoding {
            slots,
            masks,
            omega,
            selected,
            z_obj,
            z_cpt,
            t_rel,
        })
    }

    /// Parameters trained in the object-centric phase.
    pub fn ocl_params(&self) -> ParamList<f64> {
        let mut p = prefixed("bank", self.bank.params());
        p.extend(prefixed("binding", self.binding.params()));
        p.extend(prefixed("decoder", self.decoder.params()));
        p
    }

    /// Parameters trained in the relation phase (and fine-tuning).
    pub fn relation_params(&self) -> ParamList<f64> {
        let mut p = self.fusion.params();
        p.extend(self.graph.params());
        p
    }

    pub fn all_params(&self) -> ParamList<f64> {
        let mut p = self.ocl_params();
        p.extend(self.relation_params());
        p
    }
}

/// Mean over each 2x2 fine-grid block, back onto the coarse grid.
pub fn avgpool_2x2(fine: &Tensor) -> Result<Tensor> {
    let n4 = fine.shape()[0];
    let fine_side = (n4 as f64).sqrt().round() as usize;
    let side = fine_side / 2;
    let mut acc: Option<Tensor> = None;
    for dy in 0..2 {
        for dx in 0..2 {
            let mut rows = Vec::with_capacity(side * side);
            for i in 0..side {
                for j in 0..side {
                    rows.push((2 * i + dy) * fine_side + 2 * j + dx);
                }
            }
            let part = fine.gather_rows(&rows)?;
            acc = Some(match acc {
                Some(a) => a.add(&part)?,
                None => part,
            });
        }
    }
    acc.expect("four blocks").mul_scalar(0.25)
}
