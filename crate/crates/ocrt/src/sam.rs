//! Self-training segmentation harness: a frozen anchor head, a trained
//! student, and its EMA teacher, driven by weak prompts and the
//! dice/focal/bce pseudo-label losses.

use rand::Rng;

use crate::error::{OcrtError, Result};
use crate::eval::seg_iou;
use crate::losses::{bce, dice, focal, LossReport};
use crate::nn::{Linear, ParamList, prefixed};
use crate::optim::Adam;
use crate::pipeline::OcrtStack;
use crate::rng;
use crate::scene::{derive_prompt, make_views, PromptKind, SyntheticScene, WeakPrompt};
use crate::Tensor;

pub const EMA_MOMENTUM: f64 = 0.999;
const HIDDEN: usize = 64;

/// Per-pixel mask head over [prompt evidence | concept features |
/// pooled relation tokens].
pub struct SegHead {
    pub l1: Linear<f64>,
    pub l2: Linear<f64>,
    pub d_z: usize,
    pub d_r: usize,
}

impl SegHead {
    pub fn new(d_z: usize, d_r: usize, rng: &mut impl Rng) -> Self {
        SegHead {
            l1: Linear::new(2 + d_z + d_r, HIDDEN, true, rng),
            l2: Linear::new(HIDDEN, 1, true, rng),
            d_z,
            d_r,
        }
    }

    /// Same weights, no gradient buffers.
    pub fn frozen_clone(&self) -> SegHead {
        let freeze = |l: &Linear<f64>| Linear {
            weight: Tensor::from_vec(l.weight.to_vec(), l.weight.shape()).unwrap(),
            bias: l
                .bias
                .as_ref()
                .map(|b| Tensor::from_vec(b.to_vec(), b.shape()).unwrap()),
        };
        SegHead {
            l1: freeze(&self.l1),
            l2: freeze(&self.l2),
            d_z: self.d_z,
            d_r: self.d_r,
        }
    }

    fn copy_from(&self, other: &SegHead) {
        for (dst, src) in self.tensors().into_iter().zip(other.tensors()) {
            dst.set_data(src.to_vec()).expect("matching head layouts");
        }
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut v = vec![self.l1.weight.clone()];
        v.push(self.l1.bias.clone().unwrap());
        v.push(self.l2.weight.clone());
        v.push(self.l2.bias.clone().unwrap());
        v
    }

    pub fn forward(&self, prompt: &Tensor, z_cpt: &Tensor, t_rel: &Tensor) -> Result<Tensor> {
        let p = prompt.shape()[0];
        if z_cpt.shape() != [p, self.d_z] {
            return Err(OcrtError::ShapeMismatch {
                op: "seg_head",
                lhs: z_cpt.shape().to_vec(),
                rhs: vec![p, self.d_z],
            });
        }
        let pooled = t_rel.mean_axis(0)?;
        let broadcast = Tensor::ones(&[p, 1]).matmul(&pooled)?;
        let x = Tensor::concat(&[prompt, z_cpt, &broadcast], 1)?;
        self.l2.forward(&self.l1.forward(&x)?.relu()?)?.sigmoid()
    }

    pub fn params(&self) -> ParamList<f64> {
        let mut p = prefixed("l1", self.l1.params());
        p.extend(prefixed("l2", self.l2.params()));
        p
    }
}

/// Anchor (frozen reference), student (trained), teacher (EMA copy).
pub struct TripleModel {
    pub anchor: SegHead,
    pub student: SegHead,
    pub teacher: SegHead,
    pub best_iou: Option<f64>,
}

impl TripleModel {
    pub fn new(d_z: usize, d_r: usize, rng: &mut impl Rng) -> Self {
        let student = SegHead::new(d_z, d_r, rng);
        let anchor = student.frozen_clone();
        let teacher = student.frozen_clone();
        TripleModel {
            anchor,
            student,
            teacher,
            best_iou: None,
        }
    }

    /// teacher ← m·teacher + (1−m)·student, m = 0.999.
    pub fn ema_update(&self) {
        for (t, s) in self.teacher.tensors().into_iter().zip(self.student.tensors()) {
            let mixed: Vec<f64> = t
                .to_vec()
                .iter()
                .zip(s.to_vec())
                .map(|(tv, sv)| EMA_MOMENTUM * tv + (1.0 - EMA_MOMENTUM) * sv)
                .collect();
            t.set_data(mixed).expect("matching head layouts");
        }
    }

    /// Copy the student into the anchor when validation strictly
    /// improves on the best seen so far. Returns whether a copy happened.
    pub fn bootstrap_copy(&mut self, validation_iou: f64) -> bool {
        let improved = self.best_iou.is_none_or(|best| validation_iou > best);
        if improved {
            self.anchor.copy_from(&self.student);
            self.best_iou = Some(validation_iou);
        }
        improved
    }
}

/// Rasterize a weak prompt into inside/outside evidence channels.
pub fn prompt_map(prompt: &WeakPrompt, size: usize) -> Tensor {
    let n = size * size;
    let mut data = vec![0.0; n * 2];
    let mut set = |x: usize, y: usize, ch: usize| {
        if x < size && y < size {
            data[(y * size + x) * 2 + ch] = 1.0;
        }
    };
    match prompt {
        WeakPrompt::Box { x0, y0, x1, y1 } => {
            for y in 0..size {
                for x in 0..size {
                    let inside = x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1;
                    data[(y * size + x) * 2 + usize::from(!inside)] = 1.0;
                }
            }
        }
        WeakPrompt::Points { inside, outside } => {
            for &(x, y) in inside {
                set(x, y, 0);
            }
            for &(x, y) in outside {
                set(x, y, 1);
            }
        }
        WeakPrompt::Poly { vertices } => {
            if vertices.len() < 3 {
                for y in 0..size {
                    for x in 0..size {
                        let on = vertices.contains(&(x, y));
                        data[(y * size + x) * 2 + usize::from(!on)] = 1.0;
                    }
                }
            } else {
                let filled = fill_polygon(vertices, size);
                for (p, &inside) in filled.iter().enumerate() {
                    data[p * 2 + usize::from(!inside)] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(data, &[n, 2]).expect("indicator map is finite")
}

/// Boundary-inclusive even-odd fill, in exact integer arithmetic.
fn fill_polygon(vertices: &[(usize, usize)], size: usize) -> Vec<bool> {
    let pts: Vec<(i64, i64)> = vertices.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    let mut out = vec![false; size * size];
    for y in 0..size as i64 {
        'pixel: for x in 0..size as i64 {
            let mut inside = false;
            for i in 0..pts.len() {
                let (x0, y0) = pts[i];
                let (x1, y1) = pts[(i + 1) % pts.len()];
                let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
                if cross == 0
                    && x >= x0.min(x1)
                    && x <= x0.max(x1)
                    && y >= y0.min(y1)
                    && y <= y0.max(y1)
                {
                    out[y as usize * size + x as usize] = true;
                    continue 'pixel;
                }
                if (y0 > y) != (y1 > y) {
                    // Ray to the left: x < x0 + (y-y0)(x1-x0)/(y1-y0),
                    // cleared of the division.
                    let den = y1 - y0;
                    let lhs = (x - x0) * den;
                    let rhs = (y - y0) * (x1 - x0);
                    if (den > 0 && lhs < rhs) || (den < 0 && lhs > rhs) {
                        inside = !inside;
                    }
                }
            }
            out[y as usize * size + x as usize] = inside;
        }
    }
    out
}

/// One self-training step on a single scene. Gradients reach the
/// student head plus the fusion/graph parameters; the binding/decoder
/// stack stays frozen, and the teacher is EMA-updated afterwards.
pub fn sam_toy_step(
    stack: &OcrtStack,
    triple: &TripleModel,
    optimizer: &mut Adam<f64>,
    trainable: &ParamList<f64>,
    scene: &SyntheticScene,
    kind: PromptKind,
    seed: u64,
) -> Result<LossReport> {
    let (weak, strong) = make_views(scene, rng::derive(seed, "views", 0), 1.0);
    let obj = (seed as usize) % scene.masks.len();
    let prompt = derive_prompt(&weak.masks[obj], scene.size, kind, rng::derive(seed, "prompt", 0))?;
    let pm = prompt_map(&prompt, scene.size);

    let enc_w = stack.encode_scene(&weak.image_tensor(), rng::derive(seed, "sam-weak", 0), true)?;
    let enc_s = stack.encode_scene(&strong.image_tensor(), rng::derive(seed, "sam-strong", 0), true)?;
    let t_rel = &enc_s.t_rel;
    let t_rel_frozen = t_rel.detach();

    let m_stu_w = triple.student.forward(&pm, &enc_w.z_cpt, t_rel)?;
    let m_stu_s = triple.student.forward(&pm, &enc_s.z_cpt, t_rel)?;
    let m_anc_w = triple.anchor.forward(&pm, &enc_w.z_cpt.detach(), &t_rel_frozen)?;
    let m_tea_s = triple.teacher.forward(&pm, &enc_s.z_cpt.detach(), &t_rel_frozen)?;

    let dice_stu = dice(&m_stu_w, &m_anc_w)?;
    let dice_tea = dice(&m_tea_s, &m_anc_w)?;
    let focal_cons = focal(&m_stu_w, &m_tea_s.detach())?;
    let sam_bce = bce(&m_stu_s, &m_anc_w)?;
    let sam_dice = dice(&m_stu_s, &m_anc_w)?;

    let mut report = LossReport::default();
    report.record("bce", sam_bce.item())?;
    report.record("dice", dice_stu.item() + dice_tea.item())?;
    report.record("focal", focal_cons.item())?;
    report.record("sam_ocrt", sam_bce.item() + sam_dice.item())?;

    let total = dice_stu
        .add(&dice_tea)?
        .add(&focal_cons)?
        .add(&sam_bce)?
        .add(&sam_dice)?;
    total.backward()?;
    optimizer.step(trainable)?;
    triple.ema_update();
    Ok(report)
}

/// Mean IoU of a head's thresholded prediction against the prompted
/// object's ground-truth mask, over a scene list.
pub fn head_miou(
    stack: &OcrtStack,
    head: &SegHead,
    scenes: &[SyntheticScene],
    kind: PromptKind,
    seed: u64,
) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, scene) in scenes.iter().enumerate() {
        let s = rng::derive(seed, "eval-scene", i as u64);
        let obj = (s as usize) % scene.masks.len();
        let prompt = derive_prompt(&scene.masks[obj], scene.size, kind, s)?;
        let pm = prompt_map(&prompt, scene.size);
        let enc = stack.encode_scene(&scene.image_tensor(), s, true)?;
        let pred = head.forward(&pm, &enc.z_cpt.detach(), &enc.t_rel.detach())?;
        total += seg_iou(&pred.to_vec(), &scene.masks[obj]);
    }
    Ok(total / scenes.len() as f64)
}
