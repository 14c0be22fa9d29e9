//! Unsupervised adversarial embedding fine-tuning: l-infinity PGD on a
//! toy contrastive embedding, with relation tokens concatenated into
//! the token stream of a trainable copy of the frozen mixing layer.

use rand::Rng;

use crate::encoder::MixingLayer;
use crate::error::{OcrtError, Result};
use crate::losses::LossReport;
use crate::nn::{ParamList, prefixed};
use crate::optim::Adam;
use crate::pipeline::OcrtStack;
use crate::rng;
use crate::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub eps: f64,
    pub steps: usize,
}

impl AttackConfig {
    pub fn new(eps: f64, steps: usize) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(OcrtError::Contract(format!("attack eps {eps} must be >= 0")));
        }
        if steps == 0 {
            return Err(OcrtError::Contract("attack needs at least 1 step".into()));
        }
        Ok(AttackConfig { eps, steps })
    }

    pub fn step_size(&self) -> f64 {
        self.eps / 4.0
    }
}

pub struct PgdResult {
    pub x_adv: Tensor,
    /// Objective after the random start and after each step.
    pub objective: Vec<f64>,
}

/// Move v toward x by ulps until |v - x| <= eps holds in exact f64
/// arithmetic, then clamp to [0,1] (which only shrinks the distance).
fn exact_project(v: f64, x: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x - eps, x + eps);
    while v - x > eps {
        v = v.next_down();
    }
    while v - x < -eps {
        v = v.next_up();
    }
    v.clamp(0.0, 1.0)
}

/// Signed-gradient ascent on the squared embedding displacement, with
/// per-step exact projection onto the eps-ball around x intersected
/// with [0,1]. The start point is uniform inside the ball.
pub fn pgd_attack(
    x: &Tensor,
    embed_fn: &dyn Fn(&Tensor) -> Result<Tensor>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<PgdResult> {
    let base = x.to_vec();
    let shape = x.shape().to_vec();
    if base.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(OcrtError::Contract("pgd input must lie in [0,1]".into()));
    }
    if cfg.eps == 0.0 {
        return Ok(PgdResult {
            x_adv: Tensor::from_vec(base, &shape)?,
            objective: vec![0.0; cfg.steps + 1],
        });
    }
    let clean = embed_fn(&Tensor::from_vec(base.clone(), &shape)?)?.detach();

    let mut r = rng::stream(seed, "pgd", 0);
    let mut adv: Vec<f64> = base
        .iter()
        .map(|&v| exact_project(v + r.gen_range(-cfg.eps..=cfg.eps), v, cfg.eps))
        .collect();

    let objective_of = |data: Vec<f64>| -> Result<(Tensor, Tensor)> {
        let xv = Tensor::param(data, &shape)?;
        let e = embed_fn(&xv)?;
        let loss = e.sub(&clean)?.square()?.sum()?;
        Ok((xv, loss))
    };

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let step = cfg.step_size();
    for _ in 0..cfg.steps {
        let (xv, loss) = objective_of(adv.clone())?;
        trace.push(loss.item());
        loss.backward()?;
        let g = xv.grad_vec();
        for (i, v) in adv.iter_mut().enumerate() {
            *v = exact_project(*v + step * g[i].signum(), base[i], cfg.eps);
        }
    }
    let (_, final_loss) = objective_of(adv.clone())?;
    trace.push(final_loss.item());
    Ok(PgdResult {
        x_adv: Tensor::from_vec(adv, &shape)?,
        objective: trace,
    })
}

/// Trainable copy of the frozen mixing layer; the rest of the encoder
/// stays fixed.
pub struct ClipTuner {
    pub mixing: MixingLayer,
}

impl ClipTuner {
    pub fn new(stack: &OcrtStack) -> Result<ClipTuner> {
        Ok(ClipTuner {
            mixing: stack.encoder.mixing.trainable_copy()?,
        })
    }

    pub fn params(&self) -> ParamList<f64> {
        prefixed("clip.mixing", self.mixing.params())
    }
}

/// Embedding of `image` with relation tokens appended, through the
/// tuner's trainable mixing layer.
pub fn adapted_embed(
    stack: &OcrtStack,
    tuner: &ClipTuner,
    image: &Tensor,
    t_rel: &Tensor,
) -> Result<Tensor> {
    stack.encoder.embed_with_tokens(image, t_rel, &tuner.mixing)
}

/// Frozen target embedding: same token stream, original mixing weights.
pub fn frozen_embed(stack: &OcrtStack, image: &Tensor, t_rel: &Tensor) -> Result<Tensor> {
    stack
        .encoder
        .embed_with_tokens(image, &t_rel.detach(), &stack.encoder.mixing)
}

/// One adversarial fine-tuning step on a single image: attack the
/// current embedding, then minimize the squared distance between the
/// perturbed-input embedding and the frozen clean target.
pub fn clip_toy_step(
    stack: &OcrtStack,
    tuner: &ClipTuner,
    optimizer: &mut Adam<f64>,
    trainable: &ParamList<f64>,
    image: &Tensor,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<LossReport> {
    let enc = stack.encode_scene(image, rng::derive(seed, "clip-enc", 0), true)?;
    let t_rel_frozen = enc.t_rel.detach();

    let target = frozen_embed(stack, image, &t_rel_frozen)?.detach();

    let embed = |x: &Tensor| adapted_embed(stack, tuner, x, &t_rel_frozen);
    let attack = pgd_attack(image, &embed, cfg, rng::derive(seed, "clip-attack", 0))?;

    let adv_embed = adapted_embed(stack, tuner, &attack.x_adv, &enc.t_rel)?;
    let clean_embed = adapted_embed(stack, tuner, image, &enc.t_rel)?;
    let clip_adv = adv_embed.sub(&target)?.square()?.sum()?;
    let clip_clean = clean_embed.sub(&target)?.square()?.sum()?;

    let mut report = LossReport::default();
    report.record("clip_adv", clip_adv.item())?;
    report.record("clip_clean", clip_clean.item())?;

    clip_adv.add(&clip_clean)?.backward()?;
    optimizer.step(trainable)?;
    Ok(report)
}

/// Mean clean/adversarial embedding distances of the tuned model to the
/// frozen targets over a set of images.
pub fn embedding_distances(
    stack: &OcrtStack,
    tuner: &ClipTuner,
    images: &[Tensor],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut clean_total = 0.0;
    let mut adv_total = 0.0;
    for (i, image) in images.iter().enumerate() {
        let s = rng::derive(seed, "dist", i as u64);
        let enc = stack.encode_scene(image, s, true)?;
        let t_rel = enc.t_rel.detach();
        let target = frozen_embed(stack, image, &t_rel)?.detach();
        let embed = |x: &Tensor| adapted_embed(stack, tuner, x, &t_rel);
        let attack = pgd_attack(image, &embed, cfg, s)?;
        let clean = crate::eval::embedding_distance(&embed(image)?.detach(), &target)?;
        let adv = crate::eval::embedding_distance(&embed(&attack.x_adv)?.detach(), &target)?;
        clean_total += clean;
        adv_total += adv;
    }
    let n = images.len().max(1) as f64;
    Ok((clean_total / n, adv_total / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scene::{generate_scene, SceneSpec};

    fn small_stack() -> OcrtStack {
        let mut cfg = RunConfig::default();
        cfg.size = 16;
        cfg.k = 3;
        cfg.k_tilde = 3;
        cfg.d_z = 8;
        cfg.d_o = 8;
        // relation tokens ride in the encoder token stream, so d_r = d_o
        cfg.d_r = 8;
        cfg.n_r = 2;
        OcrtStack::new(&cfg).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        generate_scene(
            &SceneSpec {
                size: 16,
                min_objects: 1,
                max_objects: 2,
                background_noise: 0.02,
            },
            seed,
        )
        .unwrap()
        .image_tensor()
    }

    #[test]
    fn zero_eps_returns_input() {
        let stack = small_stack();
        let img = image(0);
        let cfg = AttackConfig::new(0.0, 10).unwrap();
        let embed = |x: &Tensor| stack.encoder.embed(x);
        let out = pgd_attack(&img, &embed, &cfg, 0).unwrap();
        assert_eq!(out.x_adv.to_vec(), img.to_vec());
    }

    #[test]
    fn ball_and_range_constraints_hold_exactly() {
        let stack = small_stack();
        let cfg = AttackConfig::new(4.0 / 255.0, 10).unwrap();
        let embed = |x: &Tensor| stack.encoder.embed(x);
        for seed in 0..5u64 {
            let img = image(seed);
            let out = pgd_attack(&img, &embed, &cfg, seed).unwrap();
            for (a, b) in out.x_adv.to_vec().iter().zip(img.to_vec()) {
                assert!((a - b).abs() <= cfg.eps, "|{a} - {b}| > eps");
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn attack_increases_objective() {
        let stack = small_stack();
        let cfg = AttackConfig::new(4.0 / 255.0, 10).unwrap();
        let embed = |x: &Tensor| stack.encoder.embed(x);
        let img = image(3);
        let out = pgd_attack(&img, &embed, &cfg, 1).unwrap();
        assert_eq!(out.objective.len(), 11);
        assert!(out.objective.last().unwrap() > &0.0);
        assert!(out.objective.last().unwrap() >= &out.objective[0]);
    }

    #[test]
    fn untouched_parameters_give_zero_loss_on_clean_input() {
        let stack = small_stack();
        let tuner = ClipTuner::new(&stack).unwrap();
        let img = image(4);
        let enc = stack.encode_scene(&img, 0, true).unwrap();
        let t_rel = enc.t_rel.detach();
        let target = frozen_embed(&stack, &img, &t_rel).unwrap();
        let ours = adapted_embed(&stack, &tuner, &img, &t_rel).unwrap();
        let gap = ours.sub(&target).unwrap().square().unwrap().sum().unwrap().item();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn step_trains_mixing_and_graph_only() {
        let stack = small_stack();
        let tuner = ClipTuner::new(&stack).unwrap();
        let mut trainable = tuner.params();
        trainable.extend(stack.graph.params());
        let mut opt = Adam::new(&trainable, 1e-3, 0.0);
        let img = image(5);
        let cfg = AttackConfig::new(4.0 / 255.0, 3).unwrap();
        let before = tuner.mixing.wq.weight.to_vec();
        let ocl_before: Vec<Vec<f64>> = stack.ocl_params().iter().map(|(_, t)| t.to_vec()).collect();
        let report = clip_toy_step(&stack, &tuner, &mut opt, &trainable, &img, &cfg, 9).unwrap();
        assert!(report.get("clip_adv").unwrap() > 0.0);
        assert_ne!(tuner.mixing.wq.weight.to_vec(), before);
        for ((_, t), b) in stack.ocl_params().iter().zip(ocl_before) {
            assert_eq!(t.to_vec(), b);
        }
    }
}
