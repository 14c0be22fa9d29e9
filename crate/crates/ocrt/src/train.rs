//! Phase orchestration: the object-centric and relational pretraining
//! schedules, both fine-tuning harnesses, evaluation, and artifact
//! inspection, with resumable directory checkpoints.
//!
//! Checkpoint layout under `<out>/<phase>/`:
//!   config.txt        resolved run configuration
//!   meta.txt          phase=…, step=…, total=… (+ harness extras)
//!   params/<name>.tns every pipeline parameter plus phase-owned heads
//!   opt/<name>.{m,v}.tns and opt/steps.txt   Adam state
//!
//! Every per-step random decision is derived from (config seed, phase
//! tag, absolute step index), so resuming from a checkpoint replays the
//! uninterrupted trajectory exactly.


use std::path::{Path, PathBuf};

use crate::binding::attention_rows;
use crate::clip::{clip_toy_step, embedding_distances, AttackConfig, ClipTuner};
use crate::config::RunConfig;
use crate::error::{OcrtError, Result};
use crate::eval::{labels_match_iou, slot_match_iou};
use crate::graph::{build_neighborhoods, degree_budget, Mode};
use crate::io;
use crate::losses::LossReport;
use crate::nn::{prefixed, Linear, ParamList};
use crate::optim::Adam;
use crate::pipeline::{avgpool_2x2, OcrtStack};
use crate::rng;
use crate::sam::{head_miou, sam_toy_step, SegHead, TripleModel};
use crate::scene::{load_dataset, PromptKind, SyntheticScene};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Ocl,
    Relation,
    Sam,
    Clip,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "ocl" => Ok(Phase::Ocl),
            "relation" => Ok(Phase::Relation),
            "sam" => Ok(Phase::Sam),
            "clip" => Ok(Phase::Clip),
            other => Err(OcrtError::Contract(format!(
                "unknown phase `{other}`; expected ocl, relation, sam or clip"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Ocl => "ocl",
            Phase::Relation => "relation",
            Phase::Sam => "sam",
            Phase::Clip => "clip",
        }
    }
}

pub fn phase_dir(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(phase.name())
}

// ── checkpoint plumbing ─────────────────────────────────────────────

fn write_params(dir: &Path, params: &ParamList<f64>) -> Result<()> {
    for (name, t) in params {
        io::write_tensor(&dir.join(format!("{name}.tns")), t.shape(), &t.to_vec())?;
    }
    Ok(())
}

fn read_params_into(dir: &Path, params: &ParamList<f64>) -> Result<()> {
    for (name, t) in params {
        let (shape, data) = io::read_tensor(&dir.join(format!("{name}.tns")))?;
        if shape != t.shape() {
            return Err(OcrtError::Checkpoint(format!(
                "parameter {name}: checkpoint shape {shape:?} does not match model shape {:?}",
                t.shape()
            )));
        }
        t.set_data(data)?;
    }
    Ok(())
}

fn write_opt(dir: &Path, opt: &Adam<f64>, trainable: &ParamList<f64>) -> Result<()> {
    let mut steps = String::new();
    for ((name, _), st) in trainable.iter().zip(&opt.states) {
        io::write_tensor(&dir.join(format!("{name}.m.tns")), &[st.m.len()], &st.m)?;
        io::write_tensor(&dir.join(format!("{name}.v.tns")), &[st.v.len()], &st.v)?;
        steps.push_str(&format!("{name}={}\n", st.step));
    }
    io::write_text(&dir.join("steps.txt"), &steps)
}

fn read_opt(dir: &Path, opt: &mut Adam<f64>, trainable: &ParamList<f64>) -> Result<()> {
    let steps_text = io::read_text(&dir.join("steps.txt"))?;
    let mut steps = std::collections::HashMap::new();
    for line in steps_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let n: u64 = v
                .parse()
                .map_err(|_| OcrtError::Checkpoint(format!("bad optimizer step line: {line}")))?;
            steps.insert(k.to_string(), n);
        }
    }
    for ((name, _), st) in trainable.iter().zip(opt.states.iter_mut()) {
        let (_, m) = io::read_tensor(&dir.join(format!("{name}.m.tns")))?;
        let (_, v) = io::read_tensor(&dir.join(format!("{name}.v.tns")))?;
        if m.len() != st.m.len() || v.len() != st.v.len() {
            return Err(OcrtError::Checkpoint(format!(
                "optimizer state for {name} has the wrong length"
            )));
        }
        st.m = m;
        st.v = v;
        st.step = *steps
            .get(name)
            .ok_or_else(|| OcrtError::Checkpoint(format!("missing optimizer step for {name}")))?;
    }
    Ok(())
}

fn parse_meta(text: &str) -> std::collections::HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

struct Checkpointer<'a> {
    dir: PathBuf,
    cfg: &'a RunConfig,
    phase: Phase,
    total: usize,
}

impl Checkpointer<'_> {
    fn save(
        &self,
        step: usize,
        save_set: &ParamList<f64>,
        opt: &Adam<f64>,
        trainable: &ParamList<f64>,
        extra_meta: &[(String, String)],
    ) -> Result<()> {
        io::write_text(&self.dir.join("config.txt"), &self.cfg.serialize())?;
        let mut meta = format!("phase={}\nstep={step}\ntotal={}\n", self.phase.name(), self.total);
        for (k, v) in extra_meta {
            meta.push_str(&format!("{k}={v}\n"));
        }
        io::write_text(&self.dir.join("meta.txt"), &meta)?;
        write_params(&self.dir.join("params"), save_set)?;
        write_opt(&self.dir.join("opt"), opt, trainable)
    }

    /// Restore a mid-phase checkpoint; returns the step to resume from
    /// and the extra metadata lines.
    fn restore(
        &self,
        save_set: &ParamList<f64>,
        opt: &mut Adam<f64>,
        trainable: &ParamList<f64>,
    ) -> Result<(usize, std::collections::HashMap<String, String>)> {
        let stored = RunConfig::parse(&io::read_text(&self.dir.join("config.txt"))?)?;
        if !schedule_compatible(&stored, self.cfg) {
            return Err(OcrtError::Checkpoint(format!(
                "checkpoint in {} was produced by an incompatible configuration",
                self.dir.display()
            )));
        }
        let meta = parse_meta(&io::read_text(&self.dir.join("meta.txt"))?);
        if meta.get("phase").map(String::as_str) != Some(self.phase.name()) {
            return Err(OcrtError::Checkpoint(format!(
                "checkpoint in {} belongs to a different phase",
                self.dir.display()
            )));
        }
        let step: usize = meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| OcrtError::Checkpoint("meta.txt is missing a step count".into()))?;
        read_params_into(&self.dir.join("params"), save_set)?;
        read_opt(&self.dir.join("opt"), opt, trainable)?;
        Ok((step, meta))
    }
}

/// Two configurations describe the same run if everything except the
/// phase lengths (which a resume may legitimately extend) agrees.
fn schedule_compatible(a: &RunConfig, b: &RunConfig) -> bool {
    let skip = ["epochs_ocl", "epochs_relation", "steps_sam", "steps_clip"];
    crate::config::KEYS
        .iter()
        .filter(|k| !skip.contains(k))
        .all(|k| a.get(k) == b.get(k))
}

fn require_checkpoint(out_dir: &Path, needed: Phase, phase: Phase) -> Result<()> {
    if !phase_dir(out_dir, needed).join("meta.txt").exists() {
        return Err(OcrtError::PhaseOrdering {
            phase: phase.name().to_string(),
            needs: needed.name().to_string(),
        });
    }
    Ok(())
}

fn load_stack_from(out_dir: &Path, source: Phase, phase: Phase, stack: &OcrtStack) -> Result<()> {
    require_checkpoint(out_dir, source, phase)?;
    read_params_into(&phase_dir(out_dir, source).join("params"), &stack.all_params())
}

/// Load a phase checkpoint's stack parameters into `stack` (extra
/// phase-owned heads in the checkpoint are ignored).
pub fn load_phase_params(out_dir: &Path, phase: Phase, stack: &OcrtStack) -> Result<()> {
    read_params_into(&phase_dir(out_dir, phase).join("params"), &stack.all_params())
}

// ── phase objectives ────────────────────────────────────────────────

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.sub(b)?.square()?.mean()
}

/// Auxiliary readout used only by the relation phase: it maps relation
/// tokens back into slot space so the graph output stays coupled to
/// the slots it summarizes.
struct RelationAux {
    readout: Linear<f64>,
}

impl RelationAux {
    fn new(cfg: &RunConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "relation-aux", 0);
        RelationAux {
            readout: Linear::new(cfg.d_r, cfg.d_o, true, &mut r),
        }
    }

    fn params(&self) -> ParamList<f64> {
        prefixed("aux.readout", self.readout.params())
    }
}

/// One relation-phase step: pull the fused fine features back toward
/// the semantic grid (grounding the fusion taps) and the pooled
/// relation-token readout toward the pooled slots (grounding the
/// graph), all with perception frozen.
fn relation_step(
    stack: &OcrtStack,
    aux: &RelationAux,
    opt: &mut Adam<f64>,
    trainable: &ParamList<f64>,
    image: &Tensor,
    seed: u64,
) -> Result<LossReport> {
    let feats = stack.encoder.encode(image)?;
    let enc = stack.encode_scene(image, seed, true)?;
    let fuse = mse(&avgpool_2x2(&enc.z_obj)?, &feats.z.detach())?;
    let pooled_slots = enc.slots.detach().mean_axis(0)?;
    let readout = aux.readout.forward(&enc.t_rel)?.mean_axis(0)?;
    let rel = mse(&readout, &pooled_slots)?;
    let mut report = LossReport::default();
    report.record("fuse", fuse.item())?;
    report.record("rel", rel.item())?;
    fuse.add(&rel)?.backward()?;
    opt.step(trainable)?;
    Ok(report)
}

// ── the train command ───────────────────────────────────────────────

/// Run (or resume) one training phase against a generated dataset and
/// leave a checkpoint in `<out>/<phase>/`. Returns the loss reports of
/// the steps executed by this call.
/// Weight of the attention-diversity term in the object-centric phase.
const CLUSTER_TIGHTNESS_WEIGHT: f64 = 0.2;
/// Weight of the mask/attention consistency term. Heavy on purpose:
/// the alpha head must recover each slot's spatial extent from the
/// faint positional trace in the slot vector, and at small weights the
/// masks settle into a near-uniform single-slot bias long before that
/// signal is amplified.
const CONSISTENCY_WEIGHT: f64 = 10.0;

/// Soft k-means tightness of an assignment matrix over the encoder
/// features: the mean squared distance from each location's feature to
/// the centroid of the cluster it is assigned to, weighted by the
/// assignment.
///
/// Pure reconstruction admits a shortcut where the alpha head ignores
/// the slots entirely — exactly uniform masks with one global scene
/// code per slot — and decomposition never emerges. Entropy-style
/// regularizers do not fix this: sharpening alone has a winner-take-all
/// optimum, and adding a usage-balance term forces every slot to an
/// equal share, which shreds the (large) background. Tightness has
/// neither failure mode: uniform assignments and winner-take-all both
/// score the global feature variance, while partitioning locations by
/// feature similarity — in these scenes, by object — is the minimizer.
fn cluster_tightness(m: &Tensor, z: &Tensor) -> Result<Tensor> {
    let zd = z.detach();
    let n = m.shape()[0] as f64;
    let counts = m.sum_axis(0)?;
    let sums = m.transpose()?.matmul(&zd)?;
    let centroids = sums.div(&counts.transpose()?.add_scalar(1e-9)?)?;
    let znorm = zd.square()?.sum_axis(1)?;
    let cnorm = centroids.square()?.sum_axis(1)?.transpose()?;
    let cross = zd.matmul(&centroids.transpose()?)?;
    let d2 = znorm.add(&cnorm)?.sub(&cross.mul_scalar(2.0)?)?.clamp(0.0, f64::INFINITY)?;
    m.mul(&d2)?.sum()?.mul_scalar(1.0 / n)
}

/// Per-location KL(rows ‖ masks), with the attention rows detached so
/// the decoder masks chase the attention partition and not the other
/// way round. KL rather than MSE: a squared-error pull is too weak to
/// move a mask that has saturated on the wrong slot, and in practice
/// the decoder drifts into a one-slot assignment even while the
/// attention is cleanly object-aligned; the cross-entropy gradient is
/// largest exactly where the mask contradicts a confident row.
fn mask_consistency(masks: &Tensor, rows: &Tensor) -> Result<Tensor> {
    let eps = 1e-9;
    let r = rows.detach().add_scalar(eps)?;
    let m = masks.add_scalar(eps)?;
    r.mul(&r.ln()?.sub(&m.ln()?)?)?.sum_axis(1)?.mean()
}

pub fn run_train(
    cfg: &RunConfig,
    data_dir: &Path,
    phase: Phase,
    out_dir: &Path,
    log: &mut dyn std::io::Write,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    let scenes = load_dataset(data_dir)?;
    if scenes.is_empty() {
        return Err(OcrtError::Contract("training requires a non-empty dataset".into()));
    }
    let n = scenes.len();
    let stack = OcrtStack::new(cfg)?;
    let dir = phase_dir(out_dir, phase);
    let resuming = dir.join("meta.txt").exists();
    if !resuming {
        match phase {
            Phase::Ocl => {}
            Phase::Relation => load_stack_from(out_dir, Phase::Ocl, phase, &stack)?,
            Phase::Sam | Phase::Clip => {
                require_checkpoint(out_dir, Phase::Ocl, phase)?;
                load_stack_from(out_dir, Phase::Relation, phase, &stack)?;
            }
        }
    }

    let images: Vec<Tensor> = scenes.iter().map(SyntheticScene::image_tensor).collect();
    let mut reports = Vec::new();

    match phase {
        Phase::Ocl => {
            let steps_per_epoch = n.div_ceil(cfg.batch);
            let total = cfg.epochs_ocl * steps_per_epoch;
            let trainable = stack.ocl_params();
            let mut opt = Adam::new(&trainable, cfg.lr, cfg.weight_decay);
            let ckpt = Checkpointer { dir, cfg, phase, total };
            let start = if resuming {
                ckpt.restore(&save_set_ocl(&stack), &mut opt, &trainable)?.0
            } else {
                0
            };
            for step in start..total {
                let mut rec_acc: Option<Tensor> = None;
                let mut tight_acc: Option<Tensor> = None;
                let mut cons_acc: Option<Tensor> = None;
                let push = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
                    *slot = Some(match slot.take() {
                        Some(a) => a.add(&t)?,
                        None => t,
                    });
                    Ok(())
                };
                for j in step * cfg.batch..(step + 1) * cfg.batch {
                    let idx = j % n;
                    let p = stack.perceive(&images[idx], rng::derive(cfg.seed, "ocl-step", j as u64))?;
                    let rows = attention_rows(&p.slots, &p.features.z, &stack.binding)?;
                    let tight = cluster_tightness(&rows, &p.features.z)?;
                    let cons = mask_consistency(&p.masks, &rows)?;
                    // Blend the per-slot reconstructions under detached
                    // masks: reconstruction error must not reshape the
                    // masks (blending everything through one slot is
                    // rec-cheaper until every slot's patch is trained,
                    // so the rec gradient fights decomposition); mask
                    // shape is owned by the consistency term alone.
                    let z_hat = reconstruct(&p.slot_feats, &p.masks.detach())?;
                    let rec = rec_loss(&z_hat, &p.features.z)?;
                    push(&mut rec_acc, rec)?;
                    push(&mut tight_acc, tight)?;
                    push(&mut cons_acc, cons)?;
                }
                let scale = 1.0 / cfg.batch as f64;
                let rec = rec_acc.expect("batch >= 1").mul_scalar(scale)?;
                let tight = tight_acc.expect("batch >= 1").mul_scalar(scale)?;
                let cons = cons_acc.expect("batch >= 1").mul_scalar(scale)?;
                let mut report = LossReport::default();
                report.record("rec", rec.item())?;
                report.record("tight", tight.item())?;
                report.record("cons", cons.item())?;
                let loss = rec
                    .add(&tight.mul_scalar(CLUSTER_TIGHTNESS_WEIGHT)?)?
                    .add(&cons.mul_scalar(CONSISTENCY_WEIGHT)?)?;
                loss.backward()?;
                opt.step(&trainable)?;
                writeln!(log, "{}", report.line(step)).map_err(|e| OcrtError::io("<log>", e))?;
                reports.push(report);
            }
            ckpt.save(total, &save_set_ocl(&stack), &opt, &trainable, &[])?;
        }
        Phase::Relation => {
            let total = cfg.epochs_relation * n;
            let aux = RelationAux::new(cfg);
            let mut trainable = stack.relation_params();
            trainable.extend(aux.params());
            let mut opt = Adam::new(&trainable, cfg.lr, cfg.weight_decay);
            let mut save_set = stack.all_params();
            save_set.extend(aux.params());
            let ckpt = Checkpointer { dir, cfg, phase, total };
            let start = if resuming {
                ckpt.restore(&save_set, &mut opt, &trainable)?.0
            } else {
                0
            };
            for step in start..total {
                let report = relation_step(
                    &stack,
                    &aux,
                    &mut opt,
                    &trainable,
                    &images[step % n],
                    rng::derive(cfg.seed, "relation-step", step as u64),
                )?;
                writeln!(log, "{}", report.line(step)).map_err(|e| OcrtError::io("<log>", e))?;
                reports.push(report);
            }
            ckpt.save(total, &save_set, &opt, &trainable, &[])?;
        }
        Phase::Sam => {
            let total = cfg.steps_sam;
            let mut triple =
                TripleModel::new(cfg.d_z, cfg.d_r, &mut rng::stream(cfg.seed, "sam-head", 0));
            let mut trainable = prefixed("head.student", triple.student.params());
            trainable.extend(stack.relation_params());
            let mut opt = Adam::new(&trainable, cfg.lr, cfg.weight_decay);
            let mut save_set = stack.all_params();
            save_set.extend(prefixed("head.student", triple.student.params()));
            save_set.extend(prefixed("head.anchor", triple.anchor.params()));
            save_set.extend(prefixed("head.teacher", triple.teacher.params()));
            let ckpt = Checkpointer { dir, cfg, phase, total };
            let start = if resuming {
                let (step, meta) = ckpt.restore(&save_set, &mut opt, &trainable)?;
                triple.best_iou = match meta.get("best_iou").map(String::as_str) {
                    Some("none") | None => None,
                    Some(bits) => Some(f64::from_bits(bits.parse().map_err(|_| {
                        OcrtError::Checkpoint("unreadable best_iou in meta.txt".into())
                    })?)),
                };
                step
            } else {
                0
            };
            let val = &scenes[..n.min(8)];
            for step in start..total {
                let report = sam_toy_step(
                    &stack,
                    &triple,
                    &mut opt,
                    &trainable,
                    &scenes[step % n],
                    PromptKind::Box,
                    rng::derive(cfg.seed, "sam-step", step as u64),
                )?;
                writeln!(log, "{}", report.line(step)).map_err(|e| OcrtError::io("<log>", e))?;
                reports.push(report);
                // End of an epoch (one pass over the dataset) or of the
                // run: validate and maybe bootstrap the anchor.
                if (step + 1) % n == 0 || step + 1 == total {
                    let miou = head_miou(
                        &stack,
                        &triple.student,
                        val,
                        PromptKind::Box,
                        rng::derive(cfg.seed, "sam-val", (step + 1) as u64),
                    )?;
                    triple.bootstrap_copy(miou);
                }
            }
            let best = match triple.best_iou {
                Some(v) => v.to_bits().to_string(),
                None => "none".to_string(),
            };
            ckpt.save(total, &save_set, &opt, &trainable, &[("best_iou".to_string(), best)])?;
        }
        Phase::Clip => {
            let total = cfg.steps_clip;
            let tuner = ClipTuner::new(&stack)?;
            let mut trainable = tuner.params();
            trainable.extend(stack.graph.params());
            let mut opt = Adam::new(&trainable, cfg.lr, cfg.weight_decay);
            let mut save_set = stack.all_params();
            save_set.extend(tuner.params());
            let ckpt = Checkpointer { dir, cfg, phase, total };
            let start = if resuming {
                ckpt.restore(&save_set, &mut opt, &trainable)?.0
            } else {
                0
            };
            let attack = AttackConfig::new(cfg.eps, cfg.pgd_steps)?;
            for step in start..total {
                let report = clip_toy_step(
                    &stack,
                    &tuner,
                    &mut opt,
                    &trainable,
                    &images[step % n],
                    &attack,
                    rng::derive(cfg.seed, "clip-step", step as u64),
                )?;
                writeln!(log, "{}", report.line(step)).map_err(|e| OcrtError::io("<log>", e))?;
                reports.push(report);
            }
            ckpt.save(total, &save_set, &opt, &trainable, &[])?;
        }
    }
    Ok(reports)
}

/// The ocl checkpoint still records the whole stack so later phases
/// can load it wholesale.
fn save_set_ocl(stack: &OcrtStack) -> ParamList<f64> {
    stack.all_params()
}

// ── the eval command ────────────────────────────────────────────────

/// Load a checkpoint, score it on a dataset, and return the metrics as
/// JSON text with a stable key order. With `debug_gt` the slot metric
/// is computed from the ground-truth segments themselves (an oracle
/// upper bound used to validate the scoring path).
pub fn run_eval(checkpoint: &Path, data_dir: &Path, debug_gt: bool) -> Result<String> {
    let cfg = RunConfig::parse(&io::read_text(&checkpoint.join("config.txt"))?)?;
    let stack = OcrtStack::new(&cfg)?;
    read_params_into(&checkpoint.join("params"), &stack.all_params())?;
    let scenes = load_dataset(data_dir)?;
    if scenes.is_empty() {
        return Ok("{\n  \"count\": 0\n}\n".to_string());
    }

    let mut slot_total = 0.0;
    for (i, scene) in scenes.iter().enumerate() {
        slot_total += if debug_gt {
            let labels = gt_labels(scene);
            labels_match_iou(&labels, scene.masks.len() + 1, scene)?
        } else {
            let p = stack.perceive(&scene.image_tensor(), rng::derive(cfg.seed, "eval-slot", i as u64))?;
            slot_match_iou(&p.masks, scene)?
        };
    }
    let slot_iou = slot_total / scenes.len() as f64;

    // Segmentation head: the sam-phase student if the checkpoint has
    // one, otherwise the untrained head from the same initialization.
    let head = {
        let h = SegHead::new(cfg.d_z, cfg.d_r, &mut rng::stream(cfg.seed, "sam-head", 0));
        let named = prefixed("head.student", h.params());
        if checkpoint.join("params/head.student.l1.weight.tns").exists() {
            read_params_into(&checkpoint.join("params"), &named)?;
        }
        h
    };
    let mut seg = Vec::new();
    for kind in [PromptKind::Box, PromptKind::Point, PromptKind::Poly] {
        seg.push(head_miou(&stack, &head, &scenes, kind, rng::derive(cfg.seed, "eval-seg", 0))?);
    }

    // Embedding distances: the tuned mixing layer if present, else the
    // frozen copy (clean distance is then exactly zero).
    let tuner = {
        let t = ClipTuner::new(&stack)?;
        if checkpoint.join("params/clip.mixing.wq.weight.tns").exists() {
            read_params_into(&checkpoint.join("params"), &t.params())?;
        }
        t
    };
    let probe: Vec<Tensor> = scenes
        .iter()
        .take(8)
        .map(SyntheticScene::image_tensor)
        .collect();
    let attack = AttackConfig::new(cfg.eps, cfg.pgd_steps)?;
    let (clean, adv) =
        embedding_distances(&stack, &tuner, &probe, &attack, rng::derive(cfg.seed, "eval-clip", 0))?;

    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"count\": {},\n", scenes.len()));
    out.push_str(&format!("  \"slot_iou\": {slot_iou:.6},\n"));
    out.push_str(&format!("  \"seg_iou_box\": {:.6},\n", seg[0]));
    out.push_str(&format!("  \"seg_iou_points\": {:.6},\n", seg[1]));
    out.push_str(&format!("  \"seg_iou_poly\": {:.6},\n", seg[2]));
    out.push_str(&format!("  \"embed_clean\": {clean:.6},\n"));
    out.push_str(&format!("  \"embed_adv\": {adv:.6}\n"));
    out.push_str("}\n");
    Ok(out)
}

/// Per-pixel ground-truth labels: object index, background last.
fn gt_labels(scene: &SyntheticScene) -> Vec<usize> {
    let bg = scene.masks.len();
    (0..scene.pixels())
        .map(|p| {
            scene
                .masks
                .iter()
                .position(|m| m[p] >= 0.5)
                .unwrap_or(bg)
        })
        .collect()
}

// ── the inspect command ─────────────────────────────────────────────

/// Largest-remainder quantization of a probability row onto 0..=255 so
/// the bytes of one pixel across all slot images sum to exactly 255.
fn quantize_row(vals: &[f64]) -> Vec<u8> {
    let scaled: Vec<f64> = vals.iter().map(|v| 255.0 * v.clamp(0.0, 1.0)).collect();
    let mut out: Vec<u8> = scaled.iter().map(|v| v.floor() as u8).collect();
    let mut short = 255i32 - out.iter().map(|&b| i32::from(b)).sum::<i32>();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| {
        (scaled[b] - scaled[b].floor())
            .partial_cmp(&(scaled[a] - scaled[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(short.max(0) as usize) {
        out[i] = out[i].saturating_add(1);
        short -= 1;
        if short == 0 {
            break;
        }
    }
    out
}

/// Write per-slot mask and attention images, the importance/selection
/// and adjacency summaries, and the relation-token dump for one scene.
pub fn run_inspect(checkpoint: &Path, data_dir: &Path, index: usize, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::parse(&io::read_text(&checkpoint.join("config.txt"))?)?;
    let stack = OcrtStack::new(&cfg)?;
    read_params_into(&checkpoint.join("params"), &stack.all_params())?;
    let scenes = load_dataset(data_dir)?;
    if index >= scenes.len() {
        return Err(OcrtError::Contract(format!(
            "scene index {index} out of range for a dataset of {}",
            scenes.len()
        )));
    }
    let image = scenes[index].image_tensor();
    let seed = rng::derive(cfg.seed, "inspect", index as u64);
    let p = stack.perceive(&image, seed)?;
    let enc = stack.encode_scene(&image, seed, true)?;

    let (n, k) = (p.masks.shape()[0], p.masks.shape()[1]);
    let side = (n as f64).sqrt().round() as usize;
    let masks = p.masks.to_vec();
    let mut slot_bytes = vec![vec![0u8; n]; k];
    for loc in 0..n {
        let q = quantize_row(&masks[loc * k..(loc + 1) * k]);
        for s in 0..k {
            slot_bytes[s][loc] = q[s];
        }
    }
    for (s, bytes) in slot_bytes.iter().enumerate() {
        io::write_pgm(&out_dir.join(format!("mask_{s}.pgm")), side, side, bytes)?;
    }
    let attn = p.attn.to_vec();
    for s in 0..k {
        let col: Vec<f64> = (0..n).map(|loc| attn[loc * k + s]).collect();
        io::write_pgm(
            &out_dir.join(format!("attn_{s}.pgm")),
            side,
            side,
            &io::to_gray_bytes(&col),
        )?;
    }

    let mut text = String::from("omega:");
    for w in &enc.omega {
        text.push_str(&format!(" {w}"));
    }
    text.push_str("\nselected:");
    for s in &enc.selected {
        text.push_str(&format!(" {s}"));
    }
    text.push('\n');
    io::write_text(&out_dir.join("omega.txt"), &text)?;

    let deg = degree_budget(&enc.omega, cfg.resolved_max_degree())?;
    let adj = build_neighborhoods(&enc.slots, &deg, Mode::Global, seed)?;
    let mut adj_text = String::new();
    for (node, neighbors) in adj.iter().enumerate() {
        adj_text.push_str(&format!("{node}:"));
        for nb in neighbors {
            adj_text.push_str(&format!(" {nb}"));
        }
        adj_text.push('\n');
    }
    io::write_text(&out_dir.join("adjacency.txt"), &adj_text)?;

    io::write_tensor(&out_dir.join("t_rel.tns"), enc.t_rel.shape(), &enc.t_rel.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{save_dataset, SceneSpec};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.size = 16;
        cfg.k = 3;
        cfg.k_tilde = 3;
        cfg.d_z = 8;
        cfg.d_o = 8;
        cfg.d_r = 8;
        cfg.n_r = 2;
        cfg.t = 2;
        cfg.batch = 2;
        cfg.count = 4;
        cfg.epochs_ocl = 1;
        cfg.epochs_relation = 1;
        cfg.steps_sam = 3;
        cfg.steps_clip = 2;
        cfg.pgd_steps = 2;
        cfg
    }

    fn tiny_dataset(dir: &Path, cfg: &RunConfig) {
        let spec = SceneSpec {
            size: cfg.size,
            min_objects: 1,
            max_objects: 1,
            background_noise: 0.02,
        };
        save_dataset(dir, &spec, cfg.count, cfg.seed).unwrap();
    }

    #[test]
    fn phase_names_round_trip() {
        for p in [Phase::Ocl, Phase::Relation, Phase::Sam, Phase::Clip] {
            assert_eq!(Phase::parse(p.name()).unwrap(), p);
        }
        assert!(Phase::parse("warmup").is_err());
    }

    #[test]
    fn rec_loss_strictly_decreases_over_fifty_steps() {
        let cfg = RunConfig::default();
        let spec = SceneSpec {
            size: cfg.size,
            min_objects: 2,
            max_objects: 3,
            background_noise: 0.02,
        };
        let scenes: Vec<_> = (0..2)
            .map(|i| crate::scene::generate_scene(&spec, rng::derive(cfg.seed, "rec-smoke", i)).unwrap())
            .collect();
        let images: Vec<Tensor> = scenes.iter().map(SyntheticScene::image_tensor).collect();
        let stack = OcrtStack::new(&cfg).unwrap();
        let trainable = stack.ocl_params();
        let mut opt = Adam::new(&trainable, cfg.lr, cfg.weight_decay);
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let mut acc: Option<Tensor> = None;
            for (i, image) in images.iter().enumerate() {
                let p = stack.perceive(image, rng::derive(cfg.seed, "rec-smoke-slot", i as u64)).unwrap();
                acc = Some(match acc {
                    Some(a) => a.add(&p.rec).unwrap(),
                    None => p.rec,
                });
            }
            let rec = acc.unwrap().mul_scalar(1.0 / images.len() as f64).unwrap();
            let value = rec.item();
            assert!(value < prev, "rec did not decrease at step {step}: {prev} -> {value}");
            prev = value;
            for (_, t) in &trainable {
                t.zero_grad();
            }
            rec.backward().unwrap();
            opt.step(&trainable).unwrap();
        }
    }

    #[test]
    fn relation_without_ocl_is_an_ordering_error() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let cfg = tiny_cfg();
        tiny_dataset(&data, &cfg);
        let err = run_train(&cfg, &data, Phase::Relation, &tmp.path().join("run"), &mut std::io::sink())
            .unwrap_err();
        assert!(matches!(err, OcrtError::PhaseOrdering { .. }), "{err}");
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let mut cfg = tiny_cfg();
        cfg.epochs_ocl = 0;
        tiny_dataset(&data, &cfg);
        run_train(&cfg, &data, Phase::Ocl, &tmp.path().join("run"), &mut std::io::sink()).unwrap();
        let fresh = OcrtStack::new(&cfg).unwrap();
        for (name, t) in fresh.all_params() {
            let (_, stored) =
                io::read_tensor(&tmp.path().join(format!("run/ocl/params/{name}.tns"))).unwrap();
            assert_eq!(stored, t.to_vec(), "{name} changed with zero epochs");
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let cfg = tiny_cfg();
        tiny_dataset(&data, &cfg);
        run_train(&cfg, &data, Phase::Ocl, &tmp.path().join("a"), &mut std::io::sink()).unwrap();
        run_train(&cfg, &data, Phase::Ocl, &tmp.path().join("b"), &mut std::io::sink()).unwrap();

        // Uninterrupted: 2 epochs of the relation phase in one call.
        let mut full_cfg = cfg.clone();
        full_cfg.epochs_relation = 2;
        let full = run_train(&full_cfg, &data, Phase::Relation, &tmp.path().join("a"), &mut std::io::sink())
            .unwrap();

        // Split: 1 epoch, checkpoint, then extend to 2.
        let half =
            run_train(&cfg, &data, Phase::Relation, &tmp.path().join("b"), &mut std::io::sink()).unwrap();
        let rest = run_train(&full_cfg, &data, Phase::Relation, &tmp.path().join("b"), &mut std::io::sink())
            .unwrap();
        assert_eq!(half.len() + rest.len(), full.len());
        for (a, b) in full.iter().zip(half.iter().chain(rest.iter())) {
            for name in ["fuse", "rel"] {
                let (x, y) = (a.get(name).unwrap(), b.get(name).unwrap());
                assert!((x - y).abs() <= 1e-10, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn eval_on_empty_dataset_reports_count_zero() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let cfg = tiny_cfg();
        save_dataset(&data, &SceneSpec::default(), 0, 0).unwrap();
        let run = tmp.path().join("run");
        let train_data = tmp.path().join("train");
        tiny_dataset(&train_data, &cfg);
        let mut zero = cfg.clone();
        zero.epochs_ocl = 0;
        run_train(&zero, &train_data, Phase::Ocl, &run, &mut std::io::sink()).unwrap();
        let json = run_eval(&run.join("ocl"), &data, false).unwrap();
        assert!(json.contains("\"count\": 0"));
    }

    #[test]
    fn debug_gt_eval_scores_one() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let mut cfg = tiny_cfg();
        cfg.count = 2;
        cfg.epochs_ocl = 0;
        tiny_dataset(&data, &cfg);
        let run = tmp.path().join("run");
        run_train(&cfg, &data, Phase::Ocl, &run, &mut std::io::sink()).unwrap();
        let json = run_eval(&run.join("ocl"), &data, true).unwrap();
        assert!(json.contains("\"slot_iou\": 1.000000"), "{json}");
    }

    #[test]
    fn inspect_writes_the_full_file_set_idempotently() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let mut cfg = tiny_cfg();
        cfg.epochs_ocl = 0;
        tiny_dataset(&data, &cfg);
        let run = tmp.path().join("run");
        run_train(&cfg, &data, Phase::Ocl, &run, &mut std::io::sink()).unwrap();

        let out = tmp.path().join("artifacts");
        run_inspect(&run.join("ocl"), &data, 1, &out).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 2 * cfg.k + 3, "{names:?}");
        let snapshot: Vec<Vec<u8>> = names
            .iter()
            .map(|f| std::fs::read(out.join(f)).unwrap())
            .collect();

        run_inspect(&run.join("ocl"), &data, 1, &out).unwrap();
        for (f, before) in names.iter().zip(snapshot) {
            assert_eq!(std::fs::read(out.join(f)).unwrap(), before, "{f} not idempotent");
        }

        // Quantized slot masks partition each pixel's 255 exactly.
        let side = cfg.size / 2;
        let header = format!("P5\n{side} {side}\n255\n").len();
        let mut sums = vec![0u32; side * side];
        for s in 0..cfg.k {
            let bytes = std::fs::read(out.join(format!("mask_{s}.pgm"))).unwrap();
            for (i, b) in bytes[header..].iter().enumerate() {
                sums[i] += u32::from(*b);
            }
        }
        assert!(sums.iter().all(|&v| v == 255), "mask quantization off");
    }

    #[test]
    fn sam_and_clip_phases_run_and_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let cfg = tiny_cfg();
        tiny_dataset(&data, &cfg);
        let run = tmp.path().join("run");
        run_train(&cfg, &data, Phase::Ocl, &run, &mut std::io::sink()).unwrap();
        run_train(&cfg, &data, Phase::Relation, &run, &mut std::io::sink()).unwrap();
        let sam = run_train(&cfg, &data, Phase::Sam, &run, &mut std::io::sink()).unwrap();
        assert_eq!(sam.len(), cfg.steps_sam);
        let clip = run_train(&cfg, &data, Phase::Clip, &run, &mut std::io::sink()).unwrap();
        assert_eq!(clip.len(), cfg.steps_clip);
        assert!(run.join("sam/params/head.student.l1.weight.tns").exists());
        assert!(run.join("clip/params/clip.mixing.wq.weight.tns").exists());
        let meta = parse_meta(&io::read_text(&run.join("sam/meta.txt")).unwrap());
        assert_eq!(meta.get("phase").map(String::as_str), Some("sam"));
        assert_ne!(meta.get("best_iou").map(String::as_str), Some("none"));
    }
}
