//! Training phases: supervised pre-training on the natural-image corpus, the
//! alternating MoCo / adaption schedule, and few-shot fine-tuning.

mod arms;
mod checkpoint;
mod config;

pub use arms::{initial_params, pre_finetune, run_arm, Arm, ArmData, ArmOutcome};
pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{Amt2Config, FinetuneConfig, OptimizerConfig, PretrainConfig, TrainConfig};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Amt2Plan, FewShotSplit, ImageSample, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::losses::{instance_loss_grad, l2sp_penalty_grad, LossBreakdown};
use crate::model::params::digest_values;
use crate::model::{prepare_input, Detector, DetectorParams, FeatureMap, Group};
use crate::moco::{moco_step, MoCoState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CocoPretrain,
    Moco,
    AnchorSnapshot,
    Adaption,
    Finetune,
    Checkpoint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::CocoPretrain => "coco_pretrain",
            Phase::Moco => "moco",
            Phase::AnchorSnapshot => "anchor_snapshot",
            Phase::Adaption => "adaption",
            Phase::Finetune => "finetune",
            Phase::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub phase: Phase,
    pub iter: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    /// Backbone digest after a MoCo step, or of the snapshot itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_digest: Option<String>,
    /// `‖backbone − w⁰‖₂` after an adaption step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_distance: Option<f64>,
}

impl TrainEvent {
    pub fn new(phase: Phase, iter: usize, step: usize, losses: LossBreakdown) -> Self {
        Self {
            phase,
            iter,
            step,
            losses,
            digest: None,
            anchor_digest: None,
            anchor_distance: None,
        }
    }
}

/// SGD with heavy-ball momentum over a fixed set of groups.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip: Option<f64>,
    groups: Vec<Group>,
    velocity: DetectorParams,
}

impl Sgd {
    pub fn new(template: &DetectorParams, lr: f64, opt: &OptimizerConfig, groups: &[Group]) -> Self {
        Self {
            lr,
            momentum: opt.momentum,
            clip: opt.grad_clip,
            groups: groups.to_vec(),
            velocity: template.zeros_like(),
        }
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// `v ← μv + g; p ← p − lr·v` on the optimizer's groups only.
    pub fn step(&mut self, params: &mut DetectorParams, grads: &DetectorParams) -> Result<()> {
        let norm = grads.squared_norm(&self.groups).sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for &g in &self.groups {
            let v = self.velocity.values_mut(g);
            for (vi, gi) in v.iter_mut().zip(grads.values(g)) {
                *vi = self.momentum * *vi + scale * gi;
            }
            let lr = self.lr;
            for (p, vi) in params.values_mut(g).iter_mut().zip(self.velocity.values(g)) {
                *p -= lr * vi;
            }
        }
        params.step_count += 1;
        Ok(())
    }
}

/// Network input with its annotations.
pub struct Prepared<'a> {
    pub x: FeatureMap,
    pub hw: (usize, usize),
    pub annotations: &'a [InstanceAnnotation],
}

pub fn prepare_samples<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Result<Vec<Prepared<'a>>> {
    samples
        .into_iter()
        .map(|s| {
            Ok(Prepared {
                x: prepare_input(&s.gray(), s.height, s.width)?,
                hw: (s.height, s.width),
                annotations: &s.annotations,
            })
        })
        .collect()
}

/// Mean instance loss over `batch` and its parameter gradient.
pub fn instance_batch_grad(det: &Detector, params: &DetectorParams, batch: &[&Prepared]) -> Result<(LossBreakdown, DetectorParams)> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut grads = params.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    for p in batch {
        let (out, cache) = det.forward_train(params, &p.x, p.hw)?;
        let (loss, mut og) = instance_loss_grad(&out, p.annotations)?;
        for l in og.levels.iter_mut() {
            for t in [&mut l.class_logits, &mut l.box_offsets, &mut l.mask_logits] {
                t.data.iter_mut().for_each(|v| *v *= inv_b);
            }
        }
        det.backward(params, &cache, &og, &mut grads);
        losses.push(loss);
    }
    Ok((LossBreakdown::mean(&losses), grads))
}

fn shuffled(n: usize, seed: u64, tag: &str, index: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, tag, index)));
    order
}

/// Batch `step` of a cyclic walk through `order`.
fn cyclic_batch(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|j| order[(step * batch + j) % order.len()]).collect()
}

const SUPERVISED: [Group; 3] = [Group::Backbone, Group::Neck, Group::Head];

/// Full passes over `dataset` minimizing the instance loss; one event per step.
pub fn coco_pretrain(det: &Detector, params: &mut DetectorParams, dataset: &[ImageSample], config: &TrainConfig) -> Result<Vec<TrainEvent>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("pre-training dataset is empty"));
    }
    det.check_params(params)?;
    let pc = &config.pretrain;
    let prepared = prepare_samples(dataset)?;
    let mut opt = Sgd::new(params, pc.learning_rate, &config.optimizer, &SUPERVISED);
    let mut events = Vec::new();
    let mut step = 0;
    for epoch in 0..pc.coco_pretrain_epochs {
        let order = shuffled(prepared.len(), config.seed, "pretrain-epoch", epoch as u64);
        for chunk in order.chunks(pc.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = instance_batch_grad(det, params, &batch)?;
            opt.step(params, &grads)?;
            events.push(TrainEvent::new(Phase::CocoPretrain, epoch, step, loss));
            step += 1;
        }
    }
    log::info!("coco_pretrain: {step} steps");
    Ok(events)
}

fn index_by_id(samples: &[ImageSample]) -> HashMap<&str, usize> {
    samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
}

fn lookup<'a>(ids: &[String], samples: &'a [ImageSample], index: &HashMap<&str, usize>, what: &str) -> Result<Vec<&'a ImageSample>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &samples[i])
                .ok_or_else(|| Error::arg(format!("{what} id {id:?} is not in the supplied images")))
        })
        .collect()
}

fn ensure_moco_state<'a>(
    det: &Detector,
    params: &DetectorParams,
    config: &TrainConfig,
    state: &'a mut Option<MoCoState>,
) -> Result<&'a mut MoCoState> {
    if state.is_none() {
        *state = Some(MoCoState::new(params, det.config.proj_dim, &config.moco)?);
    }
    Ok(state.as_mut().expect("just set"))
}

/// One MoCo phase of `amt2.moco_steps_per_iter` steps over `cells`.
fn moco_phase(
    det: &Detector,
    params: &mut DetectorParams,
    cells: &[&ImageSample],
    config: &TrainConfig,
    state: &mut MoCoState,
    iter: usize,
    events: &mut Vec<TrainEvent>,
) -> Result<()> {
    let ac = &config.amt2;
    if cells.is_empty() {
        return Err(Error::arg("no cell images for the MoCo phase"));
    }
    if ac.reset_queue_per_iter {
        state.queue.clear();
    }
    let mut opt = Sgd::new(params, ac.moco_learning_rate, &config.optimizer, &crate::moco::KEY_GROUPS);
    let order = shuffled(cells.len(), config.seed, "moco-order", iter as u64);
    for step in 0..ac.moco_steps_per_iter {
        let batch: Vec<ImageSample> = cyclic_batch(&order, step, ac.moco_batch_size)
            .into_iter()
            .map(|i| cells[i].clone())
            .collect();
        let seed = rng::derive(config.seed, "moco-step", (iter * 1_000_000 + step) as u64);
        let out = moco_step(det, params, state, &batch, seed, &config.moco.augment)?;
        opt.step(params, &out.grads)?;
        let mut ev = TrainEvent::new(Phase::Moco, iter, step, LossBreakdown::contrastive(out.loss));
        ev.digest = Some(digest_values(params.values(Group::Backbone)));
        events.push(ev);
    }
    Ok(())
}

/// Alternating schedule: for each plan iteration a MoCo phase on the cell
/// images, a backbone snapshot, then adaption on that iteration's COCO
/// subset with the L²-SP pull towards the snapshot on the backbone.
pub fn amt2_run(
    det: &Detector,
    params: &mut DetectorParams,
    plan: &Amt2Plan,
    cells: &[ImageSample],
    coco: &[ImageSample],
    config: &TrainConfig,
    moco: &mut Option<MoCoState>,
) -> Result<Vec<TrainEvent>> {
    config.validate()?;
    det.check_params(params)?;
    let ac = &config.amt2;
    if plan.len() != ac.amt2_iterations {
        return Err(Error::arg(format!(
            "plan has {} iterations but the configuration asks for {}",
            plan.len(),
            ac.amt2_iterations
        )));
    }
    let cell_index = index_by_id(cells);
    let coco_index = index_by_id(coco);
    let state = ensure_moco_state(det, params, config, moco)?;
    let mut events = Vec::new();
    for (iter, entry) in plan.iterations.iter().enumerate() {
        let cell_imgs = lookup(&entry.cell_replicate_ids, cells, &cell_index, "cell")?;
        let coco_imgs = lookup(&entry.coco_subset_ids, coco, &coco_index, "COCO")?;
        moco_phase(det, params, &cell_imgs, config, state, iter, &mut events)?;

        let anchor = params.snapshot(Group::Backbone);
        let anchor_digest = digest_values(&anchor);
        let mut ev = TrainEvent::new(Phase::AnchorSnapshot, iter, 0, LossBreakdown::default());
        ev.digest = Some(anchor_digest.clone());
        events.push(ev);

        let prepared = prepare_samples(coco_imgs.iter().copied())?;
        if prepared.is_empty() {
            return Err(Error::arg(format!("iteration {iter} has an empty COCO subset")));
        }
        let groups: Vec<Group> = if ac.freeze_backbone_in_adaption {
            vec![Group::Neck, Group::Head]
        } else {
            SUPERVISED.to_vec()
        };
        let mut opt = Sgd::new(params, ac.adaption_learning_rate, &config.optimizer, &groups);
        let order = shuffled(prepared.len(), config.seed, "adaption-order", iter as u64);
        for step in 0..ac.adaption_steps_per_iter {
            let batch: Vec<&Prepared> = cyclic_batch(&order, step, ac.adaption_batch_size)
                .into_iter()
                .map(|i| &prepared[i])
                .collect();
            let (loss, mut grads) = instance_batch_grad(det, params, &batch)?;
            let omega = l2sp_penalty_grad(
                params.values(Group::Backbone),
                &anchor,
                ac.alpha,
                ac.l2sp_weight,
                grads.values_mut(Group::Backbone),
            )?;
            opt.step(params, &grads)?;
            let mut ev = TrainEvent::new(Phase::Adaption, iter, step, loss.with_reg(ac.l2sp_weight * omega));
            ev.anchor_digest = Some(anchor_digest.clone());
            ev.anchor_distance = Some(distance(params.values(Group::Backbone), &anchor));
            events.push(ev);
        }
    }
    log::info!("amt2: {} iterations", plan.len());
    Ok(events)
}

/// MoCo phases only (`amt2_iterations` of them) on the full cell corpus.
pub fn moco_pretrain(
    det: &Detector,
    params: &mut DetectorParams,
    cells: &[ImageSample],
    config: &TrainConfig,
    moco: &mut Option<MoCoState>,
) -> Result<Vec<TrainEvent>> {
    config.validate()?;
    det.check_params(params)?;
    let refs: Vec<&ImageSample> = cells.iter().collect();
    let state = ensure_moco_state(det, params, config, moco)?;
    let mut events = Vec::new();
    for iter in 0..config.amt2.amt2_iterations {
        moco_phase(det, params, &refs, config, state, iter, &mut events)?;
    }
    Ok(events)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Few-shot fine-tuning on the split's selected images. The projection group
/// is never touched. With `l2sp_finetune` the backbone is pulled towards its
/// pre-finetune value.
pub fn finetune(
    det: &Detector,
    params: &mut DetectorParams,
    split: &FewShotSplit,
    dataset: &[ImageSample],
    config: &TrainConfig,
) -> Result<Vec<TrainEvent>> {
    config.validate()?;
    det.check_params(params)?;
    if split.selected_ids.is_empty() {
        return Err(Error::arg("few-shot split selects no images"));
    }
    let index = index_by_id(dataset);
    let selected = lookup(&split.selected_ids, dataset, &index, "few-shot")?;
    finetune_on(det, params, &selected, config)
}

pub fn finetune_on(det: &Detector, params: &mut DetectorParams, samples: &[&ImageSample], config: &TrainConfig) -> Result<Vec<TrainEvent>> {
    finetune_on_with(det, params, samples, config, |_, _| Ok(()))
}

/// As [`finetune_on`], calling `after_step(step, params)` after every update.
pub fn finetune_on_with(
    det: &Detector,
    params: &mut DetectorParams,
    samples: &[&ImageSample],
    config: &TrainConfig,
    mut after_step: impl FnMut(usize, &DetectorParams) -> Result<()>,
) -> Result<Vec<TrainEvent>> {
    config.validate()?;
    det.check_params(params)?;
    if samples.is_empty() {
        return Err(Error::arg("fine-tuning set is empty"));
    }
    let fc = &config.finetune;
    let prepared = prepare_samples(samples.iter().copied())?;
    let anchor = fc.l2sp_finetune.then(|| params.snapshot(Group::Backbone));
    let mut opt = Sgd::new(params, fc.learning_rate, &config.optimizer, &SUPERVISED);
    let mut events = Vec::with_capacity(fc.steps);
    let per_epoch = prepared.len().div_ceil(fc.batch_size);
    let mut order = Vec::new();
    for step in 0..fc.steps {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = shuffled(prepared.len(), config.seed, "finetune-epoch", epoch as u64);
        }
        let k = step % per_epoch;
        let batch: Vec<&Prepared> = order[k * fc.batch_size..((k + 1) * fc.batch_size).min(order.len())]
            .iter()
            .map(|&i| &prepared[i])
            .collect();
        let (mut loss, mut grads) = instance_batch_grad(det, params, &batch)?;
        if let Some(w0) = &anchor {
            let omega = l2sp_penalty_grad(params.values(Group::Backbone), w0, fc.alpha, fc.l2sp_weight, grads.values_mut(Group::Backbone))?;
            loss = loss.with_reg(fc.l2sp_weight * omega);
        }
        opt.step(params, &grads)?;
        events.push(TrainEvent::new(Phase::Finetune, epoch, step, loss));
        after_step(step, params)?;
    }
    Ok(events)
}
