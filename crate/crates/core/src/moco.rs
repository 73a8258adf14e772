//! Momentum contrast: the key encoder, its queue of past keys and one
//! training step over a batch of two-view pairs.

use serde::{Deserialize, Serialize};

use crate::data::augment::{two_views_with, AugmentConfig};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss_grad, ContrastiveForm};
use crate::model::{prepare_input, Detector, DetectorParams, Group};
use crate::rng;

/// Groups mirrored by the key encoder.
pub const KEY_GROUPS: [Group; 2] = [Group::Backbone, Group::Projection];
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoCoConfig {
    pub queue_size: usize,
    pub momentum: f64,
    pub tau: f64,
    pub form: ContrastiveForm,
    pub augment: AugmentConfig,
}

impl Default for MoCoConfig {
    fn default() -> Self {
        Self {
            queue_size: 4096,
            momentum: 0.999,
            tau: 0.07,
            form: ContrastiveForm::Standard,
            augment: AugmentConfig::default(),
        }
    }
}

impl MoCoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_size == 0 {
            return Err(Error::arg("queue size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum {} must lie in [0, 1]", self.momentum)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::arg(format!("temperature {} must lie in (0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Fixed-capacity ring buffer of unit vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyQueue {
    dim: usize,
    capacity: usize,
    data: Vec<f64>,
    fill: usize,
    cursor: usize,
}

impl KeyQueue {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(Error::arg("queue dimension and capacity must be positive"));
        }
        Ok(Self {
            dim,
            capacity,
            data: vec![0.0; dim * capacity],
            fill: 0,
            cursor: 0,
        })
    }

    /// Rebuilds a queue from its raw storage.
    pub fn from_parts(dim: usize, capacity: usize, data: Vec<f64>, fill: usize, cursor: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 || data.len() != dim * capacity || fill > capacity || cursor >= capacity {
            return Err(Error::parse("inconsistent queue layout"));
        }
        Ok(Self {
            dim,
            capacity,
            data,
            fill,
            cursor,
        })
    }

    /// Raw slot storage, `capacity * dim` values.
    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
        self.fill = 0;
        self.cursor = 0;
    }

    /// Writes keys at the cursor, overwriting the oldest entries once full.
    pub fn enqueue(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        if keys.len() > self.capacity {
            return Err(Error::arg(format!(
                "batch of {} keys exceeds queue capacity {}",
                keys.len(),
                self.capacity
            )));
        }
        for (i, k) in keys.iter().enumerate() {
            if k.len() != self.dim {
                return Err(Error::arg(format!("key {i} has dimension {}, expected {}", k.len(), self.dim)));
            }
            let n = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::arg(format!("key {i} is not unit norm (norm {n})")));
            }
        }
        for k in keys {
            let at = self.cursor * self.dim;
            self.data[at..at + self.dim].copy_from_slice(k);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored keys, oldest first.
    pub fn contents(&self) -> Vec<&[f64]> {
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        (0..self.fill)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                &self.data[slot * self.dim..(slot + 1) * self.dim]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoCoState {
    pub key_backbone: Vec<f64>,
    pub key_projection: Vec<f64>,
    pub queue: KeyQueue,
    pub tau: f64,
    pub momentum: f64,
    pub form: ContrastiveForm,
}

impl MoCoState {
    /// Key encoder initialized as a copy of the query encoder; empty queue.
    pub fn new(query: &DetectorParams, proj_dim: usize, config: &MoCoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            key_backbone: query.snapshot(Group::Backbone),
            key_projection: query.snapshot(Group::Projection),
            queue: KeyQueue::new(proj_dim, config.queue_size)?,
            tau: config.tau,
            momentum: config.momentum,
            form: config.form,
        })
    }

    pub fn key_values(&self, g: Group) -> Option<&[f64]> {
        match g {
            Group::Backbone => Some(&self.key_backbone),
            Group::Projection => Some(&self.key_projection),
            _ => None,
        }
    }

    pub fn key_values_mut(&mut self, g: Group) -> Option<&mut Vec<f64>> {
        match g {
            Group::Backbone => Some(&mut self.key_backbone),
            Group::Projection => Some(&mut self.key_projection),
            _ => None,
        }
    }

    /// `query` with its backbone and projection replaced by the key copies.
    pub fn key_params(&self, query: &DetectorParams) -> Result<DetectorParams> {
        let mut p = query.clone();
        p.restore(Group::Backbone, &self.key_backbone)?;
        p.restore(Group::Projection, &self.key_projection)?;
        Ok(p)
    }

    /// `key <- m*key + (1 - m)*query` over the mirrored groups.
    pub fn momentum_update(&mut self, query: &DetectorParams) -> Result<()> {
        for g in KEY_GROUPS {
            let (k, q) = (self.key_values(g).expect("mirrored group").len(), query.values(g).len());
            if k != q {
                return Err(Error::arg(format!("key {} group has {k} values, query has {q}", g.as_str())));
            }
        }
        let m = self.momentum;
        for g in KEY_GROUPS {
            let q = query.values(g);
            let key = self.key_values_mut(g).expect("mirrored group");
            for (k, &qv) in key.iter_mut().zip(q) {
                *k = m * *k + (1.0 - m) * qv;
            }
        }
        Ok(())
    }

    pub fn enqueue(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        self.queue.enqueue(keys)
    }
}

/// Observable effects of [`moco_step`], in emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MocoEffect {
    Forward,
    Loss,
    Gradient,
    MomentumUpdate,
    Enqueue,
}

#[derive(Debug, Clone)]
pub struct MocoStepOutput {
    /// Gradient w.r.t. the query encoder; neck and head entries stay zero.
    pub grads: DetectorParams,
    pub loss: f64,
    pub keys: Vec<Vec<f64>>,
    pub effects: Vec<MocoEffect>,
}

/// Network inputs for the two views of every image in the batch.
pub fn batch_views(batch: &[ImageSample], seed: u64, augment: &AugmentConfig) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let (a, b) = two_views_with(img, rng::derive(seed, "moco_views", i as u64), augment)?;
            Ok((a.pixels, b.pixels))
        })
        .collect()
}

/// Query-side gradient and mean loss for fixed key embeddings `keys`.
pub fn query_gradients(
    det: &Detector,
    query: &DetectorParams,
    state: &MoCoState,
    query_views: &[&[f64]],
    view_size: usize,
    keys: &[Vec<f64>],
) -> Result<(DetectorParams, f64)> {
    let negatives = state.queue.contents();
    let mut grads = query.zeros_like();
    let mut total = 0.0;
    let inv_b = 1.0 / query_views.len() as f64;
    for (pixels, v2) in query_views.iter().zip(keys) {
        let x = prepare_input(pixels, view_size, view_size)?;
        let (emb, cache) = det.embed_train(query, &x)?;
        let (loss, mut dv) = contrastive_loss_grad(&emb.v, v2, &negatives, state.tau, state.form)?;
        dv.iter_mut().for_each(|g| *g *= inv_b);
        det.embed_backward(query, &cache, &dv, &mut grads);
        total += loss;
    }
    Ok((grads, total * inv_b))
}

/// One step: query/key forward, loss and query gradient, then the momentum
/// update from the (not yet stepped) query parameters, then enqueueing the
/// batch's keys.
pub fn moco_step(
    det: &Detector,
    query: &DetectorParams,
    state: &mut MoCoState,
    batch: &[ImageSample],
    seed: u64,
    augment: &AugmentConfig,
) -> Result<MocoStepOutput> {
    if batch.is_empty() {
        return Err(Error::arg("MoCo batch must not be empty"));
    }
    if batch.len() > state.queue.capacity() {
        return Err(Error::arg("MoCo batch exceeds the queue capacity"));
    }
    let mut effects = Vec::with_capacity(5);
    let views = batch_views(batch, seed, augment)?;
    let n = augment.output_size;
    let key_params = state.key_params(query)?;
    let keys = views
        .iter()
        .map(|(_, k)| Ok(det.embed(&key_params, &prepare_input(k, n, n)?)?.v))
        .collect::<Result<Vec<_>>>()?;
    effects.push(MocoEffect::Forward);
    let q_views: Vec<&[f64]> = views.iter().map(|(q, _)| q.as_slice()).collect();
    let (grads, loss) = query_gradients(det, query, state, &q_views, n, &keys)?;
    effects.push(MocoEffect::Loss);
    if !loss.is_finite() {
        return Err(Error::arg("contrastive loss is not finite"));
    }
    effects.push(MocoEffect::Gradient);
    state.momentum_update(query)?;
    effects.push(MocoEffect::MomentumUpdate);
    state.enqueue(&keys)?;
    effects.push(MocoEffect::Enqueue);
    Ok(MocoStepOutput {
        grads,
        loss,
        keys,
        effects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i % dim] = 1.0;
        v
    }

    #[test]
    fn fifo_overwrite() {
        let mut q = KeyQueue::new(4, 3).unwrap();
        for i in 0..4 {
            q.enqueue(&[unit(i, 4)]).unwrap();
        }
        let c: Vec<Vec<f64>> = q.contents().iter().map(|s| s.to_vec()).collect();
        assert_eq!(c, vec![unit(1, 4), unit(2, 4), unit(3, 4)]);
    }

    #[test]
    fn fill_and_cursor_accounting() {
        let mut q = KeyQueue::new(2, 8).unwrap();
        q.enqueue(&[unit(0, 2), unit(1, 2)]).unwrap();
        assert_eq!(q.fill(), 2);
        let mut q = KeyQueue::new(2, 3).unwrap();
        for _ in 0..5 {
            q.enqueue(&[unit(0, 2)]).unwrap();
        }
        assert_eq!(q.cursor(), 2);
        assert_eq!(q.fill(), 3);
    }

    #[test]
    fn enqueue_validation() {
        let mut q = KeyQueue::new(2, 2).unwrap();
        assert!(q.enqueue(&[unit(0, 2), unit(1, 2), unit(0, 2)]).is_err());
        assert!(q.enqueue(&[vec![2.0, 0.0]]).is_err());
        assert!(q.enqueue(&[vec![1.0]]).is_err());
        assert_eq!(q.fill(), 0);
    }

    fn scalar_state(m: f64) -> (MoCoState, DetectorParams) {
        let mut p = DetectorParams::default();
        p.push_tensor(Group::Backbone, "w", &[1], crate::model::TensorKind::Weight);
        p.push_tensor(Group::Projection, "w", &[1], crate::model::TensorKind::Weight);
        let cfg = MoCoConfig {
            momentum: m,
            queue_size: 4,
            ..MoCoConfig::default()
        };
        let mut s = MoCoState::new(&p, 2, &cfg).unwrap();
        s.key_backbone[0] = 1.0;
        (s, p)
    }

    #[test]
    fn momentum_cases() {
        let (mut s, q) = scalar_state(0.999);
        s.momentum_update(&q).unwrap();
        assert_eq!(s.key_backbone[0], 0.999);
        let (mut s, q) = scalar_state(1.0);
        s.momentum_update(&q).unwrap();
        assert_eq!(s.key_backbone[0], 1.0);
        let (mut s, mut q) = scalar_state(0.0);
        q.values_mut(Group::Backbone)[0] = 0.37;
        s.momentum_update(&q).unwrap();
        assert_eq!(s.key_backbone[0], 0.37);
    }

    #[test]
    fn momentum_shape_mismatch() {
        let (mut s, _) = scalar_state(0.5);
        let mut other = DetectorParams::default();
        other.push_tensor(Group::Backbone, "w", &[2], crate::model::TensorKind::Weight);
        other.push_tensor(Group::Projection, "w", &[1], crate::model::TensorKind::Weight);
        assert!(s.momentum_update(&other).is_err());
    }
}
