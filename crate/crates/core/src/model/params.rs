//! Flat, group-partitioned parameter storage.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Neck,
    Head,
    Projection,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Backbone, Group::Neck, Group::Head, Group::Projection];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Neck => "neck",
            Group::Head => "head",
            Group::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs feeding one output unit: every dimension after the first.
    pub fn fan_in(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>().max(1)
    }
}

/// Location of one tensor inside a group's flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub group: Group,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGroup {
    pub specs: Vec<TensorSpec>,
    pub values: Vec<f64>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    groups: [ParamGroup; 4],
    pub step_count: u64,
}

impl DetectorParams {
    /// Appends a zero-filled tensor to `group` and returns its slot.
    pub fn push_tensor(&mut self, group: Group, name: impl Into<String>, shape: &[usize], kind: TensorKind) -> Slot {
        let g = &mut self.groups[group.index()];
        let offset = g.values.len();
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            kind,
        };
        let len = spec.len();
        g.values.resize(offset + len, 0.0);
        g.specs.push(spec);
        Slot { group, offset, len }
    }

    /// Rebuilds a bundle from per-group specs and values, checking that the
    /// specs tile each value vector exactly.
    pub fn from_groups(groups: [ParamGroup; 4], step_count: u64) -> Result<Self> {
        for (g, pg) in Group::ALL.iter().zip(&groups) {
            let mut expect = 0;
            for s in &pg.specs {
                if s.offset != expect {
                    return Err(Error::parse(format!("{} tensor {} has offset {}, expected {expect}", g.as_str(), s.name, s.offset)));
                }
                expect += s.len();
            }
            if expect != pg.values.len() {
                return Err(Error::parse(format!(
                    "{} group specs cover {expect} values but {} are stored",
                    g.as_str(),
                    pg.values.len()
                )));
            }
        }
        Ok(Self { groups, step_count })
    }

    pub fn group(&self, g: Group) -> &ParamGroup {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        &mut self.groups[g.index()]
    }

    pub fn values(&self, g: Group) -> &[f64] {
        &self.groups[g.index()].values
    }

    pub fn values_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()].values
    }

    #[inline]
    pub fn slice(&self, s: Slot) -> &[f64] {
        &self.groups[s.group.index()].values[s.offset..s.offset + s.len]
    }

    #[inline]
    pub fn slice_mut(&mut self, s: Slot) -> &mut [f64] {
        &mut self.groups[s.group.index()].values[s.offset..s.offset + s.len]
    }

    /// Value copy of one group, independent of later updates.
    pub fn snapshot(&self, g: Group) -> Vec<f64> {
        self.values(g).to_vec()
    }

    pub fn restore(&mut self, g: Group, values: &[f64]) -> Result<()> {
        let dst = self.values_mut(g);
        if dst.len() != values.len() {
            return Err(Error::arg(format!(
                "{} group has {} values, got {}",
                g.as_str(),
                dst.len(),
                values.len()
            )));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for g in out.groups.iter_mut() {
            g.values.iter_mut().for_each(|v| *v = 0.0);
        }
        out.step_count = 0;
        out
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.groups.iter().zip(&other.groups).all(|(a, b)| a.specs == b.specs)
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    /// `self += scale * other` on the selected groups.
    pub fn axpy(&mut self, scale: f64, other: &Self, groups: &[Group]) {
        for &g in groups {
            for (a, b) in self.values_mut(g).iter_mut().zip(other.values(g)) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.groups.iter_mut() {
            g.values.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn squared_norm(&self, groups: &[Group]) -> f64 {
        groups.iter().flat_map(|&g| self.values(g)).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(|g| g.values.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the per-group digests, in group order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for g in Group::ALL {
            h.update(digest_values(self.values(g)).as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn digest_values(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Kaiming-normal weights (variance `2 / fan_in`) and zero biases. Each
/// tensor draws from its own stream derived from `seed` and its name.
pub fn kaiming_init(params: &mut DetectorParams, seed: u64) {
    for g in Group::ALL {
        kaiming_init_group(params, g, seed);
    }
}

pub fn kaiming_init_group(params: &mut DetectorParams, group: Group, seed: u64) {
    let pg = params.group_mut(group);
    for (i, spec) in pg.specs.iter().enumerate() {
        let dst = &mut pg.values[spec.offset..spec.offset + spec.len()];
        match spec.kind {
            TensorKind::Bias => dst.iter_mut().for_each(|v| *v = 0.0),
            TensorKind::Weight => {
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let tag = format!("kaiming/{}/{}", group.as_str(), spec.name);
                let mut r = rng::seeded(rng::derive(seed, &tag, i as u64));
                dst.iter_mut().for_each(|v| *v = normal.sample(&mut r));
            }
        }
    }
}
