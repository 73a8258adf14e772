//! Desk-scale detector: backbone -> neck -> head, plus the projection MLP used
//! for contrastive pre-training.
//!
//! Backbone: four 3x3 conv blocks (strides 2,2,2,1) giving levels at strides 4
//! and 8. Neck: 1x1 laterals, nearest-neighbour top-down addition and one 3x3
//! smoothing conv per level. Head (shared across levels): a 3x3 tower followed
//! by 1x1 predictors for class logits, softplus box distances and an MxM mask
//! patch per location.

use serde::{Deserialize, Serialize};

use super::layers::{
    relu_backward, relu_inplace, softplus, sigmoid, upsample2x, upsample2x_backward, Conv2d, ConvCache, FeatureMap,
    Linear,
};
use super::params::{kaiming_init, DetectorParams, Group};
use crate::data::BBox;
use crate::error::{Error, Result};

pub const STRIDES: [usize; 2] = [4, 8];
/// Added to the norm before dividing in the projection output.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of the stride-4 and stride-8 backbone levels.
    pub backbone_channels: [usize; 2],
    pub neck_channels: usize,
    pub head_channels: usize,
    /// Foreground classes; logits carry one extra background slot at index 0.
    pub num_classes: usize,
    pub mask_size: usize,
    pub proj_dim: usize,
    pub proj_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32],
            neck_channels: 32,
            head_channels: 32,
            num_classes: 3,
            mask_size: 14,
            proj_dim: 16,
            proj_bias: true,
        }
    }
}

impl ModelConfig {
    /// Pooled representation size: global mean and max of the stride-8 level.
    pub fn repr_dim(&self) -> usize {
        2 * self.backbone_channels[1]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.backbone_channels.iter().all(|&c| c > 0)
            && self.neck_channels > 0
            && self.head_channels > 0
            && self.num_classes > 0
            && self.mask_size > 0
            && self.proj_dim > 0;
        if !ok {
            return Err(Error::arg("model dimensions must be positive"));
        }
        if self.proj_dim >= self.repr_dim() {
            return Err(Error::arg("projection dimension must be smaller than the representation dimension"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOutput {
    pub stride: usize,
    pub class_logits: FeatureMap,
    /// `(l, t, r, b)` distances in stride units, non-negative.
    pub box_offsets: FeatureMap,
    pub mask_logits: FeatureMap,
}

impl LevelOutput {
    pub fn height(&self) -> usize {
        self.class_logits.height
    }

    pub fn width(&self) -> usize {
        self.class_logits.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub mask_size: usize,
    pub levels: Vec<LevelOutput>,
}

/// Gradient of a scalar loss with respect to a [`DetectionOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub levels: Vec<LevelGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrad {
    pub class_logits: FeatureMap,
    pub box_offsets: FeatureMap,
    pub mask_logits: FeatureMap,
}

impl OutputGrad {
    pub fn zeros_like(out: &DetectionOutput) -> Self {
        let z = |f: &FeatureMap| FeatureMap::zeros(f.channels, f.height, f.width);
        Self {
            levels: out
                .levels
                .iter()
                .map(|l| LevelGrad {
                    class_logits: z(&l.class_logits),
                    box_offsets: z(&l.box_offsets),
                    mask_logits: z(&l.mask_logits),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub r: Vec<f64>,
    pub v: Vec<f64>,
}

/// Image-space anchor point of grid location `(row, col)` at `stride`.
pub fn location_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    ((col * stride) as f64, (row * stride) as f64)
}

/// Box from `(l, t, r, b)` distances: `x = cx - l*s`, `w = (l + r)*s`.
pub fn decode_box(row: usize, col: usize, stride: usize, offsets: [f64; 4]) -> BBox {
    let (cx, cy) = location_center(row, col, stride);
    let s = stride as f64;
    let [l, t, r, b] = offsets;
    BBox::new(cx - l * s, cy - t * s, (l + r) * s, (t + b) * s)
}

/// Maps a grayscale image in `[0, 1]` to the network input: centred and
/// scaled, zero-padded bottom/right to a multiple of 8.
pub fn prepare_input(gray: &[f64], height: usize, width: usize) -> Result<FeatureMap> {
    if gray.len() != height * width || height == 0 || width == 0 {
        return Err(Error::arg("input buffer does not match its dimensions"));
    }
    if gray.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("input contains non-finite pixels"));
    }
    let ph = height.div_ceil(8) * 8;
    let pw = width.div_ceil(8) * 8;
    let mut x = FeatureMap::zeros(1, ph, pw);
    for y in 0..height {
        for xx in 0..width {
            x.data[y * pw + xx] = (gray[y * width + xx] - 0.5) / 0.25;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    conv4: Conv2d,
    lat4: Conv2d,
    lat8: Conv2d,
    smooth4: Conv2d,
    smooth8: Conv2d,
    tower: Conv2d,
    cls: Conv2d,
    bbox: Conv2d,
    mask: Conv2d,
    proj1: Linear,
    proj2: Linear,
}

pub struct BackboneCache {
    convs: [ConvCache; 4],
    acts: [FeatureMap; 4],
}

pub struct NeckCache {
    lat4: ConvCache,
    lat8: ConvCache,
    smooth4: ConvCache,
    smooth8: ConvCache,
    c8_shape: (usize, usize),
}

pub struct HeadLevelCache {
    tower: ConvCache,
    tower_out: FeatureMap,
    cls: ConvCache,
    bbox: ConvCache,
    box_raw: FeatureMap,
    mask: ConvCache,
}

pub struct DetectorCache {
    backbone: BackboneCache,
    neck: NeckCache,
    head: Vec<HeadLevelCache>,
}

pub struct EmbedCache {
    backbone: BackboneCache,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    level_hw: usize,
    hidden: Vec<f64>,
    u: Vec<f64>,
}

impl Detector {
    /// Builds the layer layout and a zero-valued parameter bundle.
    pub fn new(config: ModelConfig) -> Result<(Self, DetectorParams)> {
        config.validate()?;
        let mut p = DetectorParams::default();
        let [c4, c8] = config.backbone_channels;
        let (cn, ch) = (config.neck_channels, config.head_channels);
        let dr = config.repr_dim();
        let det = Self {
            config,
            conv1: Conv2d::new(&mut p, Group::Backbone, "conv1", 1, c4, 3, 2),
            conv2: Conv2d::new(&mut p, Group::Backbone, "conv2", c4, c4, 3, 2),
            conv3: Conv2d::new(&mut p, Group::Backbone, "conv3", c4, c8, 3, 2),
            conv4: Conv2d::new(&mut p, Group::Backbone, "conv4", c8, c8, 3, 1),
            lat4: Conv2d::new(&mut p, Group::Neck, "lateral4", c4, cn, 1, 1),
            lat8: Conv2d::new(&mut p, Group::Neck, "lateral8", c8, cn, 1, 1),
            smooth4: Conv2d::new(&mut p, Group::Neck, "smooth4", cn, cn, 3, 1),
            smooth8: Conv2d::new(&mut p, Group::Neck, "smooth8", cn, cn, 3, 1),
            tower: Conv2d::new(&mut p, Group::Head, "tower", cn, ch, 3, 1),
            cls: Conv2d::new(&mut p, Group::Head, "cls", ch, config.num_classes + 1, 1, 1),
            bbox: Conv2d::new(&mut p, Group::Head, "box", ch, 4, 1, 1),
            mask: Conv2d::new(&mut p, Group::Head, "mask", ch, config.mask_size * config.mask_size, 1, 1),
            proj1: Linear::new(&mut p, Group::Projection, "proj1", dr, dr, config.proj_bias),
            proj2: Linear::new(&mut p, Group::Projection, "proj2", dr, config.proj_dim, config.proj_bias),
        };
        Ok((det, p))
    }

    /// Layout plus Kaiming-initialized parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, DetectorParams)> {
        let (det, mut p) = Self::new(config)?;
        kaiming_init(&mut p, seed);
        Ok((det, p))
    }

    pub fn check_params(&self, params: &DetectorParams) -> Result<()> {
        let (_, fresh) = Self::new(self.config)?;
        if !fresh.same_layout(params) {
            return Err(Error::arg("parameter layout does not match the model configuration"));
        }
        Ok(())
    }

    // ---- backbone ----

    pub fn backbone_forward(&self, params: &DetectorParams, x: &FeatureMap) -> Result<FeaturePyramid> {
        Ok(self.backbone_cached(params, x)?.0)
    }

    fn backbone_cached(&self, params: &DetectorParams, x: &FeatureMap) -> Result<(FeaturePyramid, BackboneCache)> {
        if x.channels != 1 {
            return Err(Error::arg("backbone expects a single-channel input"));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("backbone input contains non-finite values"));
        }
        let (mut a1, k1) = self.conv1.forward(params, x);
        relu_inplace(&mut a1);
        let (mut a2, k2) = self.conv2.forward(params, &a1);
        relu_inplace(&mut a2);
        let (mut a3, k3) = self.conv3.forward(params, &a2);
        relu_inplace(&mut a3);
        let (mut a4, k4) = self.conv4.forward(params, &a3);
        relu_inplace(&mut a4);
        let pyramid = FeaturePyramid {
            levels: vec![a2.clone(), a4.clone()],
        };
        Ok((
            pyramid,
            BackboneCache {
                convs: [k1, k2, k3, k4],
                acts: [a1, a2, a3, a4],
            },
        ))
    }

    fn backbone_backward(
        &self,
        params: &DetectorParams,
        cache: &BackboneCache,
        d_c4: Option<&FeatureMap>,
        d_c8: &FeatureMap,
        grads: &mut DetectorParams,
    ) {
        let [k1, k2, k3, k4] = &cache.convs;
        let [a1, a2, a3, a4] = &cache.acts;
        let mut g = d_c8.clone();
        relu_backward(a4, &mut g);
        let mut g = self.conv4.backward(params, k4, &g, grads, true).expect("input grad");
        relu_backward(a3, &mut g);
        let mut g = self.conv3.backward(params, k3, &g, grads, true).expect("input grad");
        if let Some(d4) = d_c4 {
            g.add_assign(d4);
        }
        relu_backward(a2, &mut g);
        let mut g = self.conv2.backward(params, k2, &g, grads, true).expect("input grad");
        relu_backward(a1, &mut g);
        self.conv1.backward(params, k1, &g, grads, false);
    }

    // ---- neck ----

    pub fn neck_forward(&self, params: &DetectorParams, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        Ok(self.neck_cached(params, pyramid)?.0)
    }

    fn neck_cached(&self, params: &DetectorParams, pyramid: &FeaturePyramid) -> Result<(FeaturePyramid, NeckCache)> {
        let [c4, c8] = match pyramid.levels.as_slice() {
            [a, b] => [a, b],
            _ => return Err(Error::arg("neck expects exactly two pyramid levels")),
        };
        if c4.channels != self.lat4.cin || c8.channels != self.lat8.cin {
            return Err(Error::arg("pyramid channel counts do not match the neck"));
        }
        if c8.height != c4.height.div_ceil(2) || c8.width != c4.width.div_ceil(2) {
            return Err(Error::arg(format!(
                "pyramid level shapes {}x{} and {}x{} are not a stride-2 pair",
                c4.height, c4.width, c8.height, c8.width
            )));
        }
        let (p8, k_lat8) = self.lat8.forward(params, c8);
        let (mut p4, k_lat4) = self.lat4.forward(params, c4);
        p4.add_assign(&upsample2x(&p8, c4.height, c4.width));
        let (o4, k_s4) = self.smooth4.forward(params, &p4);
        let (o8, k_s8) = self.smooth8.forward(params, &p8);
        Ok((
            FeaturePyramid { levels: vec![o4, o8] },
            NeckCache {
                lat4: k_lat4,
                lat8: k_lat8,
                smooth4: k_s4,
                smooth8: k_s8,
                c8_shape: (c8.height, c8.width),
            },
        ))
    }

    fn neck_backward(
        &self,
        params: &DetectorParams,
        cache: &NeckCache,
        d_out: &[FeatureMap],
        grads: &mut DetectorParams,
    ) -> (FeatureMap, FeatureMap) {
        let d_p4 = self.smooth4.backward(params, &cache.smooth4, &d_out[0], grads, true).expect("input grad");
        let mut d_p8 = self.smooth8.backward(params, &cache.smooth8, &d_out[1], grads, true).expect("input grad");
        let (h8, w8) = cache.c8_shape;
        d_p8.add_assign(&upsample2x_backward(&d_p4, h8, w8));
        let d_c4 = self.lat4.backward(params, &cache.lat4, &d_p4, grads, true).expect("input grad");
        let d_c8 = self.lat8.backward(params, &cache.lat8, &d_p8, grads, true).expect("input grad");
        (d_c4, d_c8)
    }

    // ---- head ----

    pub fn head_forward(&self, params: &DetectorParams, pyramid: &FeaturePyramid, image_hw: (usize, usize)) -> Result<DetectionOutput> {
        Ok(self.head_cached(params, pyramid, image_hw)?.0)
    }

    fn head_cached(
        &self,
        params: &DetectorParams,
        pyramid: &FeaturePyramid,
        image_hw: (usize, usize),
    ) -> Result<(DetectionOutput, Vec<HeadLevelCache>)> {
        if pyramid.levels.len() != STRIDES.len() {
            return Err(Error::arg("head expects two pyramid levels"));
        }
        let mut levels = Vec::with_capacity(2);
        let mut caches = Vec::with_capacity(2);
        for (level, &stride) in pyramid.levels.iter().zip(&STRIDES) {
            if level.channels != self.tower.cin {
                return Err(Error::arg("pyramid channel count does not match the head"));
            }
            let (mut t, k_tower) = self.tower.forward(params, level);
            relu_inplace(&mut t);
            let (cls, k_cls) = self.cls.forward(params, &t);
            let (raw, k_box) = self.bbox.forward(params, &t);
            let (mask, k_mask) = self.mask.forward(params, &t);
            let mut offsets = raw.clone();
            offsets.data.iter_mut().for_each(|v| *v = softplus(*v));
            levels.push(LevelOutput {
                stride,
                class_logits: cls,
                box_offsets: offsets,
                mask_logits: mask,
            });
            caches.push(HeadLevelCache {
                tower: k_tower,
                tower_out: t,
                cls: k_cls,
                bbox: k_box,
                box_raw: raw,
                mask: k_mask,
            });
        }
        let out = DetectionOutput {
            image_height: image_hw.0,
            image_width: image_hw.1,
            num_classes: self.config.num_classes,
            mask_size: self.config.mask_size,
            levels,
        };
        Ok((out, caches))
    }

    fn head_backward(
        &self,
        params: &DetectorParams,
        caches: &[HeadLevelCache],
        grad: &OutputGrad,
        grads: &mut DetectorParams,
    ) -> Vec<FeatureMap> {
        caches
            .iter()
            .zip(&grad.levels)
            .map(|(c, g)| {
                let mut d_raw = g.box_offsets.clone();
                d_raw.data.iter_mut().zip(&c.box_raw.data).for_each(|(d, &r)| *d *= sigmoid(r));
                let mut d_t = self.cls.backward(params, &c.cls, &g.class_logits, grads, true).expect("input grad");
                d_t.add_assign(&self.bbox.backward(params, &c.bbox, &d_raw, grads, true).expect("input grad"));
                d_t.add_assign(&self.mask.backward(params, &c.mask, &g.mask_logits, grads, true).expect("input grad"));
                relu_backward(&c.tower_out, &mut d_t);
                self.tower.backward(params, &c.tower, &d_t, grads, true).expect("input grad")
            })
            .collect()
    }

    // ---- full detector ----

    /// `head(neck(backbone(x)))`; `image_hw` is the unpadded image size.
    pub fn forward(&self, params: &DetectorParams, x: &FeatureMap, image_hw: (usize, usize)) -> Result<DetectionOutput> {
        Ok(self.forward_train(params, x, image_hw)?.0)
    }

    pub fn forward_train(
        &self,
        params: &DetectorParams,
        x: &FeatureMap,
        image_hw: (usize, usize),
    ) -> Result<(DetectionOutput, DetectorCache)> {
        let (pyr, backbone) = self.backbone_cached(params, x)?;
        let (fused, neck) = self.neck_cached(params, &pyr)?;
        let (out, head) = self.head_cached(params, &fused, image_hw)?;
        Ok((out, DetectorCache { backbone, neck, head }))
    }

    /// Accumulates parameter gradients of the backbone, neck and head.
    pub fn backward(&self, params: &DetectorParams, cache: &DetectorCache, grad: &OutputGrad, grads: &mut DetectorParams) {
        let d_fused = self.head_backward(params, &cache.head, grad, grads);
        let (d_c4, d_c8) = self.neck_backward(params, &cache.neck, &d_fused, grads);
        self.backbone_backward(params, &cache.backbone, Some(&d_c4), &d_c8, grads);
    }

    // ---- contrastive embedding ----

    pub fn pool(&self, level: &FeatureMap) -> Vec<f64> {
        pool_mean_max(level).0
    }

    /// Two-layer MLP followed by L2 normalization.
    pub fn project(&self, params: &DetectorParams, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.config.repr_dim() {
            return Err(Error::arg(format!(
                "representation has {} dims, expected {}",
                r.len(),
                self.config.repr_dim()
            )));
        }
        let (_, u) = self.project_raw(params, r);
        Ok(normalize(&u))
    }

    fn project_raw(&self, params: &DetectorParams, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = self.proj1.forward(params, r);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let u = self.proj2.forward(params, &hidden);
        (hidden, u)
    }

    pub fn embed(&self, params: &DetectorParams, x: &FeatureMap) -> Result<Embedding> {
        Ok(self.embed_train(params, x)?.0)
    }

    pub fn embed_train(&self, params: &DetectorParams, x: &FeatureMap) -> Result<(Embedding, EmbedCache)> {
        let (pyr, backbone) = self.backbone_cached(params, x)?;
        let level = &pyr.levels[1];
        let (r, argmax) = pool_mean_max(level);
        let (hidden, u) = self.project_raw(params, &r);
        let v = normalize(&u);
        let cache = EmbedCache {
            backbone,
            pooled: r.clone(),
            argmax,
            level_hw: level.height * level.width,
            hidden,
            u,
        };
        Ok((Embedding { r, v }, cache))
    }

    /// Backpropagates `dv` (gradient w.r.t. the unit embedding) into the
    /// backbone and projection groups.
    pub fn embed_backward(&self, params: &DetectorParams, cache: &EmbedCache, dv: &[f64], grads: &mut DetectorParams) {
        let du = normalize_backward(&cache.u, dv);
        let mut dh = self.proj2.backward(params, &cache.hidden, &du, grads);
        dh.iter_mut().zip(&cache.hidden).for_each(|(d, &h)| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        let dr = self.proj1.backward(params, &cache.pooled, &dh, grads);
        let c8 = self.config.backbone_channels[1];
        let a4 = &cache.backbone.acts[3];
        let hw = cache.level_hw;
        let mut d_c8 = FeatureMap::zeros(c8, a4.height, a4.width);
        for c in 0..c8 {
            let g_mean = dr[c] / hw as f64;
            d_c8.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += g_mean);
            d_c8.data[c * hw + cache.argmax[c]] += dr[c8 + c];
        }
        self.backbone_backward(params, &cache.backbone, None, &d_c8, grads);
    }
}

/// Per-channel global mean followed by global max; also returns the first
/// argmax index of each channel.
fn pool_mean_max(level: &FeatureMap) -> (Vec<f64>, Vec<usize>) {
    let c = level.channels;
    let hw = level.height * level.width;
    let mut out = vec![0.0; 2 * c];
    let mut argmax = vec![0; c];
    for ch in 0..c {
        let plane = level.plane(ch);
        out[ch] = plane.iter().sum::<f64>() / hw as f64;
        let (mut best, mut idx) = (f64::NEG_INFINITY, 0);
        for (i, &v) in plane.iter().enumerate() {
            if v > best {
                best = v;
                idx = i;
            }
        }
        out[c + ch] = best;
        argmax[ch] = idx;
    }
    (out, argmax)
}

pub fn normalize(u: &[f64]) -> Vec<f64> {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter().map(|v| v / (n + NORM_EPS)).collect()
}

fn normalize_backward(u: &[f64], dv: &[f64]) -> Vec<f64> {
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d = n + NORM_EPS;
    let ug: f64 = u.iter().zip(dv).map(|(a, b)| a * b).sum();
    let coef = if n > 0.0 { ug / (n * d * d) } else { 0.0 };
    u.iter().zip(dv).map(|(&ui, &gi)| gi / d - ui * coef).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64, h: usize, w: usize) -> FeatureMap {
        let gray: Vec<f64> = (0..h * w)
            .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f64 / 1000.0)
            .collect();
        prepare_input(&gray, h, w).unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let (det, p) = Detector::init(ModelConfig::default(), 0).unwrap();
        let pyr = det.backbone_forward(&p, &input(1, 32, 32)).unwrap();
        assert_eq!((pyr.levels[0].height, pyr.levels[0].width), (8, 8));
        assert_eq!((pyr.levels[1].height, pyr.levels[1].width), (4, 4));
        let fused = det.neck_forward(&p, &pyr).unwrap();
        assert_eq!(fused.levels.len(), 2);
        assert!(fused.levels.iter().all(|l| l.channels == 32));
    }

    #[test]
    fn zero_input_and_zero_weights_give_zero_features() {
        let (det, p) = Detector::new(ModelConfig::default()).unwrap();
        let x = FeatureMap::zeros(1, 32, 32);
        let pyr = det.backbone_forward(&p, &x).unwrap();
        assert!(pyr.levels.iter().all(|l| l.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn distinct_inputs_give_distinct_features() {
        let (det, p) = Detector::init(ModelConfig::default(), 4).unwrap();
        let a = det.backbone_forward(&p, &input(1, 32, 32)).unwrap();
        let b = det.backbone_forward(&p, &input(2, 32, 32)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn non_finite_input_rejected() {
        let (det, p) = Detector::init(ModelConfig::default(), 0).unwrap();
        let mut x = FeatureMap::zeros(1, 16, 16);
        x.data[3] = f64::NAN;
        assert!(det.backbone_forward(&p, &x).is_err());
        assert!(prepare_input(&[f64::INFINITY; 4], 2, 2).is_err());
    }

    #[test]
    fn neck_lateral_only_when_high_level_is_zero() {
        let (det, p) = Detector::init(ModelConfig::default(), 8).unwrap();
        let pyr = det.backbone_forward(&p, &input(3, 32, 32)).unwrap();
        let mut zeroed = pyr.clone();
        zeroed.levels[1].data.iter_mut().for_each(|v| *v = 0.0);
        let fused = det.neck_forward(&p, &zeroed).unwrap();
        let (lat, _) = det.lat4.forward(&p, &pyr.levels[0]);
        let (expect, _) = det.smooth4.forward(&p, &lat);
        assert_eq!(fused.levels[0], expect);
    }

    #[test]
    fn neck_rejects_mismatched_levels() {
        let (det, p) = Detector::init(ModelConfig::default(), 0).unwrap();
        let bad = FeaturePyramid {
            levels: vec![FeatureMap::zeros(16, 8, 8), FeatureMap::zeros(32, 3, 4)],
        };
        assert!(det.neck_forward(&p, &bad).is_err());
        let one = FeaturePyramid {
            levels: vec![FeatureMap::zeros(16, 8, 8)],
        };
        assert!(det.neck_forward(&p, &one).is_err());
    }

    #[test]
    fn head_shapes_for_single_class() {
        let cfg = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        let (det, p) = Detector::init(cfg, 0).unwrap();
        let pyr = FeaturePyramid {
            levels: vec![FeatureMap::zeros(32, 8, 8), FeatureMap::zeros(32, 4, 4)],
        };
        let out = det.head_forward(&p, &pyr, (32, 32)).unwrap();
        let l8 = &out.levels[1];
        assert_eq!((l8.class_logits.channels, l8.height(), l8.width()), (2, 4, 4));
        assert_eq!(l8.box_offsets.channels, 4);
        assert_eq!(l8.mask_logits.channels, 14 * 14);
    }

    #[test]
    fn zero_head_gives_uniform_posterior() {
        let cfg = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        let (det, mut p) = Detector::init(cfg, 0).unwrap();
        p.values_mut(Group::Head).iter_mut().for_each(|v| *v = 0.0);
        let out = det.forward(&p, &input(0, 16, 16), (16, 16)).unwrap();
        for l in &out.levels {
            for i in 0..l.height() * l.width() {
                let z0 = l.class_logits.data[i];
                let z1 = l.class_logits.data[l.height() * l.width() + i];
                let p1 = 1.0 / (1.0 + (z0 - z1).exp());
                assert_eq!(p1, 0.5);
            }
        }
    }

    #[test]
    fn decode_rule() {
        let b = decode_box(8, 8, 4, [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b, BBox::new(28.0, 28.0, 8.0, 8.0));
    }

    #[test]
    fn projection_is_unit_norm_and_sized() {
        let (det, p) = Detector::init(ModelConfig::default(), 2).unwrap();
        let r: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let v = det.project(&p, &r).unwrap();
        assert_eq!(v.len(), 16);
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(det.project(&p, &r[..10]).is_err());
    }

    #[test]
    fn small_projection_dims() {
        // D_r = 8 needs a 4-channel stride-8 level.
        let cfg = ModelConfig {
            backbone_channels: [4, 4],
            proj_dim: 4,
            ..ModelConfig::default()
        };
        let (det, p) = Detector::init(cfg, 1).unwrap();
        assert_eq!(cfg.repr_dim(), 8);
        let v = det.project(&p, &[0.3, -0.1, 0.5, 0.2, 1.0, 0.0, -2.0, 0.7]).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn bias_free_projection_is_scale_invariant() {
        let cfg = ModelConfig {
            proj_bias: false,
            ..ModelConfig::default()
        };
        let (det, p) = Detector::init(cfg, 6).unwrap();
        let r: Vec<f64> = (0..64).map(|i| ((i * 13) % 7) as f64 - 2.5).collect();
        let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let a = det.project(&p, &r).unwrap();
        let b = det.project(&p, &r2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_projection_does_not_divide_by_zero() {
        let v = normalize(&[0.0; 4]);
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn composition_matches_fused_forward() {
        let (det, p) = Detector::init(ModelConfig::default(), 9).unwrap();
        for s in 0..20 {
            let x = input(s, 24, 32);
            let composed = det
                .head_forward(&p, &det.neck_forward(&p, &det.backbone_forward(&p, &x).unwrap()).unwrap(), (24, 32))
                .unwrap();
            assert_eq!(composed, det.forward(&p, &x, (24, 32)).unwrap());
        }
    }
}
