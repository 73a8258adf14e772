//! Scalar training objectives: the instance segmentation loss, the
//! contrastive loss and the L²-SP regularizer, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::data::InstanceAnnotation;
use crate::error::{Error, Result};
use crate::model::{location_center, DetectionOutput, OutputGrad};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub clas: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub seg: f64,
    pub contra: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn new(clas: f64, bbox: f64, seg: f64, contra: f64, reg: f64) -> Self {
        Self {
            total: clas + bbox + seg + contra + reg,
            clas,
            bbox,
            seg,
            contra,
            reg,
        }
    }

    pub fn contrastive(contra: f64) -> Self {
        Self::new(0.0, 0.0, 0.0, contra, 0.0)
    }

    pub fn with_reg(self, reg: f64) -> Self {
        Self::new(self.clas, self.bbox, self.seg, self.contra, reg)
    }

    /// Component-wise mean of a non-empty slice.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(sum(|l| l.clas), sum(|l| l.bbox), sum(|l| l.seg), sum(|l| l.contra), sum(|l| l.reg))
    }
}

/// Variant of the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// Positive term included in the denominator; the loss is non-negative.
    #[default]
    Standard,
    /// Denominator sums negatives only; may go negative and needs at least
    /// one negative.
    NegativesOnly,
}

const SMOOTH_L1_BETA: f64 = 1.0;
const UNIT_TOL: f64 = 1e-6;

// ---- target assignment ----

/// Per level, per location (row-major): index of the assigned target, if any.
/// A location takes the smallest-area target whose box contains its anchor
/// point; equal areas keep the earlier target.
pub fn assign_targets(output: &DetectionOutput, targets: &[InstanceAnnotation]) -> Vec<Vec<Option<usize>>> {
    output
        .levels
        .iter()
        .map(|l| {
            let mut out = Vec::with_capacity(l.height() * l.width());
            for row in 0..l.height() {
                for col in 0..l.width() {
                    let (cx, cy) = location_center(row, col, l.stride);
                    let mut best: Option<(usize, f64)> = None;
                    for (k, t) in targets.iter().enumerate() {
                        if t.bbox.contains(cx, cy) && best.is_none_or(|(_, a)| t.bbox.area() < a) {
                            best = Some((k, t.bbox.area()));
                        }
                    }
                    out.push(best.map(|(k, _)| k));
                }
            }
            out
        })
        .collect()
}

/// Ground-truth mask sampled (nearest, at cell centres) on an `m`x`m` grid
/// spanning the target box.
pub fn mask_target_patch(target: &InstanceAnnotation, m: usize) -> Vec<f64> {
    let b = &target.bbox;
    let mask = &target.mask;
    let mut out = Vec::with_capacity(m * m);
    for a in 0..m {
        let y = (b.y + (a as f64 + 0.5) * b.h / m as f64).floor().clamp(0.0, (mask.height - 1) as f64) as usize;
        for c in 0..m {
            let x = (b.x + (c as f64 + 0.5) * b.w / m as f64).floor().clamp(0.0, (mask.width - 1) as f64) as usize;
            out.push(f64::from(mask.get(y, x)));
        }
    }
    out
}

fn validate_targets(output: &DetectionOutput, targets: &[InstanceAnnotation]) -> Result<()> {
    let (h, w) = (output.image_height as f64, output.image_width as f64);
    for (i, t) in targets.iter().enumerate() {
        let b = &t.bbox;
        let finite = [b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite());
        if !finite || b.x < -1e-9 || b.y < -1e-9 || b.right() > w + 1e-9 || b.bottom() > h + 1e-9 || b.w < 0.0 || b.h < 0.0 {
            return Err(Error::arg(format!("target {i} box lies outside the {h}x{w} image")));
        }
        if t.mask.height != output.image_height || t.mask.width != output.image_width {
            return Err(Error::arg(format!("target {i} mask size differs from the image")));
        }
        if t.category == 0 || t.category as usize > output.num_classes {
            return Err(Error::arg(format!("target {i} has category {} outside 1..={}", t.category, output.num_classes)));
        }
    }
    Ok(())
}

// ---- instance loss ----

pub fn instance_loss(output: &DetectionOutput, targets: &[InstanceAnnotation]) -> Result<LossBreakdown> {
    Ok(instance_loss_impl(output, targets, false)?.0)
}

/// Loss together with its gradient w.r.t. every output tensor.
pub fn instance_loss_grad(output: &DetectionOutput, targets: &[InstanceAnnotation]) -> Result<(LossBreakdown, OutputGrad)> {
    let (loss, grad) = instance_loss_impl(output, targets, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn instance_loss_impl(
    output: &DetectionOutput,
    targets: &[InstanceAnnotation],
    want_grad: bool,
) -> Result<(LossBreakdown, Option<OutputGrad>)> {
    validate_targets(output, targets)?;
    let assignment = assign_targets(output, targets);
    let m = output.mask_size;
    let patches: Vec<Vec<f64>> = targets.iter().map(|t| mask_target_patch(t, m)).collect();
    let k1 = output.num_classes + 1;
    let n_loc: usize = output.levels.iter().map(|l| l.height() * l.width()).sum();
    let n_pos = assignment.iter().flatten().filter(|a| a.is_some()).count();
    let mut grad = want_grad.then(|| OutputGrad::zeros_like(output));

    let (mut clas, mut bbox, mut seg) = (0.0, 0.0, 0.0);
    let mut logits = vec![0.0; k1];
    for (li, (level, assigned)) in output.levels.iter().zip(&assignment).enumerate() {
        let hw = level.height() * level.width();
        let s = level.stride as f64;
        for (loc, &target) in assigned.iter().enumerate() {
            let label = target.map_or(0, |k| targets[k].category as usize);
            for (c, z) in logits.iter_mut().enumerate() {
                *z = level.class_logits.data[c * hw + loc];
            }
            let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|z| (z - zmax).exp()).sum();
            let lse = zmax + sum_exp.ln();
            clas += lse - logits[label];
            if let Some(g) = grad.as_mut() {
                let gl = &mut g.levels[li].class_logits.data;
                for (c, z) in logits.iter().enumerate() {
                    let p = (z - lse).exp();
                    gl[c * hw + loc] = (p - f64::from(c == label)) / n_loc as f64;
                }
            }
            let Some(k) = target else { continue };
            let (row, col) = (loc / level.width(), loc % level.width());
            let (cx, cy) = location_center(row, col, level.stride);
            let b = &targets[k].bbox;
            let goal = [(cx - b.x) / s, (cy - b.y) / s, (b.right() - cx) / s, (b.bottom() - cy) / s];
            for (j, &t) in goal.iter().enumerate() {
                let d = level.box_offsets.data[j * hw + loc] - t;
                let (v, dv) = smooth_l1(d);
                bbox += v;
                if let Some(g) = grad.as_mut() {
                    g.levels[li].box_offsets.data[j * hw + loc] = dv / n_pos as f64;
                }
            }
            let patch = &patches[k];
            let scale = 1.0 / (n_pos * m * m) as f64;
            for (p, &t) in patch.iter().enumerate() {
                let z = level.mask_logits.data[p * hw + loc];
                seg += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                if let Some(g) = grad.as_mut() {
                    g.levels[li].mask_logits.data[p * hw + loc] = (sigmoid(z) - t) * scale;
                }
            }
        }
    }
    clas /= n_loc.max(1) as f64;
    if n_pos > 0 {
        bbox /= n_pos as f64;
        seg /= (n_pos * m * m) as f64;
    }
    Ok((LossBreakdown::new(clas, bbox, seg, 0.0, 0.0), grad))
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < SMOOTH_L1_BETA {
        (0.5 * d * d / SMOOTH_L1_BETA, d / SMOOTH_L1_BETA)
    } else {
        (d.abs() - 0.5 * SMOOTH_L1_BETA, d.signum())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---- contrastive loss ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::arg(format!("{what} has dimension {}, expected {dim}", v.len())));
    }
    let n = dot(v, v).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::arg(format!("{what} is not unit norm (norm {n})")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::arg(format!("temperature {tau} must lie in (0, 1]")));
    }
    Ok(())
}

/// Contrastive loss from precomputed similarities `v1·v2` and `v1·k`.
pub fn contrastive_from_similarities(pos: f64, negs: &[f64], tau: f64, form: ContrastiveForm) -> Result<f64> {
    check_tau(tau)?;
    let (loss, _) = similarity_softmax(pos, negs, tau, form)?;
    Ok(loss)
}

/// Returns the loss and the softmax weights (positive first).
fn similarity_softmax(pos: f64, negs: &[f64], tau: f64, form: ContrastiveForm) -> Result<(f64, Vec<f64>)> {
    let include_pos = form == ContrastiveForm::Standard;
    if !include_pos && negs.is_empty() {
        return Err(Error::arg("the negatives-only denominator needs at least one negative"));
    }
    let logits: Vec<f64> = std::iter::once(pos).chain(negs.iter().copied()).map(|s| s / tau).collect();
    let first = usize::from(!include_pos);
    let zmax = logits[first..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits[first..].iter().map(|z| (z - zmax).exp()).sum();
    let lse = zmax + sum.ln();
    let mut weights: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    if !include_pos {
        weights[0] = 0.0;
    }
    let loss = lse - logits[0];
    Ok((if include_pos { loss.max(0.0) } else { loss }, weights))
}

pub fn contrastive_loss(v1: &[f64], v2: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    contrastive_loss_with(v1, v2, negatives, tau, ContrastiveForm::Standard)
}

pub fn contrastive_loss_with(v1: &[f64], v2: &[f64], negatives: &[&[f64]], tau: f64, form: ContrastiveForm) -> Result<f64> {
    Ok(contrastive_loss_grad(v1, v2, negatives, tau, form)?.0)
}

/// Loss and its gradient w.r.t. `v1` (the positive key and negatives are
/// treated as constants).
pub fn contrastive_loss_grad(
    v1: &[f64],
    v2: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    form: ContrastiveForm,
) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    let d = v1.len();
    check_unit(v1, d, "query embedding")?;
    check_unit(v2, d, "key embedding")?;
    for (i, k) in negatives.iter().enumerate() {
        check_unit(k, d, &format!("negative {i}"))?;
    }
    let pos = dot(v1, v2);
    let negs: Vec<f64> = negatives.iter().map(|k| dot(v1, k)).collect();
    let (loss, w) = similarity_softmax(pos, &negs, tau, form)?;
    let mut g: Vec<f64> = v2.iter().map(|x| (w[0] - 1.0) * x / tau).collect();
    for (wk, k) in w[1..].iter().zip(negatives) {
        for (gi, ki) in g.iter_mut().zip(k.iter()) {
            *gi += wk * ki / tau;
        }
    }
    Ok((loss, g))
}

// ---- L²-SP ----

/// `α‖w − w0‖² + (1 − α)‖w‖²`.
pub fn l2sp_penalty(w: &[f64], w0: &[f64], alpha: f64) -> Result<f64> {
    check_l2sp(w, w0, alpha)?;
    Ok(w.iter()
        .zip(w0)
        .map(|(&a, &b)| alpha * (a - b) * (a - b) + (1.0 - alpha) * a * a)
        .sum())
}

/// Adds `scale * ∇Ω` to `grad` and returns `Ω`.
pub fn l2sp_penalty_grad(w: &[f64], w0: &[f64], alpha: f64, scale: f64, grad: &mut [f64]) -> Result<f64> {
    let value = l2sp_penalty(w, w0, alpha)?;
    if grad.len() != w.len() {
        return Err(Error::arg("gradient buffer length differs from the parameter vector"));
    }
    for ((g, &a), &b) in grad.iter_mut().zip(w).zip(w0) {
        *g += scale * (2.0 * alpha * (a - b) + 2.0 * (1.0 - alpha) * a);
    }
    Ok(value)
}

fn check_l2sp(w: &[f64], w0: &[f64], alpha: f64) -> Result<()> {
    if w.len() != w0.len() {
        return Err(Error::arg(format!("parameter length {} differs from anchor length {}", w.len(), w0.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("alpha {alpha} must lie in [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Mask};
    use crate::model::{FeatureMap, LevelOutput};

    fn output(num_classes: usize, m: usize, fill: f64) -> DetectionOutput {
        let level = |stride: usize, n: usize| LevelOutput {
            stride,
            class_logits: FeatureMap::zeros(num_classes + 1, n, n),
            box_offsets: FeatureMap::zeros(4, n, n),
            mask_logits: FeatureMap {
                channels: m * m,
                height: n,
                width: n,
                data: vec![fill; m * m * n * n],
            },
        };
        DetectionOutput {
            image_height: 16,
            image_width: 16,
            num_classes,
            mask_size: m,
            levels: vec![level(4, 4), level(8, 2)],
        }
    }

    fn square(x: usize, y: usize, side: usize, cat: u32) -> InstanceAnnotation {
        let mut mask = Mask::zeros(16, 16);
        for yy in y..y + side {
            for xx in x..x + side {
                mask.set(yy, xx, true);
            }
        }
        InstanceAnnotation {
            category: cat,
            bbox: BBox::new(x as f64, y as f64, side as f64, side as f64),
            mask,
        }
    }

    #[test]
    fn perfect_background_scores_zero() {
        let mut out = output(2, 2, 0.0);
        for l in out.levels.iter_mut() {
            let hw = l.height() * l.width();
            l.class_logits.data[..hw].iter_mut().for_each(|v| *v = 800.0);
        }
        let loss = instance_loss(&out, &[]).unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn half_probability_mask_pixel_costs_ln2() {
        // 1x1 patch, logit 0, target pixel set.
        let out = output(1, 1, 0.0);
        let loss = instance_loss(&out, &[square(2, 2, 5, 1)]).unwrap();
        assert!((loss.seg - 2f64.ln()).abs() < 1e-12, "{}", loss.seg);
        assert!((loss.seg - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn exact_regression_gives_zero_box_loss() {
        let t = square(2, 2, 9, 1);
        let mut out = output(1, 2, 0.0);
        let assignment = assign_targets(&out, std::slice::from_ref(&t));
        for (l, a) in out.levels.iter_mut().zip(&assignment) {
            let (w, hw, s) = (l.width(), l.height() * l.width(), l.stride as f64);
            for (loc, k) in a.iter().enumerate() {
                if k.is_some() {
                    let (cx, cy) = location_center(loc / w, loc % w, l.stride);
                    let goal = [(cx - 2.0) / s, (cy - 2.0) / s, (11.0 - cx) / s, (11.0 - cy) / s];
                    for (j, g) in goal.iter().enumerate() {
                        l.box_offsets.data[j * hw + loc] = *g;
                    }
                }
            }
        }
        let loss = instance_loss(&out, &[t]).unwrap();
        assert!(assignment.iter().flatten().any(Option::is_some));
        assert_eq!(loss.bbox, 0.0);
    }

    #[test]
    fn ties_go_to_smallest_area() {
        let out = output(2, 2, 0.0);
        let big = square(0, 0, 12, 1);
        let small = square(2, 2, 5, 2);
        let a = assign_targets(&out, &[big, small]);
        // location (1,1) at stride 4 sits at (4,4): inside both.
        assert_eq!(a[0][5], Some(1));
        assert_eq!(a[0][0], Some(0));
    }

    #[test]
    fn out_of_image_target_rejected() {
        let out = output(1, 2, 0.0);
        let mut t = square(2, 2, 5, 1);
        t.bbox = BBox::new(12.0, 2.0, 8.0, 3.0);
        assert!(instance_loss(&out, &[t]).is_err());
        let mut t = square(2, 2, 5, 1);
        t.category = 4;
        assert!(instance_loss(&out, &[t]).is_err());
    }

    #[test]
    fn decomposition_holds() {
        let out = output(2, 2, 0.3);
        let l = instance_loss(&out, &[square(1, 1, 6, 1), square(8, 8, 7, 2)]).unwrap();
        assert!((l.total - (l.clas + l.bbox + l.seg + l.contra + l.reg)).abs() < 1e-9);
        assert!(l.clas > 0.0 && l.bbox > 0.0 && l.seg > 0.0);
    }

    #[test]
    fn contrastive_examples() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        assert_eq!(contrastive_loss(&e1, &e1, &[], 0.5).unwrap(), 0.0);
        let l = contrastive_loss(&e1, &e1, &[&e2], 1.0).unwrap();
        assert!((l - 0.31326).abs() < 1e-5, "{l}");
        let l = contrastive_loss(&e1, &e1, &[&e2], 0.07).unwrap();
        let exact = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((l - exact).abs() < 1e-15);
        assert!((l - 6.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn contrastive_rejects_bad_tau_and_vectors() {
        let e1 = [1.0, 0.0];
        assert!(contrastive_loss(&e1, &e1, &[], 0.0).is_err());
        assert!(contrastive_loss(&e1, &e1, &[], 1.5).is_err());
        assert!(contrastive_loss(&e1, &[2.0, 0.0], &[], 0.5).is_err());
        assert!(contrastive_loss_with(&e1, &e1, &[], 0.5, ContrastiveForm::NegativesOnly).is_err());
    }

    #[test]
    fn negatives_only_form_omits_the_positive() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let l = contrastive_loss_with(&e1, &e1, &[&e2], 1.0, ContrastiveForm::NegativesOnly).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2sp_examples() {
        assert_eq!(l2sp_penalty(&[0.3, -1.0], &[0.3, -1.0], 1.0).unwrap(), 0.0);
        assert_eq!(l2sp_penalty(&[1.0, 1.0], &[0.0, 2.0], 0.5).unwrap(), 2.0);
        let w = [0.5, -2.0, 3.0];
        for alpha in [0.0, 0.3, 1.0] {
            let v = l2sp_penalty(&w, &[0.0; 3], alpha).unwrap();
            assert!((v - 13.25).abs() < 1e-12);
        }
        assert!(l2sp_penalty(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(l2sp_penalty(&[1.0], &[1.0], 1.5).is_err());
    }
}
