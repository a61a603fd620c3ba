//! Training losses of both stages, each returning its value together with
//! gradients w.r.t. every differentiable input.
//!
//! Stage I: `eps1 * L_occ + L_unc + L_flow`. Stage II point loss:
//! `eps2 * L_track + eps3 * L_occ + L_cons`; flow phases use the
//! unsupervised photometric + smoothness loss.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

use crate::error::{Error, Result};
use crate::geometry::{euclidean_dist, Stencil};
use crate::types::{logistic, Label, PseudoLabelSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub omega: f64,
    pub gamma_seq: f64,
    pub huber_delta: f64,
    pub d_cons: f64,
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eps1: 10.0, eps2: 1.2, eps3: 10.0, omega: 0.6, gamma_seq: 0.8, huber_delta: 1.0, d_cons: 8.0, lambda_smooth: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eps1, self.eps2, self.eps3, self.omega, self.gamma_seq, self.huber_delta, self.d_cons, self.lambda_smooth];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// `d huber / d r`.
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r <= delta {
        r
    } else {
        delta
    }
}

/// Huber of the length of `e`, with its gradient w.r.t. `e` (well defined at 0).
fn huber_vec(e: [f64; 2], delta: f64) -> (f64, [f64; 2]) {
    let r = e[0].hypot(e[1]);
    if r <= delta {
        (0.5 * r * r, e)
    } else {
        (delta * (r - 0.5 * delta), [delta * e[0] / r, delta * e[1] / r])
    }
}

fn check_finite(name: &str, it: impl IntoIterator<Item = f64>) -> Result<()> {
    if it.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct UncLoss {
    pub value: f64,
    pub d_flow: Array3<f64>,
    pub d_log_variance: Array2<f64>,
}

/// Mean over pixels of `huber(|x - x*|) / (2 sigma^2) + log(sigma^2) / 2`.
pub fn loss_unc_stage1(flow: &ArrayView3<f64>, flow_gt: &ArrayView3<f64>, log_variance: &ArrayView2<f64>, delta: f64) -> Result<UncLoss> {
    let (h, w, _) = flow.dim();
    if flow_gt.dim() != flow.dim() || log_variance.dim() != (h, w) {
        return Err(Error::Shape(format!("uncertainty loss: flow {:?}, gt {:?}, log-variance {:?}", flow.dim(), flow_gt.dim(), log_variance.dim())));
    }
    check_finite("flow", flow.iter().copied())?;
    check_finite("ground-truth flow", flow_gt.iter().copied())?;
    check_finite("log-variance", log_variance.iter().copied())?;
    let n = (h * w) as f64;
    let mut value = 0.0;
    let mut d_flow = Array3::zeros((h, w, 2));
    let mut d_lv = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let e = [flow[[y, x, 0]] - flow_gt[[y, x, 0]], flow[[y, x, 1]] - flow_gt[[y, x, 1]]];
            let (hv, hg) = huber_vec(e, delta);
            let s = log_variance[[y, x]];
            let inv = (-s).exp();
            value += 0.5 * hv * inv + 0.5 * s;
            d_flow[[y, x, 0]] = 0.5 * inv * hg[0] / n;
            d_flow[[y, x, 1]] = 0.5 * inv * hg[1] / n;
            d_lv[[y, x]] = (0.5 - 0.5 * hv * inv) / n;
        }
    }
    Ok(UncLoss { value: value / n, d_flow, d_log_variance: d_lv })
}

/// Numerically stable `-[y log p + (1 - y) log(1 - p)]` with `p = logistic(l)`.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean BCE and its gradient w.r.t. the logits.
pub fn loss_occ_bce(logits: &ArrayView2<f64>, occluded: &ArrayView2<bool>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != occluded.dim() {
        return Err(Error::Shape(format!("occlusion loss: logits {:?}, target {:?}", logits.dim(), occluded.dim())));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    Zip::from(&mut grad).and(logits).and(occluded).for_each(|g, &l, &o| {
        let t = if o { 1.0 } else { 0.0 };
        value += bce_with_logit(l, t);
        *g = (logistic(l) - t) / n;
    });
    Ok((value / n, grad))
}

/// Sequence loss `sum_k gamma^(K-k) * mean_px |flow_k - gt|_1`, with the
/// gradient for each estimate.
pub fn loss_flow_stage1(sequence: &[ArrayView3<f64>], flow_gt: &ArrayView3<f64>, gamma: f64) -> Result<(f64, Vec<Array3<f64>>)> {
    if sequence.is_empty() {
        return Err(Error::Invalid("flow sequence loss needs at least one estimate".into()));
    }
    let k_total = sequence.len();
    let (h, w, _) = flow_gt.dim();
    let n = (h * w) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(k_total);
    for (k, est) in sequence.iter().enumerate() {
        if est.dim() != flow_gt.dim() {
            return Err(Error::Shape(format!("flow estimate {k} is {:?}, gt is {:?}", est.dim(), flow_gt.dim())));
        }
        let weight = gamma.powi((k_total - 1 - k) as i32);
        let mut g = Array3::zeros(flow_gt.dim());
        let mut l1 = 0.0;
        Zip::from(&mut g).and(est).and(flow_gt).for_each(|g, &e, &t| {
            let d = e - t;
            l1 += d.abs();
            *g = if d > 0.0 {
                weight / n
            } else if d < 0.0 {
                -weight / n
            } else {
                0.0
            };
        });
        value += weight * l1 / n;
        grads.push(g);
    }
    Ok((value, grads))
}

pub const CHARBONNIER_EPS: f64 = 1e-6;
pub const CHARBONNIER_POWER: f64 = 0.45;
/// Edge weight `exp(-EDGE_SCALE * mean |dI|)` in the smoothness term.
pub const EDGE_SCALE: f64 = 10.0;

fn charbonnier(d: f64) -> (f64, f64) {
    let base = d * d + CHARBONNIER_EPS;
    let v = base.powf(CHARBONNIER_POWER) - CHARBONNIER_EPS.powf(CHARBONNIER_POWER);
    let g = 2.0 * CHARBONNIER_POWER * d * base.powf(CHARBONNIER_POWER - 1.0);
    (v, g)
}

/// Pixels where the forward flow is not confirmed by the backward flow, or
/// leaves the frame: `|f + b(x + f)| > 0.05 (|f|^2 + |b(x + f)|^2) + 0.5`.
pub fn fb_occlusion(fwd: &ArrayView3<f64>, bwd: &ArrayView3<f64>) -> Array2<bool> {
    let (h, w, _) = fwd.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let f = [fwd[[y, x, 0]], fwd[[y, x, 1]]];
        let st = Stencil::new(h, w, x as f64 + f[0], y as f64 + f[1]);
        let b = [st.sample3(bwd, 0), st.sample3(bwd, 1)];
        let diff = (f[0] + b[0]).hypot(f[1] + b[1]);
        let mag = f[0] * f[0] + f[1] * f[1] + b[0] * b[0] + b[1] * b[1];
        st.clamped || diff > 0.05 * mag + 0.5
    })
}

/// Masked Charbonnier between `a` and `b` sampled along `flow`; returns the
/// mean over pixels and channels and its gradient w.r.t. `flow`.
fn photometric(a: &ArrayView3<f64>, b: &ArrayView3<f64>, flow: &ArrayView3<f64>, mask: &Array2<bool>) -> (f64, Array3<f64>) {
    let (h, w, c) = a.dim();
    let n = (h * w * c) as f64;
    let mut value = 0.0;
    let mut grad = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                continue;
            }
            let st = Stencil::new(h, w, x as f64 + flow[[y, x, 0]], y as f64 + flow[[y, x, 1]]);
            for ch in 0..c {
                let d = a[[y, x, ch]] - st.sample3(b, ch);
                let (v, g) = charbonnier(d);
                value += v;
                let (gx, gy) = st.gradient3(b, ch);
                grad[[y, x, 0]] -= g * gx / n;
                grad[[y, x, 1]] -= g * gy / n;
            }
        }
    }
    (value / n, grad)
}

/// Edge-aware first-order smoothness: average of the horizontal and vertical
/// pair means of `exp(-EDGE_SCALE * mean_c |dI|) * sum_c |df|`.
pub fn smoothness(flow: &ArrayView3<f64>, image: &ArrayView3<f64>) -> (f64, Array3<f64>) {
    let (h, w, _) = flow.dim();
    let c = image.dim().2;
    let mut value = 0.0;
    let mut grad = Array3::zeros((h, w, 2));
    for (dy, dx) in [(0usize, 1usize), (1, 0)] {
        if h <= dy || w <= dx {
            continue;
        }
        let pairs = ((h - dy) * (w - dx)) as f64;
        for y in 0..h - dy {
            for x in 0..w - dx {
                let mut di = 0.0;
                for ch in 0..c {
                    di += (image[[y + dy, x + dx, ch]] - image[[y, x, ch]]).abs();
                }
                let weight = (-EDGE_SCALE * di / c as f64).exp();
                for ch in 0..2 {
                    let d = flow[[y + dy, x + dx, ch]] - flow[[y, x, ch]];
                    value += 0.5 * weight * d.abs() / pairs;
                    let s = 0.5 * weight * d.signum() * f64::from(d != 0.0) / pairs;
                    grad[[y + dy, x + dx, ch]] += s;
                    grad[[y, x, ch]] -= s;
                }
            }
        }
    }
    (value, grad)
}

#[derive(Debug, Clone)]
pub struct UflowLoss {
    pub value: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub d_fwd: Array3<f64>,
    pub d_bwd: Array3<f64>,
}

/// Photometric + smoothness loss in both directions. The consistency masks
/// are treated as constants.
pub fn loss_uflow_stage2(
    a: &ArrayView3<f64>,
    b: &ArrayView3<f64>,
    fwd: &ArrayView3<f64>,
    bwd: &ArrayView3<f64>,
    lambda_smooth: f64,
) -> Result<UflowLoss> {
    let (h, w, _) = a.dim();
    if b.dim() != a.dim() || fwd.dim() != (h, w, 2) || bwd.dim() != (h, w, 2) {
        return Err(Error::Shape(format!("uflow loss: frames {:?}/{:?}, flows {:?}/{:?}", a.dim(), b.dim(), fwd.dim(), bwd.dim())));
    }
    let mask_f = fb_occlusion(fwd, bwd);
    let mask_b = fb_occlusion(bwd, fwd);
    let (pf, gpf) = photometric(a, b, fwd, &mask_f);
    let (pb, gpb) = photometric(b, a, bwd, &mask_b);
    let (sf, gsf) = smoothness(fwd, a);
    let (sb, gsb) = smoothness(bwd, b);
    let d_fwd = gpf + &(gsf * lambda_smooth);
    let d_bwd = gpb + &(gsb * lambda_smooth);
    let photometric = pf + pb;
    let smooth = lambda_smooth * (sf + sb);
    Ok(UflowLoss { value: photometric + smooth, photometric, smoothness: smooth, d_fwd, d_bwd })
}

/// A predicted point at one frame, with its head outputs sampled there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPrediction {
    pub x: f64,
    pub y: f64,
    /// Confidence logit `U`; the model uses `U = -log(sigma^2)`.
    pub confidence: f64,
    pub occlusion_logit: f64,
}

/// Predictions keyed by `(frame, point_id)`.
pub type Predictions = BTreeMap<(usize, u32), PointPrediction>;

/// Gradients for each prediction, same keys.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointGrad {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub occlusion_logit: f64,
}

pub type PointGrads = BTreeMap<(usize, u32), PointGrad>;

fn lookup(pred: &Predictions, frame: usize, id: u32) -> Result<&PointPrediction> {
    pred.get(&(frame, id)).ok_or(Error::UnmatchedLabel { point_id: id, frame })
}

/// Labeled intermediate frames with at least one visible label.
fn visible_frames(pseudo: &PseudoLabelSet) -> Vec<(usize, Vec<&Label>)> {
    pseudo
        .labels
        .iter()
        .filter(|(&t, _)| t > 0 && t < pseudo.last_frame)
        .map(|(&t, ls)| (t, ls.iter().filter(|l| l.visible).collect::<Vec<_>>()))
        .filter(|(_, ls)| !ls.is_empty())
        .collect()
}

/// `omega * mean_t mean_m huber(|P - P*|)` over intermediate pseudo labels
/// plus `mean_m huber(|P_T - P_T*|)` over ground truth at the last frame.
/// Empty sums contribute 0.
pub fn loss_track_stage2(pred: &Predictions, pseudo: &PseudoLabelSet, gt_last: &[Label], w: &LossWeights) -> Result<(f64, PointGrads)> {
    let mut grads = PointGrads::new();
    let mut value = 0.0;
    let frames = visible_frames(pseudo);
    let nf = frames.len() as f64;
    for (t, labels) in &frames {
        let m = labels.len() as f64;
        for l in labels {
            let p = lookup(pred, *t, l.point_id)?;
            let (hv, hg) = huber_vec([p.x - l.x, p.y - l.y], w.huber_delta);
            value += w.omega * hv / (nf * m);
            let g = grads.entry((*t, l.point_id)).or_default();
            g.x += w.omega * hg[0] / (nf * m);
            g.y += w.omega * hg[1] / (nf * m);
        }
    }
    let last: Vec<&Label> = gt_last.iter().filter(|l| l.visible).collect();
    let m = last.len() as f64;
    for l in &last {
        let p = lookup(pred, pseudo.last_frame, l.point_id)?;
        let (hv, hg) = huber_vec([p.x - l.x, p.y - l.y], w.huber_delta);
        value += hv / m;
        let g = grads.entry((pseudo.last_frame, l.point_id)).or_default();
        g.x += hg[0] / m;
        g.y += hg[1] / m;
    }
    Ok((value, grads))
}

/// Mean over labeled intermediate frames of the mean cross entropy between
/// `logistic(U)` and `1[|P - P*| < d_cons]`.
pub fn loss_cons_stage2(pred: &Predictions, pseudo: &PseudoLabelSet, w: &LossWeights) -> Result<(f64, PointGrads)> {
    let mut grads = PointGrads::new();
    let mut value = 0.0;
    let frames = visible_frames(pseudo);
    let nf = frames.len() as f64;
    for (t, labels) in &frames {
        let m = labels.len() as f64;
        for l in labels {
            let p = lookup(pred, *t, l.point_id)?;
            let target = if euclidean_dist([p.x, p.y], l.position()) < w.d_cons { 1.0 } else { 0.0 };
            value += bce_with_logit(p.confidence, target) / (nf * m);
            grads.entry((*t, l.point_id)).or_default().confidence += (logistic(p.confidence) - target) / (nf * m);
        }
    }
    Ok((value, grads))
}

/// Mean BCE of occlusion logits against `(frame, id, occluded)` targets.
pub fn loss_occ_points(pred: &Predictions, targets: &[(usize, u32, bool)]) -> Result<(f64, PointGrads)> {
    let mut grads = PointGrads::new();
    if targets.is_empty() {
        return Ok((0.0, grads));
    }
    let n = targets.len() as f64;
    let mut value = 0.0;
    for &(t, id, occ) in targets {
        let p = lookup(pred, t, id)?;
        let y = if occ { 1.0 } else { 0.0 };
        value += bce_with_logit(p.occlusion_logit, y) / n;
        grads.entry((t, id)).or_default().occlusion_logit += (logistic(p.occlusion_logit) - y) / n;
    }
    Ok((value, grads))
}

pub fn loss_point_stage2(track: f64, occ: f64, cons: f64, w: &LossWeights) -> f64 {
    w.eps2 * track + w.eps3 * occ + cons
}

pub fn loss_total_stage1(occ: f64, unc: f64, flow: f64, w: &LossWeights) -> f64 {
    w.eps1 * occ + unc + flow
}

/// `a += scale * b`, key by key.
pub fn accumulate(a: &mut PointGrads, b: &PointGrads, scale: f64) {
    for (k, g) in b {
        let e = a.entry(*k).or_default();
        e.x += scale * g.x;
        e.y += scale * g.y;
        e.confidence += scale * g.confidence;
        e.occlusion_logit += scale * g.occlusion_logit;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, s: f64) -> Array3<f64> {
        Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-s..s))
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
    }

    #[test]
    fn unc_examples() {
        let f = Array3::<f64>::zeros((4, 4, 2));
        let lv = Array2::zeros((4, 4));
        assert_eq!(loss_unc_stage1(&f.view(), &f.view(), &lv.view(), 1.0).unwrap().value, 0.0);
        let mut g = f.clone();
        g.slice_mut(ndarray::s![.., .., 0]).fill(0.5);
        assert!((loss_unc_stage1(&f.view(), &g.view(), &lv.view(), 1.0).unwrap().value - 0.0625).abs() < 1e-12);
        let mut bad = lv.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(loss_unc_stage1(&f.view(), &g.view(), &bad.view(), 1.0).is_err());
    }

    #[test]
    fn occ_examples() {
        let logits = Array2::from_shape_vec((1, 2), vec![20.0, -20.0]).unwrap();
        let gt = Array2::from_shape_vec((1, 2), vec![true, false]).unwrap();
        assert!(loss_occ_bce(&logits.view(), &gt.view()).unwrap().0 < 1e-6);
        let z = Array2::zeros((3, 3));
        let any = Array2::from_elem((3, 3), true);
        assert!((loss_occ_bce(&z.view(), &any.view()).unwrap().0 - 2f64.ln()).abs() < 1e-12);
        let one = Array2::from_elem((1, 1), 1.0);
        let t = Array2::from_elem((1, 1), true);
        assert!((loss_occ_bce(&one.view(), &t.view()).unwrap().0 - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn flow_sequence_examples() {
        let gt = Array3::<f64>::zeros((2, 2, 2));
        assert_eq!(loss_flow_stage1(&[gt.view()], &gt.view(), 0.8).unwrap().0, 0.0);
        let mut e1 = gt.clone();
        e1.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        assert_eq!(loss_flow_stage1(&[e1.view()], &gt.view(), 0.8).unwrap().0, 1.0);
        let mut e2 = gt.clone();
        e2.slice_mut(ndarray::s![.., .., 1]).fill(-0.5);
        let (v, _) = loss_flow_stage1(&[e1.view(), e2.view()], &gt.view(), 0.8).unwrap();
        assert!((v - 1.3).abs() < 1e-12);
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        crate::data::texture::value_noise_frame(h, w, seed, 0).pixels
    }

    #[test]
    fn uflow_static_and_shift() {
        let a = noise_image(16, 16, 1);
        let z = Array3::zeros((16, 16, 2));
        let l = loss_uflow_stage2(&a.view(), &a.view(), &z.view(), &z.view(), 0.05).unwrap();
        assert_eq!(l.value, 0.0);

        let big = noise_image(32, 32, 2);
        let b = Array3::from_shape_fn((32, 32, 3), |(y, x, c)| big[[y, x.saturating_sub(2), c]]);
        let mut fwd = Array3::zeros((32, 32, 2));
        fwd.slice_mut(ndarray::s![.., .., 0]).fill(2.0);
        let bwd = fwd.mapv(|v: f64| -v);
        let warped = crate::geometry::warp(&b.view(), &fwd.view());
        let mut err: f64 = 0.0;
        for y in 2..30 {
            for x in 2..28 {
                for c in 0..3 {
                    err = err.max(charbonnier(big[[y, x, c]] - warped[[y, x, c]]).0);
                }
            }
        }
        assert!(err < 1e-3);
        let (s, _) = smoothness(&fwd.view(), &big.view());
        assert_eq!(s, 0.0);
        let _ = bwd;
    }

    #[test]
    fn track_examples() {
        let w = LossWeights::default();
        let mut pseudo = PseudoLabelSet { last_frame: 2, ..Default::default() };
        pseudo.labels.insert(1, vec![Label { point_id: 1001, x: 5.0, y: 5.0, visible: true }]);
        let mut pred = Predictions::new();
        let pp = |x, y| PointPrediction { x, y, confidence: 0.0, occlusion_logit: 0.0 };
        pred.insert((1, 1001), pp(5.5, 5.0));
        pred.insert((2, 0), pp(1.0, 1.0));
        let gt = [Label { point_id: 0, x: 1.0, y: 1.0, visible: true }];
        let (v, _) = loss_track_stage2(&pred, &pseudo, &gt, &w).unwrap();
        assert!((v - 0.075).abs() < 1e-12);

        let empty = PseudoLabelSet { last_frame: 2, ..Default::default() };
        pred.insert((2, 0), pp(3.0, 1.0));
        assert!((loss_track_stage2(&pred, &empty, &gt, &w).unwrap().0 - 1.5).abs() < 1e-12);

        let missing = [Label { point_id: 9, x: 0.0, y: 0.0, visible: true }];
        assert!(matches!(loss_track_stage2(&pred, &empty, &missing, &w), Err(Error::UnmatchedLabel { point_id: 9, frame: 2 })));
    }

    #[test]
    fn cons_examples_and_boundary() {
        let w = LossWeights::default();
        let mut pseudo = PseudoLabelSet { last_frame: 3, ..Default::default() };
        pseudo.labels.insert(1, vec![Label { point_id: 7, x: 0.0, y: 0.0, visible: true }]);
        let at = |d: f64, u: f64| {
            let mut p = Predictions::new();
            p.insert((1, 7), PointPrediction { x: d, y: 0.0, confidence: u, occlusion_logit: 0.0 });
            loss_cons_stage2(&p, &pseudo, &w).unwrap().0
        };
        let logit_999 = (0.999f64 / 0.001).ln();
        assert!((at(3.0, logit_999) - (-(0.999f64).ln())).abs() < 1e-9);
        assert!((at(3.0, 0.0) - 2f64.ln()).abs() < 1e-12);
        assert!(at(10.0, -40.0) < 1e-12);
        // exactly D is outside the strict radius
        assert!(at(8.0, -40.0) < 1e-12);
        assert!(at(8.0, 40.0) > 30.0);
    }

    #[test]
    fn coefficient_wiring() {
        let w = LossWeights::default();
        assert!((loss_point_stage2(0.1, 0.2, 0.3, &w) - 2.42).abs() < 1e-12);
        assert_eq!(loss_point_stage2(1.0, 0.0, 0.0, &w), 1.2);
        assert!((loss_total_stage1(0.1, 0.2, 0.3, &w) - 1.5).abs() < 1e-12);
        assert_eq!(loss_total_stage1(0.0, -0.5, 0.0, &w), -0.5);
    }

    fn rel_ok(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4)
    }

    #[test]
    fn unc_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand3(&mut rng, 4, 4, 2, 2.0);
        let g = rand3(&mut rng, 4, 4, 2, 2.0);
        let lv = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let base = loss_unc_stage1(&f.view(), &g.view(), &lv.view(), 1.0).unwrap();
        let h = 1e-4;
        for idx in [(0, 0, 0), (1, 2, 1), (3, 3, 0)] {
            let mut p = f.clone();
            p[idx] += h;
            let mut m = f.clone();
            m[idx] -= h;
            let fd = (loss_unc_stage1(&p.view(), &g.view(), &lv.view(), 1.0).unwrap().value
                - loss_unc_stage1(&m.view(), &g.view(), &lv.view(), 1.0).unwrap().value)
                / (2.0 * h);
            assert!(rel_ok(fd, base.d_flow[idx]));
        }
        let mut p = lv.clone();
        p[[2, 1]] += h;
        let mut m = lv.clone();
        m[[2, 1]] -= h;
        let fd = (loss_unc_stage1(&f.view(), &g.view(), &p.view(), 1.0).unwrap().value
            - loss_unc_stage1(&f.view(), &g.view(), &m.view(), 1.0).unwrap().value)
            / (2.0 * h);
        assert!(rel_ok(fd, base.d_log_variance[[2, 1]]));
    }

    #[test]
    fn uflow_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = noise_image(8, 8, 3);
        let b = noise_image(8, 8, 4);
        let fwd = rand3(&mut rng, 8, 8, 2, 0.6);
        let bwd = rand3(&mut rng, 8, 8, 2, 0.6);
        let base = loss_uflow_stage2(&a.view(), &b.view(), &fwd.view(), &bwd.view(), 0.05).unwrap();
        let h = 1e-5;
        let mask = fb_occlusion(&fwd.view(), &bwd.view());
        for idx in [(2, 3, 0), (4, 4, 1), (5, 2, 0)] {
            let mut p = fwd.clone();
            p[idx] += h;
            let mut m = fwd.clone();
            m[idx] -= h;
            // hold the masks fixed as the loss does
            let lp = photometric(&a.view(), &b.view(), &p.view(), &mask).0 + 0.05 * smoothness(&p.view(), &a.view()).0;
            let lm = photometric(&a.view(), &b.view(), &m.view(), &mask).0 + 0.05 * smoothness(&m.view(), &a.view()).0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_ok(fd, base.d_fwd[idx]), "{fd} vs {}", base.d_fwd[idx]);
        }
    }

    proptest! {
        #[test]
        fn track_loss_is_translation_invariant(dx in -20.0f64..20.0, dy in -20.0f64..20.0, e in 0.0f64..4.0) {
            let w = LossWeights::default();
            let make = |ox: f64, oy: f64| {
                let mut pseudo = PseudoLabelSet { last_frame: 4, ..Default::default() };
                pseudo.labels.insert(2, vec![Label { point_id: 1000, x: 10.0 + ox, y: 3.0 + oy, visible: true }]);
                let mut pred = Predictions::new();
                pred.insert((2, 1000), PointPrediction { x: 10.0 + e + ox, y: 3.0 + oy, confidence: 0.0, occlusion_logit: 0.0 });
                pred.insert((4, 0), PointPrediction { x: ox, y: e + oy, confidence: 0.0, occlusion_logit: 0.0 });
                let gt = [Label { point_id: 0, x: ox, y: oy, visible: true }];
                loss_track_stage2(&pred, &pseudo, &gt, &w).unwrap().0
            };
            prop_assert!((make(0.0, 0.0) - make(dx, dy)).abs() < 1e-9);
            prop_assert!(make(0.0, 0.0) >= 0.0);
        }

        #[test]
        fn occ_and_flow_losses_nonnegative(l in -30.0f64..30.0, t in any::<bool>(), d in -5.0f64..5.0) {
            let (v, _) = loss_occ_bce(&Array2::from_elem((1, 1), l).view(), &Array2::from_elem((1, 1), t).view()).unwrap();
            prop_assert!(v >= 0.0);
            let gt = Array3::zeros((2, 2, 2));
            let est = Array3::from_elem((2, 2, 2), d);
            prop_assert!(loss_flow_stage1(&[est.view()], &gt.view(), 0.8).unwrap().0 >= 0.0);
            prop_assert!(huber(d.abs(), 1.0) >= 0.0);
        }
    }
}
