//! Uncertainty and occlusion heads, and the curriculum adapter that feeds
//! them an `alpha`-scaled copy of the flow.
//!
//! Flow channels enter the heads in feature-grid units (pixels divided by
//! the backbone stride).

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvHead, ConvHeadCache, Grads, ParamStore};
use crate::types::{OcclusionMap, UncertaintyMap};

pub const HEAD_HIDDEN: [usize; 2] = [64, 32];

/// Geometric interpolation between two positive endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub total_steps: usize,
}

impl AlphaSchedule {
    pub fn new(alpha_start: f64, alpha_end: f64, total_steps: usize) -> Result<Self> {
        if !(alpha_start > 0.0 && alpha_end > 0.0) || total_steps == 0 {
            return Err(Error::Config(format!(
                "alpha schedule needs positive endpoints and steps, got {alpha_start} -> {alpha_end} over {total_steps}"
            )));
        }
        Ok(Self { alpha_start, alpha_end, total_steps })
    }

    pub fn stage1(total_steps: usize) -> Self {
        Self { alpha_start: 1e-5, alpha_end: 0.3, total_steps: total_steps.max(1) }
    }

    pub fn stage2(total_steps: usize) -> Self {
        Self { alpha_start: 0.3, alpha_end: 1.0, total_steps: total_steps.max(1) }
    }

    /// `start * (end / start)^(step / total)`; steps past the end are clamped.
    pub fn alpha_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            if step > self.total_steps {
                log::warn!("alpha step {step} beyond schedule length {}, clamped", self.total_steps);
            }
            return self.alpha_end;
        }
        if step == 0 {
            return self.alpha_start;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.alpha_start * (self.alpha_end / self.alpha_start).powf(frac)
    }
}

/// `[F_GA, alpha * forward, alpha * backward]` as one token matrix.
pub fn head_input(f_ga: &ArrayView2<f64>, forward: &ArrayView2<f64>, backward: &ArrayView2<f64>, alpha: f64) -> Result<Array2<f64>> {
    let n = f_ga.nrows();
    if forward.dim() != (n, 2) || backward.dim() != (n, 2) {
        return Err(Error::Shape(format!(
            "head input: F_GA has {n} positions, flows are {:?} and {:?}",
            forward.dim(),
            backward.dim()
        )));
    }
    let f = forward.mapv(|v| alpha * v);
    let b = backward.mapv(|v| alpha * v);
    Ok(concatenate![Axis(1), *f_ga, f, b])
}

#[derive(Debug, Clone, Copy)]
pub struct UoHeads {
    pub uncertainty: ConvHead,
    pub occlusion: ConvHead,
}

#[derive(Debug, Clone)]
pub struct UoCache {
    unc: ConvHeadCache,
    occ: ConvHeadCache,
}

impl UoHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, in_channels: usize, rng: &mut R) -> Self {
        let plan = [in_channels, HEAD_HIDDEN[0], HEAD_HIDDEN[1], 1];
        Self {
            uncertainty: ConvHead::new(store, "heads.uncertainty", plan, rng),
            occlusion: ConvHead::new(store, "heads.occlusion", plan, rng),
        }
    }

    /// Returns per-token log-variance and occlusion logits.
    pub fn forward(&self, store: &ParamStore, input: &ArrayView2<f64>, h: usize, w: usize) -> (Array2<f64>, Array2<f64>, UoCache) {
        let (u, uc) = self.uncertainty.forward(store, input, h, w);
        let (o, oc) = self.occlusion.forward(store, input, h, w);
        (u, o, UoCache { unc: uc, occ: oc })
    }

    /// `d_unc` and `d_occ` are `hw x 1`; returns the gradient of the head input.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &UoCache,
        d_unc: &ArrayView2<f64>,
        d_occ: &ArrayView2<f64>,
        h: usize,
        w: usize,
    ) -> Array2<f64> {
        let mut d = self.uncertainty.backward(store, grads, &cache.unc, d_unc, h, w);
        d += &self.occlusion.backward(store, grads, &cache.occ, d_occ, h, w);
        d
    }
}

/// Run both heads on `[F_GA, alpha * fwd, alpha * bwd]` and shape the result
/// as maps on the `h x w` grid.
#[allow(clippy::too_many_arguments)]
pub fn uo_forward(
    store: &ParamStore,
    heads: &UoHeads,
    f_ga: &ArrayView2<f64>,
    forward: &ArrayView2<f64>,
    backward: &ArrayView2<f64>,
    alpha: f64,
    h: usize,
    w: usize,
) -> Result<(UncertaintyMap, OcclusionMap)> {
    if f_ga.nrows() != h * w {
        return Err(Error::Shape(format!("F_GA has {} positions, grid is {h}x{w}", f_ga.nrows())));
    }
    let input = head_input(f_ga, forward, backward, alpha)?;
    let (u, o, _) = heads.forward(store, &input.view(), h, w);
    let to_map = |t: Array2<f64>| t.into_shape_with_order((h, w)).expect("one channel");
    Ok((UncertaintyMap { log_variance: to_map(u) }, OcclusionMap { logits: to_map(o) }))
}

/// Side branch on the frozen flow head: a residual correction of the
/// forward and backward flow (4 channels, feature-grid units), predicted
/// from the same input as the heads. Its last stage starts at zero, so an
/// untrained branch leaves the backbone flow untouched.
#[derive(Debug, Clone, Copy)]
pub struct AcaBranch {
    pub head: ConvHead,
}

impl AcaBranch {
    pub fn new<R: Rng>(store: &mut ParamStore, in_channels: usize, rng: &mut R) -> Self {
        let head = ConvHead::new(store, "aca.residual", [in_channels, HEAD_HIDDEN[0], HEAD_HIDDEN[1], 4], rng);
        store.slice_mut(head.stages[2].weight).fill(0.0);
        Self { head }
    }

    pub fn forward(&self, store: &ParamStore, input: &ArrayView2<f64>, h: usize, w: usize) -> (Array2<f64>, ConvHeadCache) {
        self.head.forward(store, input, h, w)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &ConvHeadCache,
        d_out: &ArrayView2<f64>,
        h: usize,
        w: usize,
    ) -> Array2<f64> {
        self.head.backward(store, grads, cache, d_out, h, w)
    }
}

/// Split a `hw x (c + 4)` head-input gradient into the `F_GA` part.
pub fn split_fga_grad(d_input: &Array2<f64>, c_ls: usize) -> Array2<f64> {
    d_input.slice(s![.., ..c_ls]).to_owned()
}
