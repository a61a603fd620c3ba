//! Frozen flow backbone and semantic embedder interfaces, with small
//! deterministic implementations that need no pretrained weights.
//!
//! Real networks plug in by implementing [`FlowBackbone`] or
//! [`SemanticEmbedder`]; nothing downstream depends on the toy internals.

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{avg_pool, to_feature_coord, Stencil};
use crate::types::{FlowField, Frame};

/// The four backbone intermediates on the strided feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MiddleFeatureSet {
    pub cost_volume: Array3<f64>,
    pub hidden_state: Array3<f64>,
    pub context: Array3<f64>,
    pub motion: Array3<f64>,
}

impl MiddleFeatureSet {
    pub fn as_array(&self) -> [&Array3<f64>; 4] {
        [&self.cost_volume, &self.hidden_state, &self.context, &self.motion]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowBackboneOutput {
    pub forward_flow: FlowField,
    pub backward_flow: FlowField,
    pub middles: MiddleFeatureSet,
    /// Iterative forward estimates, coarse to fine; the last equals `forward_flow`.
    pub refinement_sequence: Vec<FlowField>,
}

/// Patch features resampled to frame resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub features: Array3<f64>,
}

pub trait FlowBackbone: Send + Sync {
    fn compute_flow_features(&self, a: &Frame, b: &Frame) -> Result<FlowBackboneOutput>;
    fn middle_channels(&self) -> [usize; 4];
    /// Stride of the middle-feature grid relative to the frame.
    fn stride(&self) -> usize;
    /// Hash of every internal parameter.
    fn fingerprint(&self) -> String;
}

pub trait SemanticEmbedder: Send + Sync {
    fn embed_semantic(&self, a: &Frame) -> Result<SemanticEmbedding>;
    fn channels(&self) -> usize;
    fn fingerprint(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    External,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "external" => Ok(Self::External),
            other => Err(Error::Config(format!("unknown backend kind `{other}` (expected toy or external)"))),
        }
    }
}

const MATCH_PATCH_RADIUS: usize = 2;
const COST_RADIUS: isize = 2;
const ITERATIONS: usize = 4;

/// Coarse-to-fine block matcher over an image pyramid with fixed random
/// feature maps for the middle features.
#[derive(Debug, Clone)]
pub struct ToyFlowBackbone {
    seed: u64,
    stride: usize,
    channels: usize,
    /// 3x3x3 context filters, `27 x C`.
    context_filters: Array2<f64>,
    /// `25 x C` projection of the local cost volume.
    cost_proj: Array2<f64>,
    hidden_rec: Array2<f64>,
    hidden_in: Array2<f64>,
    motion_proj: Array2<f64>,
}

impl ToyFlowBackbone {
    pub fn new(seed: u64, stride: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10f_b0e5);
        let mut mat = |r: usize, c: usize, scale: f64| {
            let b = scale / (r as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-b..b))
        };
        let ncost = ((2 * COST_RADIUS + 1) * (2 * COST_RADIUS + 1)) as usize;
        Self {
            seed,
            stride,
            channels,
            context_filters: mat(27, channels, 3.0),
            cost_proj: mat(ncost, channels, 3.0),
            hidden_rec: mat(channels, channels, 0.5),
            hidden_in: mat(3, channels, 2.0),
            motion_proj: mat(7, channels, 2.0),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Forward flow only, with the refinement sequence and final cost volume.
    fn match_pyramid(&self, a: &Frame, b: &Frame) -> (Vec<FlowField>, Array3<f64>) {
        let (h, w) = a.size();
        let levels = pyramid_levels(h, w);
        let pa = build_pyramid(&a.pixels, levels);
        let pb = build_pyramid(&b.pixels, levels);
        let schedule = iteration_schedule(levels);
        let top = levels - 1;
        let (th, tw, _) = pa[top].dim();
        let mut flow = Array3::<f64>::zeros((th, tw, 2));
        let mut sequence = Vec::with_capacity(ITERATIONS);
        for level in (0..levels).rev() {
            if level != top {
                flow = upsample2(&flow, pa[level].dim().0, pa[level].dim().1);
            }
            let radius = if level == top && levels > 1 { 4 } else { 2 };
            for _ in 0..schedule[level] {
                refine_once(&pa[level].view(), &pb[level].view(), &mut flow, radius, level == 0);
                let scale = (1usize << level) as f64;
                let full = if level == 0 { flow.clone() } else { resize_flow(&flow, h, w, scale) };
                sequence.push(FlowField { vectors: full, source_index: a.index, target_index: b.index });
            }
        }
        let costs = cost_volume(&a.pixels.view(), &b.pixels.view(), &flow, COST_RADIUS);
        (sequence, costs)
    }

    fn middles(&self, a: &Frame, sequence: &[FlowField], costs: &Array3<f64>) -> MiddleFeatureSet {
        let s = self.stride;
        let c = self.channels;
        let (h, w) = a.size();

        let affinity = costs.mapv(|v| (-v / 0.02).exp());
        let cost_tokens = tokens(&affinity.view()).dot(&self.cost_proj).mapv(f64::tanh);
        let cost_volume = avg_pool(&untokens(cost_tokens, h, w).view(), s);

        let centered = a.pixels.mapv(|v| v - 0.5);
        let ctx = conv3x3_valid_same(&centered.view(), &self.context_filters).mapv(|v| v.max(0.0));
        let context = avg_pool(&ctx.view(), s);

        let (fh, fw, _) = context.dim();
        let mut hidden = Array2::<f64>::zeros((fh * fw, c));
        let mut prev = Array3::<f64>::zeros((fh, fw, 2));
        for est in sequence {
            let pooled = avg_pool(&est.vectors.view(), s);
            let mut input = Array2::<f64>::zeros((fh * fw, 3));
            for i in 0..fh {
                for j in 0..fw {
                    let r = i * fw + j;
                    input[[r, 0]] = pooled[[i, j, 0]] / 8.0;
                    input[[r, 1]] = pooled[[i, j, 1]] / 8.0;
                    let dx = pooled[[i, j, 0]] - prev[[i, j, 0]];
                    let dy = pooled[[i, j, 1]] - prev[[i, j, 1]];
                    input[[r, 2]] = dx.hypot(dy) / 4.0;
                }
            }
            hidden = (hidden.dot(&self.hidden_rec) + input.dot(&self.hidden_in)).mapv(f64::tanh);
            prev = pooled;
        }
        let hidden_state = untokens(hidden, fh, fw);

        let flow = avg_pool(&sequence.last().expect("non-empty").vectors.view(), s);
        let min_cost = avg_pool(
            &costs.map_axis(Axis(2), |v| v.iter().cloned().fold(f64::INFINITY, f64::min)).insert_axis(Axis(2)).view(),
            s,
        );
        let mut motion_in = Array2::<f64>::zeros((fh * fw, 7));
        for i in 0..fh {
            for j in 0..fw {
                let r = i * fw + j;
                let (il, ir) = (i.saturating_sub(1), (i + 1).min(fh - 1));
                let (jl, jr) = (j.saturating_sub(1), (j + 1).min(fw - 1));
                motion_in[[r, 0]] = flow[[i, j, 0]] / 8.0;
                motion_in[[r, 1]] = flow[[i, j, 1]] / 8.0;
                for ch in 0..2 {
                    motion_in[[r, 2 + 2 * ch]] = (flow[[i, jr, ch]] - flow[[i, jl, ch]]) / 2.0;
                    motion_in[[r, 3 + 2 * ch]] = (flow[[ir, j, ch]] - flow[[il, j, ch]]) / 2.0;
                }
                motion_in[[r, 6]] = min_cost[[i, j, 0]] * 10.0;
            }
        }
        let motion = untokens(motion_in.dot(&self.motion_proj).mapv(f64::tanh), fh, fw);
        MiddleFeatureSet { cost_volume, hidden_state, context, motion }
    }
}

impl FlowBackbone for ToyFlowBackbone {
    fn compute_flow_features(&self, a: &Frame, b: &Frame) -> Result<FlowBackboneOutput> {
        if a.size() != b.size() {
            return Err(Error::FrameSizeMismatch(a.height(), a.width(), b.height(), b.width()));
        }
        let (sequence, costs) = self.match_pyramid(a, b);
        let (back_seq, _) = self.match_pyramid(b, a);
        let middles = self.middles(a, &sequence, &costs);
        Ok(FlowBackboneOutput {
            forward_flow: sequence.last().expect("non-empty").clone(),
            backward_flow: back_seq.last().expect("non-empty").clone(),
            middles,
            refinement_sequence: sequence,
        })
    }

    fn middle_channels(&self) -> [usize; 4] {
        [self.channels; 4]
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for m in [&self.context_filters, &self.cost_proj, &self.hidden_rec, &self.hidden_in, &self.motion_proj] {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn pyramid_levels(h: usize, w: usize) -> usize {
    let mut levels = 1;
    while levels < 3 && h.min(w) >> levels >= 16 {
        levels += 1;
    }
    levels
}

/// Iterations per level, finest first; the coarse levels get one each.
fn iteration_schedule(levels: usize) -> Vec<usize> {
    let mut sched = vec![1; levels];
    sched[0] = ITERATIONS - (levels - 1);
    sched
}

fn build_pyramid(img: &Array3<f64>, levels: usize) -> Vec<Array3<f64>> {
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = avg_pool(&out.last().expect("non-empty").view(), 2);
        out.push(next);
    }
    out
}

fn upsample2(flow: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (fh, fw, _) = flow.dim();
    let mut out = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let st = Stencil::new(fh, fw, to_feature_coord(x as f64, 2), to_feature_coord(y as f64, 2));
            for ch in 0..2 {
                out[[y, x, ch]] = 2.0 * st.sample3(&flow.view(), ch);
            }
        }
    }
    out
}

fn resize_flow(flow: &Array3<f64>, h: usize, w: usize, scale: f64) -> Array3<f64> {
    let (fh, fw, _) = flow.dim();
    let stride = scale as usize;
    let mut out = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let st = Stencil::new(fh, fw, to_feature_coord(x as f64, stride), to_feature_coord(y as f64, stride));
            for ch in 0..2 {
                out[[y, x, ch]] = scale * st.sample3(&flow.view(), ch);
            }
        }
    }
    out
}

/// Per-pixel patch SSD between `a` and `b` displaced by `flow + d`, for
/// every integer offset `d` in the square of the given radius.
fn cost_volume(a: &ArrayView3<f64>, b: &ArrayView3<f64>, flow: &Array3<f64>, radius: isize) -> Array3<f64> {
    let (h, w, c) = a.dim();
    let side = (2 * radius + 1) as usize;
    let mut out = Array3::zeros((h, w, side * side));
    let mut diff = Array2::<f64>::zeros((h, w));
    for (k, (dy, dx)) in offsets(radius).into_iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let st = Stencil::new(h, w, x as f64 + flow[[y, x, 0]] + dx as f64, y as f64 + flow[[y, x, 1]] + dy as f64);
                let mut acc = 0.0;
                for ch in 0..c {
                    let d = a[[y, x, ch]] - st.sample3(b, ch);
                    acc += d * d;
                }
                diff[[y, x]] = acc / c as f64;
            }
        }
        let boxed = box_mean(&diff, MATCH_PATCH_RADIUS);
        out.slice_mut(s![.., .., k]).assign(&boxed);
    }
    out
}

/// Offsets ordered row-major over `[-r, r]^2`; index `k` maps to
/// `(k / side - r, k % side - r)` as `(dy, dx)`.
fn offsets(radius: isize) -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            v.push((dy, dx));
        }
    }
    v
}

fn box_mean(img: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img[[y, x]];
            integral[[y + 1, x + 1]] = integral[[y, x + 1]] + row;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]] + integral[[y0, x0]];
            out[[y, x]] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Integer search around the current estimate; parabolic subpixel fitting
/// only when `subpixel` (coarse-level fits get amplified by upsampling).
fn refine_once(a: &ArrayView3<f64>, b: &ArrayView3<f64>, flow: &mut Array3<f64>, radius: isize, subpixel: bool) {
    let (h, w, _) = a.dim();
    let costs = cost_volume(a, b, flow, radius);
    let side = (2 * radius + 1) as usize;
    let center = (radius as usize) * side + radius as usize;
    // Visit offsets nearest-first so ties keep the smaller displacement.
    let mut order: Vec<usize> = (0..side * side).collect();
    order.sort_by_key(|&k| {
        let dy = (k / side) as isize - radius;
        let dx = (k % side) as isize - radius;
        dx * dx + dy * dy
    });
    let mut update = Array3::<f64>::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let c = |k: usize| costs[[y, x, k]];
            let mut best = center;
            for &k in &order {
                if c(k) < c(best) - 1e-12 {
                    best = k;
                }
            }
            let by = best / side;
            let bx = best % side;
            let sub = |lo: f64, mid: f64, hi: f64| {
                let denom = lo - 2.0 * mid + hi;
                // a flat side (e.g. clamped border) gives no subpixel evidence
                if lo > mid + 1e-12 && hi > mid + 1e-12 && denom > 1e-12 {
                    (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            // neighbours sampled past the border carry no subpixel evidence
            let tx = x as f64 + flow[[y, x, 0]] + bx as f64 - radius as f64;
            let ty = y as f64 + flow[[y, x, 1]] + by as f64 - radius as f64;
            let inside_x = subpixel && tx >= 1.0 && tx <= (w - 2) as f64;
            let inside_y = subpixel && ty >= 1.0 && ty <= (h - 2) as f64;
            let sx = if inside_x && bx > 0 && bx + 1 < side { sub(c(best - 1), c(best), c(best + 1)) } else { 0.0 };
            let sy = if inside_y && by > 0 && by + 1 < side { sub(c(best - side), c(best), c(best + side)) } else { 0.0 };
            update[[y, x, 0]] = bx as f64 - radius as f64 + sx;
            update[[y, x, 1]] = by as f64 - radius as f64 + sy;
        }
    }
    *flow += &update;
    *flow = median3(flow);
}

fn median3(flow: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = flow.dim();
    let mut out = flow.clone();
    let mut buf = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.clear();
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        buf.push(flow[[yy, xx, ch]]);
                    }
                }
                buf.sort_by(f64::total_cmp);
                out[[y, x, ch]] = buf[buf.len() / 2];
            }
        }
    }
    out
}

fn tokens(map: &ArrayView3<f64>) -> Array2<f64> {
    crate::geometry::to_tokens(map)
}

fn untokens(t: Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    crate::geometry::from_tokens(t, h, w)
}

/// Full-resolution 3x3 convolution (zero padding) with a `27 x C` filter bank.
fn conv3x3_valid_same(img: &ArrayView3<f64>, filters: &Array2<f64>) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let cols = crate::nn::im2col(&tokens(img).view(), h, w);
    untokens(cols.dot(filters), h, w)
}

/// Random linear projection of 8x8 patches, resampled to frame size.
#[derive(Debug, Clone)]
pub struct ToySemanticEmbedder {
    seed: u64,
    projection: Array2<f64>,
}

pub const EMBED_PATCH: usize = 8;

impl ToySemanticEmbedder {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e3a_471c);
        let n = EMBED_PATCH * EMBED_PATCH * 3;
        let b = 2.0 / (n as f64).sqrt();
        Self { seed, projection: Array2::from_shape_fn((n, channels), |_| rng.gen_range(-b..b)) }
    }
}

impl SemanticEmbedder for ToySemanticEmbedder {
    fn embed_semantic(&self, a: &Frame) -> Result<SemanticEmbedding> {
        let (h, w) = a.size();
        let (ph, pw) = (h / EMBED_PATCH, w / EMBED_PATCH);
        let c = self.projection.ncols();
        let mut grid = Array3::<f64>::zeros((ph, pw, c));
        let mut patch = ndarray::Array1::<f64>::zeros(EMBED_PATCH * EMBED_PATCH * 3);
        for i in 0..ph {
            for j in 0..pw {
                let mut k = 0;
                for y in 0..EMBED_PATCH {
                    for x in 0..EMBED_PATCH {
                        for ch in 0..3 {
                            patch[k] = a.pixels[[i * EMBED_PATCH + y, j * EMBED_PATCH + x, ch]] - 0.5;
                            k += 1;
                        }
                    }
                }
                grid.slice_mut(s![i, j, ..]).assign(&patch.dot(&self.projection));
            }
        }
        Ok(SemanticEmbedding { features: crate::geometry::upsample(&grid.view(), EMBED_PATCH, h, w) })
    }

    fn channels(&self) -> usize {
        self.projection.ncols()
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in self.projection.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
