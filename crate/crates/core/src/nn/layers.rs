use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::types::logistic;

/// Per-token affine map `y = x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&store.view2(self.weight)) + &store.view1(self.bias)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
        grads.view2_mut(self.weight).scaled_add(1.0, &x.t().dot(dy));
        grads.view1_mut(self.bias).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&store.view2(self.weight).t())
    }
}

/// 3x3 convolution, stride 1, zero "same" padding, over `hw x c` token rows.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[9 * in_ch, out_ch], rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_ch]);
        Self { weight, bias, in_ch, out_ch }
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, store: &ParamStore, x: &ArrayView2<f64>, h: usize, w: usize) -> (Array2<f64>, Array2<f64>) {
        let cols = im2col(x, h, w);
        let y = cols.dot(&store.view2(self.weight)) + &store.view1(self.bias);
        (y, cols)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cols: &Array2<f64>,
        dy: &ArrayView2<f64>,
        h: usize,
        w: usize,
    ) -> Array2<f64> {
        grads.view2_mut(self.weight).scaled_add(1.0, &cols.t().dot(dy));
        grads.view1_mut(self.bias).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dcols = dy.dot(&store.view2(self.weight).t());
        col2im(&dcols, h, w, self.in_ch)
    }
}

/// Column `k*c + ch` of row `y*w + x` holds `x[(y+dy)*w + (x+dx), ch]` for
/// kernel tap `k = (dy+1)*3 + (dx+1)`.
pub fn im2col(x: &ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    let mut cols = Array2::zeros((h * w, 9 * c));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for k in 0..9 {
                let sy = y as isize + (k / 3) as isize - 1;
                let sx = xx as isize + (k % 3) as isize - 1;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = sy as usize * w + sx as usize;
                cols.slice_mut(s![row, k * c..(k + 1) * c]).assign(&x.row(src));
            }
        }
    }
    cols
}

pub fn col2im(dcols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((h * w, c));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for k in 0..9 {
                let sy = y as isize + (k / 3) as isize - 1;
                let sx = xx as isize + (k % 3) as isize - 1;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = sy as usize * w + sx as usize;
                let mut dst = dx.row_mut(src);
                dst += &dcols.slice(s![row, k * c..(k + 1) * c]);
            }
        }
    }
    dx
}

/// Squeeze-excite gate: global mean -> bottleneck (reduction 4) -> ReLU ->
/// expand -> logistic, multiplied back onto every token.
#[derive(Debug, Clone, Copy)]
pub struct ChannelAttention {
    pub squeeze: Linear,
    pub expand: Linear,
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionCache {
    pub mean: Array2<f64>,
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub gate: Array1<f64>,
}

impl ChannelAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            squeeze: Linear::new(store, &format!("{name}.squeeze"), channels, hidden, rng),
            expand: Linear::new(store, &format!("{name}.expand"), hidden, channels, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &ArrayView2<f64>) -> (Array2<f64>, ChannelAttentionCache) {
        let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let hidden_pre = self.squeeze.forward(store, &mean.view());
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let gate = self.expand.forward(store, &hidden.view()).row(0).mapv(logistic);
        let y = x * &gate;
        (y, ChannelAttentionCache { mean, hidden_pre, hidden, gate })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &ArrayView2<f64>,
        cache: &ChannelAttentionCache,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        let n = x.nrows() as f64;
        let dgate = (dy * x).sum_axis(Axis(0));
        let dlogit = (&dgate * &cache.gate.mapv(|g| g * (1.0 - g))).insert_axis(Axis(0));
        let dhidden = self.expand.backward(store, grads, &cache.hidden.view(), &dlogit.view());
        let dpre = dhidden * &cache.hidden_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let dmean = self.squeeze.backward(store, grads, &cache.mean.view(), &dpre.view());
        let mut dx = dy * &cache.gate;
        dx += &(dmean.row(0).to_owned() / n);
        dx
    }
}

/// Three 3x3 convolutions with ReLU after the first two; the last stage is
/// linear so outputs can be signed.
#[derive(Debug, Clone, Copy)]
pub struct ConvHead {
    pub stages: [Conv3x3; 3],
}

#[derive(Debug, Clone)]
pub struct ConvHeadCache {
    cols: [Array2<f64>; 3],
    pre: [Array2<f64>; 2],
}

impl ConvHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, plan: [usize; 4], rng: &mut R) -> Self {
        Self {
            stages: [
                Conv3x3::new(store, &format!("{name}.conv1"), plan[0], plan[1], rng),
                Conv3x3::new(store, &format!("{name}.conv2"), plan[1], plan[2], rng),
                Conv3x3::new(store, &format!("{name}.conv3"), plan[2], plan[3], rng),
            ],
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &ArrayView2<f64>, h: usize, w: usize) -> (Array2<f64>, ConvHeadCache) {
        let (p1, c1) = self.stages[0].forward(store, x, h, w);
        let a1 = p1.mapv(|v| v.max(0.0));
        let (p2, c2) = self.stages[1].forward(store, &a1.view(), h, w);
        let a2 = p2.mapv(|v| v.max(0.0));
        let (out, c3) = self.stages[2].forward(store, &a2.view(), h, w);
        (out, ConvHeadCache { cols: [c1, c2, c3], pre: [p1, p2] })
    }

    /// Output before the final stage (post-ReLU penultimate activations).
    pub fn penultimate(&self, store: &ParamStore, x: &ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (p1, _) = self.stages[0].forward(store, x, h, w);
        let (p2, _) = self.stages[1].forward(store, &p1.mapv(|v| v.max(0.0)).view(), h, w);
        p2.mapv(|v| v.max(0.0))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &ConvHeadCache,
        dy: &ArrayView2<f64>,
        h: usize,
        w: usize,
    ) -> Array2<f64> {
        let relu_mask = |pre: &Array2<f64>| pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let da2 = self.stages[2].backward(store, grads, &cache.cols[2], dy, h, w);
        let dp2 = da2 * relu_mask(&cache.pre[1]);
        let da1 = self.stages[1].backward(store, grads, &cache.cols[1], &dp2.view(), h, w);
        let dp1 = da1 * relu_mask(&cache.pre[0]);
        self.stages[0].backward(store, grads, &cache.cols[0], &dp1.view(), h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(store: &mut ParamStore, loss: impl Fn(&ParamStore) -> f64, analytic: &Grads, picks: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..picks {
            let i = rng.gen_range(0..store.len());
            let orig = store.values()[i];
            store.values_mut()[i] = orig + 1e-5;
            let up = loss(store);
            store.values_mut()[i] = orig - 1e-5;
            let dn = loss(store);
            store.values_mut()[i] = orig;
            let fd = (up - dn) / 2e-5;
            let an = analytic.values()[i];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "param {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn conv_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = ConvHead::new(&mut store, "h", [3, 5, 4, 2], &mut rng);
        for v in store.values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let (h, w) = (4, 5);
        let x = Array2::from_shape_fn((h * w, 3), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((h * w, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |s: &ParamStore| {
            let (y, _) = head.forward(s, &x.view(), h, w);
            (&y * &target).sum()
        };
        let (_, cache) = head.forward(&store, &x.view(), h, w);
        let mut grads = store.zero_grads();
        let dx = head.backward(&store, &mut grads, &cache, &target.view(), h, w);
        fd_check(&mut store, loss, &grads, 40);
        // input gradient
        let e = 1e-5;
        for (r, c) in [(0, 0), (7, 2), (19, 1)] {
            let mut xp = x.clone();
            xp[[r, c]] += e;
            let mut xm = x.clone();
            xm[[r, c]] -= e;
            let fd = ((&head.forward(&store, &xp.view(), h, w).0 * &target).sum()
                - (&head.forward(&store, &xm.view(), h, w).0 * &target).sum())
                / (2.0 * e);
            assert!((fd - dx[[r, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let se = ChannelAttention::new(&mut store, "se", 8, &mut rng);
        for v in store.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let x = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let loss = |s: &ParamStore, x: &Array2<f64>| (&se.forward(s, &x.view()).0 * &target).sum();
        let (_, cache) = se.forward(&store, &x.view());
        let mut grads = store.zero_grads();
        let dx = se.backward(&store, &mut grads, &x.view(), &cache, &target.view());
        fd_check(&mut store, |s| loss(s, &x), &grads, 30);
        for (r, c) in [(0, 0), (3, 5), (5, 7)] {
            let mut xp = x.clone();
            xp[[r, c]] += 1e-5;
            let mut xm = x.clone();
            xm[[r, c]] -= 1e-5;
            let fd = (loss(&store, &xp) - loss(&store, &xm)) / 2e-5;
            assert!((fd - dx[[r, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn im2col_roundtrip_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((12, 18), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&im2col(&x.view(), 3, 4) * &y).sum();
        let rhs = (&x * &col2im(&y, 3, 4, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
