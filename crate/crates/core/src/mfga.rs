//! Guided attention fusion of flow, semantic and backbone features.
//!
//! All tensors here are token matrices (`hw x c`, row `y * w + x`) on the
//! feature grid. The hybrid query attends over each of the four middle
//! features in turn, with the keys doubling as values:
//!
//! `F_GA = sum_i softmax(Q K_i^T / sqrt(C_ls)) K_i`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ChannelAttention, ChannelAttentionCache, Grads, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfgaConfig {
    pub c_ls: usize,
    pub c_hybrid: usize,
    /// Restrict keys to a `(2w+1)^2` neighbourhood of the query token.
    pub window: Option<usize>,
    /// When off, the projected features are summed without attention.
    pub enabled: bool,
    /// When off, the semantic block of the hybrid input is zeroed.
    pub semantic_enabled: bool,
}

impl Default for MfgaConfig {
    fn default() -> Self {
        Self { c_ls: 128, c_hybrid: 128, window: None, enabled: true, semantic_enabled: true }
    }
}

/// Scaled dot-product attention of `q` over `k`, keys reused as values.
#[derive(Debug, Clone)]
pub struct AttentionTerm {
    /// Row-stochastic `n x n` weights.
    pub weights: Array2<f64>,
    pub output: Array2<f64>,
}

fn window_allows(window: Option<(usize, usize, usize)>, i: usize, j: usize) -> bool {
    match window {
        None => true,
        Some((r, _h, w)) => {
            let (yi, xi) = (i / w, i % w);
            let (yj, xj) = (j / w, j % w);
            yi.abs_diff(yj) <= r && xi.abs_diff(xj) <= r
        }
    }
}

/// One attention term. `window` is `(radius, h, w)` of the token grid.
pub fn attention_term(q: &ArrayView2<f64>, k: &ArrayView2<f64>, window: Option<(usize, usize, usize)>) -> AttentionTerm {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut weights = q.dot(&k.t()) * scale;
    for (i, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        if window.is_some() {
            for (j, v) in row.iter_mut().enumerate() {
                if !window_allows(window, i, j) {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let output = weights.dot(k);
    AttentionTerm { weights, output }
}

/// Gradients of one term w.r.t. its query and keys.
pub fn attention_term_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    term: &AttentionTerm,
    d_out: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let a = &term.weights;
    let da = d_out.dot(&k.t());
    let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
    let ds = a * &(da - &row_dot) * scale;
    let dq = ds.dot(k);
    let dk = a.t().dot(d_out) + ds.t().dot(q);
    (dq, dk)
}

/// Sum of the four attention terms of `query` over `middles`.
pub fn guided_attention(
    query: &ArrayView2<f64>,
    middles: &[ArrayView2<f64>; 4],
    window: Option<(usize, usize, usize)>,
) -> Result<(Array2<f64>, Vec<AttentionTerm>)> {
    for (i, m) in middles.iter().enumerate() {
        if m.dim() != query.dim() {
            return Err(Error::Shape(format!("middle feature {i} is {:?}, query is {:?}", m.dim(), query.dim())));
        }
    }
    let terms: Vec<AttentionTerm> = middles.iter().map(|m| attention_term(query, m, window)).collect();
    let mut out = Array2::zeros(query.dim());
    for t in &terms {
        out += &t.output;
    }
    Ok((out, terms))
}

pub fn guided_attention_backward(
    query: &ArrayView2<f64>,
    middles: &[ArrayView2<f64>; 4],
    terms: &[AttentionTerm],
    d_out: &ArrayView2<f64>,
) -> (Array2<f64>, [Array2<f64>; 4]) {
    let mut dq = Array2::zeros(query.dim());
    let dks: Vec<Array2<f64>> = middles
        .iter()
        .zip(terms)
        .map(|(k, t)| {
            let (dqi, dki) = attention_term_backward(query, k, t, d_out);
            dq += &dqi;
            dki
        })
        .collect();
    (dq, dks.try_into().expect("four terms"))
}

/// Concatenate attended flow and semantic channels, then map to `C_hybrid`.
pub fn fuse_hybrid(store: &ParamStore, proj: &Linear, flow_attn: &ArrayView2<f64>, semantic: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if flow_attn.nrows() != semantic.nrows() {
        return Err(Error::Shape(format!(
            "flow has {} positions, semantic embedding has {}",
            flow_attn.nrows(),
            semantic.nrows()
        )));
    }
    let cat = ndarray::concatenate![Axis(1), *flow_attn, *semantic];
    Ok(proj.forward(store, &cat.view()))
}

/// Per-position affine map into the shared latent space.
pub fn project_latent(store: &ParamStore, proj: &Linear, f: &ArrayView2<f64>) -> Array2<f64> {
    proj.forward(store, f)
}

/// Inputs on the feature grid, as token matrices.
#[derive(Debug, Clone, Copy)]
pub struct MfgaInput<'a> {
    /// Forward and backward flow, 4 channels.
    pub flow: ArrayView2<'a, f64>,
    pub semantic: ArrayView2<'a, f64>,
    pub middles: [ArrayView2<'a, f64>; 4],
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct MfgaCache {
    flow_ca: ChannelAttentionCache,
    hybrid_in: Array2<f64>,
    hybrid: Array2<f64>,
    query: Array2<f64>,
    mid_ca: Vec<(Array2<f64>, ChannelAttentionCache)>,
    keys: Vec<Array2<f64>>,
    terms: Vec<AttentionTerm>,
}

/// Gradients w.r.t. the (non-trainable) inputs.
#[derive(Debug, Clone)]
pub struct MfgaInputGrads {
    pub flow: Array2<f64>,
    pub semantic: Array2<f64>,
    pub middles: [Array2<f64>; 4],
}

#[derive(Debug, Clone)]
pub struct Mfga {
    pub cfg: MfgaConfig,
    pub flow_attention: ChannelAttention,
    pub middle_attention: [ChannelAttention; 4],
    pub hybrid: Linear,
    pub query: Linear,
    pub keys: [Linear; 4],
}

impl Mfga {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: MfgaConfig,
        middle_channels: [usize; 4],
        semantic_channels: usize,
        rng: &mut R,
    ) -> Self {
        let flow_attention = ChannelAttention::new(store, "mfga.flow_ca", 4, rng);
        let middle_attention =
            std::array::from_fn(|i| ChannelAttention::new(store, &format!("mfga.middle{i}_ca"), middle_channels[i], rng));
        let hybrid = Linear::new(store, "mfga.hybrid", 4 + semantic_channels, cfg.c_hybrid, rng);
        let query = Linear::new(store, "mfga.query", cfg.c_hybrid, cfg.c_ls, rng);
        let keys = std::array::from_fn(|i| Linear::new(store, &format!("mfga.key{i}"), middle_channels[i], cfg.c_ls, rng));
        Self { cfg, flow_attention, middle_attention, hybrid, query, keys }
    }

    fn window(&self, h: usize, w: usize) -> Option<(usize, usize, usize)> {
        self.cfg.window.map(|r| (r, h, w))
    }

    pub fn forward(&self, store: &ParamStore, input: &MfgaInput) -> Result<(Array2<f64>, MfgaCache)> {
        let n = input.height * input.width;
        if input.flow.nrows() != n || input.middles.iter().any(|m| m.nrows() != n) {
            return Err(Error::Shape(format!("MFGA inputs must all have {n} positions")));
        }
        if input.semantic.nrows() != n {
            return Err(Error::Shape(format!("semantic embedding has {} positions, expected {n}", input.semantic.nrows())));
        }
        let (flow_attn, flow_ca) = self.flow_attention.forward(store, &input.flow);
        let semantic = if self.cfg.semantic_enabled { input.semantic.to_owned() } else { Array2::zeros(input.semantic.dim()) };
        let hybrid_in = ndarray::concatenate![Axis(1), flow_attn, semantic];
        let hybrid = self.hybrid.forward(store, &hybrid_in.view());
        let query = self.query.forward(store, &hybrid.view());
        let mut mid_ca = Vec::with_capacity(4);
        let mut keys = Vec::with_capacity(4);
        for i in 0..4 {
            let (m, c) = self.middle_attention[i].forward(store, &input.middles[i]);
            keys.push(self.keys[i].forward(store, &m.view()));
            mid_ca.push((m, c));
        }
        let kv: [ArrayView2<f64>; 4] = std::array::from_fn(|i| keys[i].view());
        let (out, terms) = if self.cfg.enabled {
            guided_attention(&query.view(), &kv, self.window(input.height, input.width))?
        } else {
            let mut out = query.clone();
            for k in &keys {
                out += k;
            }
            (out, Vec::new())
        };
        Ok((out, MfgaCache { flow_ca, hybrid_in, hybrid, query, mid_ca, keys, terms }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        input: &MfgaInput,
        cache: &MfgaCache,
        d_out: &ArrayView2<f64>,
    ) -> MfgaInputGrads {
        let (dq, dks) = if self.cfg.enabled {
            let kv: [ArrayView2<f64>; 4] = std::array::from_fn(|i| cache.keys[i].view());
            guided_attention_backward(&cache.query.view(), &kv, &cache.terms, d_out)
        } else {
            (d_out.to_owned(), std::array::from_fn(|_| d_out.to_owned()))
        };
        let mut middles: Vec<Array2<f64>> = Vec::with_capacity(4);
        for i in 0..4 {
            let (m, c) = &cache.mid_ca[i];
            let dm = self.keys[i].backward(store, grads, &m.view(), &dks[i].view());
            middles.push(self.middle_attention[i].backward(store, grads, &input.middles[i], c, &dm.view()));
        }
        let dhybrid = self.query.backward(store, grads, &cache.hybrid.view(), &dq.view());
        let dcat = self.hybrid.backward(store, grads, &cache.hybrid_in.view(), &dhybrid.view());
        let dflow_attn = dcat.slice(s![.., ..4]).to_owned();
        let semantic = if self.cfg.semantic_enabled { dcat.slice(s![.., 4..]).to_owned() } else { Array2::zeros(input.semantic.dim()) };
        let flow = self.flow_attention.backward(store, grads, &input.flow, &cache.flow_ca, &dflow_attn.view());
        MfgaInputGrads { flow, semantic, middles: middles.try_into().expect("four middles") }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Loops over tokens, exponentiates and normalizes by hand.
    fn brute_force(q: &Array2<f64>, ks: &[Array2<f64>]) -> Array2<f64> {
        let (n, c) = q.dim();
        let mut out = Array2::zeros((n, c));
        for k in ks {
            for i in 0..n {
                let mut e = vec![0.0; n];
                for j in 0..n {
                    let mut d = 0.0;
                    for ch in 0..c {
                        d += q[[i, ch]] * k[[j, ch]];
                    }
                    e[j] = (d / (c as f64).sqrt()).exp();
                }
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for ch in 0..c {
                        out[[i, ch]] += e[j] / z * k[[j, ch]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gate_of_ones_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "ca", 8, &mut rng);
        store.slice_mut(ca.expand.bias).fill(50.0);
        let x = rand_mat(&mut rng, 6, 8);
        let (y, _) = ca.forward(&store, &x.view());
        assert_eq!(y, x);
        let (z, _) = ca.forward(&store, &Array2::zeros((6, 8)).view());
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_set_gate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca = ChannelAttention::new(&mut store, "ca", 2, &mut rng);
        store.slice_mut(ca.expand.weight).fill(0.0);
        store.slice_mut(ca.expand.bias).copy_from_slice(&[0.0, 50.0]);
        let x = Array2::from_shape_vec((1, 2), vec![3.0, 5.0]).unwrap();
        let (y, _) = ca.forward(&store, &x.view());
        assert_eq!(y.row(0).to_vec(), vec![1.5, 5.0]);
    }

    #[test]
    fn hybrid_and_latent_hand_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = Linear::new(&mut store, "p", 2, 2, &mut rng);
        store.slice_mut(proj.weight).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let flow = Array2::from_elem((1, 1), 2.0);
        let sem = Array2::from_elem((1, 1), -1.0);
        // [2, -1] . [[1, 2], [3, 4]] = [-1, 0]
        let out = fuse_hybrid(&store, &proj, &flow.view(), &sem.view()).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![-1.0, 0.0]);
        assert!(fuse_hybrid(&store, &proj, &flow.view(), &Array2::zeros((2, 1)).view()).is_err());

        store.slice_mut(proj.bias).copy_from_slice(&[0.5, -0.5]);
        let x = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        assert_eq!(project_latent(&store, &proj, &x.view()).row(0).to_vec(), vec![4.5, 5.5]);
    }

    #[test]
    fn identity_projection_passes_semantic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = Linear::new(&mut store, "p", 4 + 3, 3, &mut rng);
        let mut wt = Array2::<f64>::zeros((7, 3));
        for c in 0..3 {
            wt[[4 + c, c]] = 1.0;
        }
        store.slice_mut(proj.weight).copy_from_slice(wt.as_slice().unwrap());
        let sem = rand_mat(&mut rng, 5, 3);
        let out = fuse_hybrid(&store, &proj, &Array2::zeros((5, 4)).view(), &sem.view()).unwrap();
        assert_eq!(out, sem);
    }

    #[test]
    fn constant_middles_and_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 4, 3);
        let v = Array1::from(vec![0.3, -1.0, 2.0]);
        let k = Array2::from_shape_fn((4, 3), |(_, c)| v[c]);
        let ks = [k.view(), k.view(), k.view(), k.view()];
        let (out, _) = guided_attention(&q.view(), &ks, None).unwrap();
        for row in out.rows() {
            for c in 0..3 {
                assert!((row[c] - 4.0 * v[c]).abs() < 1e-12);
            }
        }
        let q1 = rand_mat(&mut rng, 1, 3);
        let m: Vec<Array2<f64>> = (0..4).map(|_| rand_mat(&mut rng, 1, 3)).collect();
        let (out, _) = guided_attention(&q1.view(), &[m[0].view(), m[1].view(), m[2].view(), m[3].view()], None).unwrap();
        let sum = &m[0] + &m[1] + &m[2] + &m[3];
        assert!((out - sum).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn matches_brute_force_and_scale_applied_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_mat(&mut rng, 4, 2) * 3.0;
        let m: Vec<Array2<f64>> = (0..4).map(|_| rand_mat(&mut rng, 4, 2) * 3.0).collect();
        let kv = [m[0].view(), m[1].view(), m[2].view(), m[3].view()];
        let (out, terms) = guided_attention(&q.view(), &kv, None).unwrap();
        assert!((&out - &brute_force(&q, &m)).iter().all(|d| d.abs() < 1e-9));
        for t in &terms {
            for row in t.weights.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let (doubled, _) = guided_attention(&(&q * 2.0).view(), &kv, None).unwrap();
        assert!((&doubled - &brute_force(&(&q * 2.0), &m)).iter().all(|d| d.abs() < 1e-9));
        assert!((&doubled - &out).iter().any(|d| d.abs() > 1e-3));
    }

    #[test]
    fn window_masks_far_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_mat(&mut rng, 16, 3);
        let k = rand_mat(&mut rng, 16, 3);
        let t = attention_term(&q.view(), &k.view(), Some((1, 4, 4)));
        assert_eq!(t.weights[[0, 15]], 0.0);
        assert!(t.weights[[0, 5]] > 0.0);
        for row in t.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_mat(&mut rng, 4, 4);
        let m: Vec<Array2<f64>> = (0..4).map(|_| rand_mat(&mut rng, 4, 4)).collect();
        let w = rand_mat(&mut rng, 4, 4);
        let loss = |q: &Array2<f64>, m: &[Array2<f64>]| {
            let (o, _) = guided_attention(&q.view(), &[m[0].view(), m[1].view(), m[2].view(), m[3].view()], None).unwrap();
            (o * &w).sum()
        };
        let kv = [m[0].view(), m[1].view(), m[2].view(), m[3].view()];
        let (_, terms) = guided_attention(&q.view(), &kv, None).unwrap();
        let (dq, dks) = guided_attention_backward(&q.view(), &kv, &terms, &w.view());
        let h = 1e-4;
        for idx in [(0, 0), (1, 3), (3, 2)] {
            let mut qp = q.clone();
            qp[idx] += h;
            let mut qm = q.clone();
            qm[idx] -= h;
            let fd = (loss(&qp, &m) - loss(&qm, &m)) / (2.0 * h);
            assert!((fd - dq[idx]).abs() <= 1e-3 * fd.abs().max(1e-6) + 1e-8, "{fd} vs {}", dq[idx]);
            for i in 0..4 {
                let mut mp = m.clone();
                mp[i][idx] += h;
                let mut mm = m.clone();
                mm[i][idx] -= h;
                let fd = (loss(&q, &mp) - loss(&q, &mm)) / (2.0 * h);
                assert!((fd - dks[i][idx]).abs() <= 1e-3 * fd.abs().max(1e-6) + 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_equivariance(seed in 0u64..1000, shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_mat(&mut rng, 4, 3);
            let k = rand_mat(&mut rng, 4, 3);
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let pq = q.select(Axis(0), &perm);
            let pk = k.select(Axis(0), &perm);
            let base = attention_term(&q.view(), &k.view(), None).output;
            let permuted_q = attention_term(&pq.view(), &k.view(), None).output;
            prop_assert!((&permuted_q - &base.select(Axis(0), &perm)).iter().all(|d| d.abs() < 1e-6));
            let permuted_k = attention_term(&q.view(), &pk.view(), None).output;
            prop_assert!((&permuted_k - &base).iter().all(|d| d.abs() < 1e-6));
            // convex combination of key rows per channel
            for c in 0..3 {
                let col = k.column(c);
                let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                prop_assert!(base.column(c).iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
            }
        }
    }
}
