//! The full network for one frame pair: frozen backbone and embedder,
//! guided attention fusion, the two heads and the residual flow branch.
//!
//! Everything trainable lives in one [`ParamStore`]; the frozen parts are
//! rebuilt from their seeds and never touched by an optimizer.

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackendKind, FlowBackbone, SemanticEmbedder, ToyFlowBackbone, ToySemanticEmbedder};
use crate::error::{Error, Result};
use crate::geometry::{avg_pool, from_tokens, to_tokens, upsample, upsample_adjoint};
use crate::heads::{head_input, split_fga_grad, AcaBranch, UoCache, UoHeads};
use crate::mfga::{Mfga, MfgaCache, MfgaConfig, MfgaInput};
use crate::nn::{ConvHeadCache, Grads, ParamStore};
use crate::types::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub stride: usize,
    pub middle_channels: usize,
    pub semantic_channels: usize,
    pub mfga: MfgaConfig,
    pub backbone_kind: BackendKind,
    pub embedder_kind: BackendKind,
    pub backbone_seed: u64,
    pub embedder_seed: u64,
    /// Seed of the trainable-parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            middle_channels: 32,
            semantic_channels: 64,
            mfga: MfgaConfig::default(),
            backbone_kind: BackendKind::Toy,
            embedder_kind: BackendKind::Toy,
            backbone_seed: 1,
            embedder_seed: 2,
            init_seed: 0,
        }
    }
}

/// Frozen outputs for the pair `(a, b)`, on the feature grid unless noted.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    /// Full-resolution backbone flows.
    pub forward: Array3<f64>,
    pub backward: Array3<f64>,
    /// Backbone flows pooled to the feature grid, in feature-grid units.
    pub forward_feat: Array2<f64>,
    pub backward_feat: Array2<f64>,
    pub flow_tokens: Array2<f64>,
    pub middles: [Array2<f64>; 4],
    pub semantic: Arc<Array2<f64>>,
    pub grid: (usize, usize),
    pub size: (usize, usize),
    pub source_index: usize,
    pub target_index: usize,
}

impl PairFeatures {
    fn input(&self) -> MfgaInput<'_> {
        MfgaInput {
            flow: self.flow_tokens.view(),
            semantic: self.semantic.view(),
            middles: std::array::from_fn(|i| self.middles[i].view()),
            height: self.grid.0,
            width: self.grid.1,
        }
    }
}

/// Frame-resolution outputs for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMaps {
    /// Backbone flow plus the residual branch, `H x W x 2`.
    pub forward: Array3<f64>,
    pub backward: Array3<f64>,
    /// Predicted `log(sigma^2)` per pixel of the source frame.
    pub log_variance: Array2<f64>,
    /// Occlusion logits per pixel of the source frame.
    pub occlusion: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    mfga: MfgaCache,
    uo: UoCache,
    aca: ConvHeadCache,
}

/// Loss gradients w.r.t. the frame-resolution maps.
#[derive(Debug, Clone)]
pub struct MapGrads {
    pub forward: Array3<f64>,
    pub backward: Array3<f64>,
    pub log_variance: Array2<f64>,
    pub occlusion: Array2<f64>,
}

impl MapGrads {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            forward: Array3::zeros((h, w, 2)),
            backward: Array3::zeros((h, w, 2)),
            log_variance: Array2::zeros((h, w)),
            occlusion: Array2::zeros((h, w)),
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub mfga: Mfga,
    pub heads: UoHeads,
    pub aca: AcaBranch,
    backbone: Arc<dyn FlowBackbone>,
    embedder: Arc<dyn SemanticEmbedder>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("cfg", &self.cfg).field("params", &self.params.len()).finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            params: self.params.clone(),
            mfga: self.mfga.clone(),
            heads: self.heads,
            aca: self.aca,
            backbone: Arc::clone(&self.backbone),
            embedder: Arc::clone(&self.embedder),
        }
    }
}

impl Model {
    /// Builds the toy backends from their seeds.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.backbone_kind == BackendKind::External || cfg.embedder_kind == BackendKind::External {
            return Err(Error::Config(
                "external backends are not bundled; construct the model with Model::with_backends".into(),
            ));
        }
        let backbone = Arc::new(ToyFlowBackbone::new(cfg.backbone_seed, cfg.stride, cfg.middle_channels));
        let embedder = Arc::new(ToySemanticEmbedder::new(cfg.embedder_seed, cfg.semantic_channels));
        Self::with_backends(cfg, backbone, embedder)
    }

    pub fn with_backends(cfg: ModelConfig, backbone: Arc<dyn FlowBackbone>, embedder: Arc<dyn SemanticEmbedder>) -> Result<Self> {
        if cfg.stride == 0 || backbone.stride() != cfg.stride {
            return Err(Error::Config(format!("backbone stride {} does not match model stride {}", backbone.stride(), cfg.stride)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamStore::new();
        let mfga = Mfga::new(&mut params, cfg.mfga, backbone.middle_channels(), embedder.channels(), &mut rng);
        let head_in = cfg.mfga.c_ls + 4;
        let heads = UoHeads::new(&mut params, head_in, &mut rng);
        let aca = AcaBranch::new(&mut params, head_in, &mut rng);
        Ok(Self { cfg, params, mfga, heads, aca, backbone, embedder })
    }

    pub fn backbone(&self) -> &dyn FlowBackbone {
        self.backbone.as_ref()
    }

    /// The backbone handle, for teachers that share it.
    pub fn shared_backbone(&self) -> Arc<dyn FlowBackbone> {
        Arc::clone(&self.backbone)
    }

    pub fn embedder(&self) -> &dyn SemanticEmbedder {
        self.embedder.as_ref()
    }

    /// Hash of every frozen parameter (backbone and embedder).
    pub fn frozen_fingerprint(&self) -> String {
        format!("{}:{}", self.backbone.fingerprint(), self.embedder.fingerprint())
    }

    /// Semantic embedding of one frame, pooled to the feature grid.
    pub fn embed(&self, frame: &Frame) -> Result<Arc<Array2<f64>>> {
        let e = self.embedder.embed_semantic(frame)?;
        Ok(Arc::new(to_tokens(&avg_pool(&e.features.view(), self.cfg.stride).view())))
    }

    pub fn pair_features(&self, a: &Frame, b: &Frame, semantic_a: Arc<Array2<f64>>) -> Result<(PairFeatures, Vec<Array3<f64>>)> {
        let out = self.backbone.compute_flow_features(a, b)?;
        let s = self.cfg.stride;
        let pool = |f: &Array3<f64>| to_tokens(&avg_pool(&f.view(), s).view()) / s as f64;
        let forward_feat = pool(&out.forward_flow.vectors);
        let backward_feat = pool(&out.backward_flow.vectors);
        let flow_tokens = ndarray::concatenate![ndarray::Axis(1), forward_feat, backward_feat];
        let (fh, fw, _) = out.middles.cost_volume.dim();
        let middles = out.middles.as_array().map(|m| to_tokens(&m.view()));
        if semantic_a.nrows() != fh * fw {
            return Err(Error::Shape(format!("semantic grid has {} cells, backbone grid {fh}x{fw}", semantic_a.nrows())));
        }
        let sequence = out.refinement_sequence.into_iter().map(|f| f.vectors).collect();
        Ok((
            PairFeatures {
                forward: out.forward_flow.vectors,
                backward: out.backward_flow.vectors,
                forward_feat,
                backward_feat,
                flow_tokens,
                middles,
                semantic: semantic_a,
                grid: (fh, fw),
                size: a.size(),
                source_index: a.index,
                target_index: b.index,
            },
            sequence,
        ))
    }

    pub fn forward(&self, pf: &PairFeatures, alpha: f64) -> Result<(PairMaps, ForwardCache)> {
        let (fh, fw) = pf.grid;
        let (h, w) = pf.size;
        let s = self.cfg.stride;
        let (f_ga, mfga) = self.mfga.forward(&self.params, &pf.input())?;
        let input = head_input(&f_ga.view(), &pf.forward_feat.view(), &pf.backward_feat.view(), alpha)?;
        let (lv, occ, uo) = self.heads.forward(&self.params, &input.view(), fh, fw);
        let (res, aca) = self.aca.forward(&self.params, &input.view(), fh, fw);
        let res_grid = from_tokens(res, fh, fw);
        let up = |m: &ArrayView3<f64>| upsample(m, s, h, w);
        let forward = &pf.forward + &(up(&res_grid.slice(s![.., .., 0..2])) * s as f64);
        let backward = &pf.backward + &(up(&res_grid.slice(s![.., .., 2..4])) * s as f64);
        let scalar = |t: Array2<f64>| up(&from_tokens(t, fh, fw).view()).index_axis_move(ndarray::Axis(2), 0);
        let maps = PairMaps { forward, backward, log_variance: scalar(lv), occlusion: scalar(occ) };
        Ok((maps, ForwardCache { mfga, uo, aca }))
    }

    /// Accumulates parameter gradients for one pair into `grads`.
    pub fn backward(&self, grads: &mut Grads, pf: &PairFeatures, cache: &ForwardCache, g: &MapGrads) {
        let (fh, fw) = pf.grid;
        let s = self.cfg.stride;
        let down = |m: ArrayView3<f64>| to_tokens(&upsample_adjoint(&m, s, fh, fw).view());
        let d_lv = down(g.log_variance.view().insert_axis(ndarray::Axis(2)));
        let d_occ = down(g.occlusion.view().insert_axis(ndarray::Axis(2)));
        let d_res = ndarray::concatenate![ndarray::Axis(1), down(g.forward.view()), down(g.backward.view())] * s as f64;
        let mut d_input = self.heads.backward(&self.params, grads, &cache.uo, &d_lv.view(), &d_occ.view(), fh, fw);
        d_input += &self.aca.backward(&self.params, grads, &cache.aca, &d_res.view(), fh, fw);
        let d_fga = split_fga_grad(&d_input, self.cfg.mfga.c_ls);
        self.mfga.backward(&self.params, grads, &pf.input(), &cache.mfga, &d_fga.view());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::texture::value_noise_frame;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            middle_channels: 8,
            semantic_channels: 8,
            mfga: MfgaConfig { c_ls: 8, c_hybrid: 8, ..MfgaConfig::default() },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_gradients_match_differences() {
        let mut model = Model::new(small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // wake the zero-initialized residual stage so every path carries gradient
        for v in model.params.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let a = value_noise_frame(16, 16, 1, 0);
        let b = value_noise_frame(16, 16, 2, 1);
        let (pf, _) = model.pair_features(&a, &b, model.embed(&a).unwrap()).unwrap();
        let gmap = MapGrads {
            forward: Array3::from_shape_fn((16, 16, 2), |_| rng.gen_range(-1.0..1.0)),
            backward: Array3::from_shape_fn((16, 16, 2), |_| rng.gen_range(-1.0..1.0)),
            log_variance: Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0)),
            occlusion: Array2::from_shape_fn((16, 16), |_| rng.gen_range(-1.0..1.0)),
        };
        let loss = |m: &Model| {
            let (maps, _) = m.forward(&pf, 0.4).unwrap();
            (&maps.forward * &gmap.forward).sum()
                + (&maps.backward * &gmap.backward).sum()
                + (&maps.log_variance * &gmap.log_variance).sum()
                + (&maps.occlusion * &gmap.occlusion).sum()
        };
        let (_, cache) = model.forward(&pf, 0.4).unwrap();
        let mut grads = model.params.zero_grads();
        model.backward(&mut grads, &pf, &cache, &gmap);
        let h = 1e-5;
        let specs = model.params.specs().to_vec();
        for spec in specs.iter() {
            let i = spec.offset + spec.len / 2;
            let orig = model.params.values()[i];
            model.params.values_mut()[i] = orig + h;
            let lp = loss(&model);
            model.params.values_mut()[i] = orig - h;
            let lm = loss(&model);
            model.params.values_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.values()[i];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3), "{}: fd {fd} analytic {an}", spec.name);
        }
    }

    #[test]
    fn untrained_residual_leaves_backbone_flow() {
        let model = Model::new(small_cfg()).unwrap();
        let a = value_noise_frame(16, 16, 1, 0);
        let b = value_noise_frame(16, 16, 2, 1);
        let (pf, seq) = model.pair_features(&a, &b, model.embed(&a).unwrap()).unwrap();
        let (maps, _) = model.forward(&pf, 0.3).unwrap();
        assert_eq!(maps.forward, pf.forward);
        assert_eq!(seq.last().unwrap(), &pf.forward);
        assert_eq!(maps.log_variance.dim(), (16, 16));
    }

    #[test]
    fn external_backend_needs_injection() {
        let cfg = ModelConfig { backbone_kind: BackendKind::External, ..ModelConfig::default() };
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }
}
