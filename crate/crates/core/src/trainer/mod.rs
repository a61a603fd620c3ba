//! The two-stage curriculum.
//!
//! Stage I fits fusion, heads and the residual branch on synthetic pairs
//! with dense ground truth. Stage II alternates blocks of point supervision
//! (pseudo labels plus sparse ground truth) and unsupervised flow training.
//! The backbone and embedder are never updated.

mod checkpoint;
mod config;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, Stage1Config, Stage2Config, TrainConfig};

use crate::data::SynthSample;
use crate::error::{Error, Result};
use crate::geometry::Stencil;
use crate::heads::AlphaSchedule;
use crate::losses::{
    accumulate, loss_cons_stage2, loss_flow_stage1, loss_occ_bce, loss_occ_points, loss_point_stage2, loss_total_stage1,
    loss_track_stage2, loss_unc_stage1, loss_uflow_stage2, LossWeights, PointGrads, PointPrediction, Predictions,
};
use crate::model::{MapGrads, Model, PairFeatures};
use crate::nn::{clip_global_norm, AdamW, Grads};
use crate::plg::anchor_of;
use crate::types::{Frame, Label, PointTrack, PseudoLabelSet};

/// Frame gaps of stage-I training pairs.
pub const STAGE1_GAPS: [usize; 5] = [1, 2, 4, 8, 16];

const OPT_STAGE1: usize = 0;
const OPT_POINT: usize = 1;
const OPT_FLOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    None,
    Point,
    Flow,
}

/// Stage-II phase of a step: blocks alternate, starting with points.
pub fn phase_at(step: usize, block_iterations: usize) -> Phase {
    if (step / block_iterations) % 2 == 0 {
        Phase::Point
    } else {
        Phase::Flow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: u8,
    /// Steps taken in the current stage.
    pub step: usize,
    pub phase: Phase,
    pub rng: RngState,
    /// Exponential moving averages of the logged components.
    pub averages: BTreeMap<String, f64>,
    /// Parameter fingerprint when the current stage began.
    pub snapshot: String,
    /// Latest stage-II point and flow losses, summed into the logged total.
    pub latest: [f64; 2],
}

impl TrainState {
    fn begin(stage: u8, seed: u64, snapshot: String) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage as u64);
        Self { stage, step: 0, phase: Phase::None, rng: RngState::capture(&rng), averages: BTreeMap::new(), snapshot, latest: [0.0; 2] }
    }
}

/// Rows of `step,component,value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(usize, String, f64)>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, component: &str, value: f64) {
        self.rows.push((step, component.to_string(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,component,value\n");
        for (step, c, v) in &self.rows {
            let _ = writeln!(s, "{step},{c},{v}");
        }
        s
    }

    pub fn values(&self, component: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == component).map(|r| (r.0, r.2)).collect()
    }
}

/// A video with ground truth only on its first and last frames, plus the
/// pseudo labels for the frames between, if generated.
#[derive(Debug, Clone)]
pub struct SparseVideo {
    pub name: String,
    pub frames: Vec<Frame>,
    pub sparse: Vec<PointTrack>,
    pub pseudo: Option<PseudoLabelSet>,
}

impl SparseVideo {
    pub fn from_synth(name: &str, sample: &SynthSample, pseudo: Option<PseudoLabelSet>) -> Self {
        Self { name: name.into(), frames: sample.frames.clone(), sparse: sample.sparse_labels(), pseudo }
    }

    pub fn last_frame(&self) -> usize {
        self.frames.len() - 1
    }

    fn gt_last(&self) -> Vec<Label> {
        let last = self.last_frame();
        self.sparse
            .iter()
            .filter_map(|t| t.at_frame(last).map(|p| Label { point_id: t.id, x: p.x, y: p.y, visible: p.visible }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointLosses {
    pub track: f64,
    pub occ: f64,
    pub cons: f64,
    pub total: f64,
}

/// Frozen features of one pair plus the backbone iterates.
struct CachedPair {
    pf: PairFeatures,
    sequence: Vec<Array3<f64>>,
}

/// Per-frame semantic tokens and per-pair frozen features; the frozen
/// parts never change, so entries stay valid for the whole run.
#[derive(Default)]
struct FeatureCache {
    semantic: HashMap<(usize, usize), Arc<Array2<f64>>>,
    pairs: HashMap<(usize, usize, usize), Arc<CachedPair>>,
}

impl FeatureCache {
    fn get(&mut self, model: &Model, video: usize, frames: &[Frame], s: usize, t: usize) -> Result<Arc<CachedPair>> {
        if let Some(p) = self.pairs.get(&(video, s, t)) {
            return Ok(Arc::clone(p));
        }
        let sem = match self.semantic.get(&(video, s)) {
            Some(v) => Arc::clone(v),
            None => {
                let v = model.embed(&frames[s])?;
                self.semantic.insert((video, s), Arc::clone(&v));
                v
            }
        };
        let (pf, sequence) = model.pair_features(&frames[s], &frames[t], sem)?;
        let entry = Arc::new(CachedPair { pf, sequence });
        self.pairs.insert((video, s, t), Arc::clone(&entry));
        Ok(entry)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    /// Stage I, stage-II point phase, stage-II flow phase.
    pub optimizers: Vec<AdamW>,
    pub log: LossLog,
    cache: FeatureCache,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config())?;
        Ok(Self::with_model(cfg, model))
    }

    /// Starts stage I on an already built model.
    pub fn with_model(cfg: TrainConfig, model: Model) -> Self {
        let n = model.params.len();
        let optimizers = vec![AdamW::new(n, cfg.weight_decay); 3];
        let state = TrainState::begin(1, cfg.seed, model.params.fingerprint());
        Self { cfg, model, state, optimizers, log: LossLog::default(), cache: FeatureCache::default() }
    }

    /// Resumes from a checkpoint. The ablation switches baked into the
    /// model must agree with `cfg`.
    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.restore()?;
        let (m, want) = (model.cfg.mfga, cfg.model_config().mfga);
        if m.enabled != want.enabled || m.semantic_enabled != want.semantic_enabled {
            return Err(Error::Config(format!(
                "checkpoint was trained with mfga={} semantic={}, config asks for mfga={} semantic={}",
                m.enabled, m.semantic_enabled, want.enabled, want.semantic_enabled
            )));
        }
        let mut optimizers = ckpt.optimizers.clone();
        if optimizers.len() != 3 || optimizers.iter().any(|o| o.m.len() != model.params.len()) {
            return Err(Error::Config("checkpoint optimizer state does not match the model".into()));
        }
        for o in &mut optimizers {
            o.weight_decay = cfg.weight_decay;
        }
        Ok(Self { cfg, model, state: ckpt.state.clone(), optimizers, log: LossLog::default(), cache: FeatureCache::default() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optimizers, &self.state)
    }

    pub fn alpha(&self) -> f64 {
        match self.state.stage {
            1 => AlphaSchedule::new(self.cfg.stage1.alpha_start, self.cfg.stage1.alpha_end, self.cfg.stage1.iterations.max(1))
                .map_or(self.cfg.stage1.alpha_start, |a| a.alpha_at(self.state.step)),
            _ => AlphaSchedule::new(self.cfg.stage2.alpha_start, self.cfg.stage2.alpha_end, self.cfg.stage2.total.max(1))
                .map_or(self.cfg.stage2.alpha_start, |a| a.alpha_at(self.state.step)),
        }
    }

    fn record(&mut self, component: &str, value: f64) {
        self.log.push(self.state.step, component, value);
        let avg = self.state.averages.entry(component.to_string()).or_insert(value);
        *avg = 0.98 * *avg + 0.02 * value;
    }

    fn apply(&mut self, mut grads: Grads, opt: usize, lr: f64) {
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        let mut vals = self.model.params.values().to_vec();
        self.optimizers[opt].update(&mut vals, &grads, lr);
        self.model.params.values_mut().copy_from_slice(&vals);
    }

    /// Runs stage I until `stage1.iterations` steps have been taken.
    pub fn train_stage1(&mut self, data: &[Arc<SynthSample>]) -> Result<()> {
        self.train_stage1_until(data, self.cfg.stage1.iterations)
    }

    /// Runs stage I up to step `stop` (capped at the configured length).
    pub fn train_stage1_until(&mut self, data: &[Arc<SynthSample>], stop: usize) -> Result<()> {
        let stop = stop.min(self.cfg.stage1.iterations);
        if self.state.stage != 1 {
            return Err(Error::Config(format!("stage I requested but the trainer is in stage {}", self.state.stage)));
        }
        if data.is_empty() {
            return Err(Error::Invalid("stage I needs at least one synthetic video".into()));
        }
        let frozen = self.model.frozen_fingerprint();
        let mut rng = self.state.rng.rng();
        let mut gt_cache: HashMap<(usize, usize, usize), Arc<(Array3<f64>, Array2<bool>)>> = HashMap::new();
        while self.state.step < stop {
            let alpha = self.alpha();
            let batch = self.cfg.stage1.batch;
            let mut grads = self.model.params.zero_grads();
            let (mut occ_sum, mut unc_sum, mut flow_sum) = (0.0, 0.0, 0.0);
            for _ in 0..batch {
                let vi = rng.gen_range(0..data.len());
                let sample = &data[vi];
                let n = sample.frames.len();
                let gaps: Vec<usize> = STAGE1_GAPS.iter().copied().filter(|&g| g < n).collect();
                let gap = gaps[rng.gen_range(0..gaps.len())];
                let s = rng.gen_range(0..n - gap);
                let t = s + gap;
                let pair = self.cache.get(&self.model, vi, &sample.frames, s, t)?;
                let gt = Arc::clone(
                    gt_cache.entry((vi, s, t)).or_insert_with(|| Arc::new((sample.flow_between(s, t).vectors, sample.pair_occlusion(s, t)))),
                );
                let (maps, fcache) = self.model.forward(&pair.pf, alpha)?;
                let w = &self.cfg.loss;
                let nan = abort_on_nan(self.state.step);
                let unc = loss_unc_stage1(&maps.forward.view(), &gt.0.view(), &maps.log_variance.view(), w.huber_delta).map_err(&nan)?;
                let (occ, d_occ) = loss_occ_bce(&maps.occlusion.view(), &gt.1.view()).map_err(&nan)?;
                // frozen iterates followed by the refined estimate
                let mut seq: Vec<ArrayView3<f64>> = pair.sequence.iter().map(|a| a.view()).collect();
                seq.pop();
                seq.push(maps.forward.view());
                let (flow, d_seq) = loss_flow_stage1(&seq, &gt.0.view(), w.gamma_seq).map_err(&nan)?;
                let scale = 1.0 / batch as f64;
                let (h, wd) = pair.pf.size;
                let mut g = MapGrads::zeros(h, wd);
                g.forward = (unc.d_flow + d_seq.last().expect("non-empty sequence")) * scale;
                g.log_variance = unc.d_log_variance * scale;
                g.occlusion = d_occ * (w.eps1 * scale);
                self.model.backward(&mut grads, &pair.pf, &fcache, &g);
                occ_sum += occ * scale;
                unc_sum += unc.value * scale;
                flow_sum += flow * scale;
            }
            let total = loss_total_stage1(occ_sum, unc_sum, flow_sum, &self.cfg.loss);
            if ![occ_sum, unc_sum, flow_sum, total].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: self.state.step,
                    breakdown: format!("occ={occ_sum} unc={unc_sum} flow={flow_sum} total={total}"),
                });
            }
            self.apply(grads, OPT_STAGE1, self.cfg.stage1.lr);
            self.record("stage1/occ", occ_sum);
            self.record("stage1/unc", unc_sum);
            self.record("stage1/flow", flow_sum);
            self.record("stage1/total", total);
            self.state.step += 1;
            self.state.rng = RngState::capture(&rng);
            if self.state.step % 50 == 0 {
                log::info!("stage 1 step {}: total {total:.4} (alpha {alpha:.3e})", self.state.step);
            }
        }
        self.state.rng = RngState::capture(&rng);
        if self.model.frozen_fingerprint() != frozen {
            return Err(Error::Invalid("frozen backbone changed during stage I".into()));
        }
        Ok(())
    }

    /// Switches to stage II; a no-op when already there.
    pub fn begin_stage2(&mut self) {
        if self.state.stage != 2 {
            self.state = TrainState::begin(2, self.cfg.seed, self.model.params.fingerprint());
            self.cache = FeatureCache::default();
        }
    }

    /// Runs stage II until `stage2.total` steps have been taken.
    pub fn train_stage2(&mut self, videos: &[SparseVideo]) -> Result<()> {
        self.train_stage2_until(videos, self.cfg.stage2.total)
    }

    /// Runs stage II up to step `stop` (capped at the configured length).
    pub fn train_stage2_until(&mut self, videos: &[SparseVideo], stop: usize) -> Result<()> {
        let stop = stop.min(self.cfg.stage2.total);
        self.begin_stage2();
        if videos.is_empty() {
            return Err(Error::Invalid("stage II needs at least one video".into()));
        }
        let ab = self.cfg.ablation;
        if ab.point_enabled && videos.iter().all(|v| v.pseudo.is_none()) {
            return Err(Error::AllVideosSkipped);
        }
        let frozen = self.model.frozen_fingerprint();
        let mut rng = self.state.rng.rng();
        let [mut last_point, mut last_flow] = self.state.latest;
        while self.state.step < stop {
            let phase = phase_at(self.state.step, self.cfg.stage2.block_iterations);
            self.state.phase = phase;
            let alpha = self.alpha();
            match phase {
                Phase::Point if ab.point_enabled => {
                    let vi = rng.gen_range(0..videos.len());
                    let video = &videos[vi];
                    if let Some(pseudo) = &video.pseudo {
                        let frames = sample_frames(pseudo, self.cfg.stage2.frames_per_step, &mut rng);
                        let mut grads = self.model.params.zero_grads();
                        let w = self.cfg.loss;
                        let l = {
                            let (model, cache) = (&self.model, &mut self.cache);
                            point_losses(model, video, &frames, alpha, &w, Some(&mut grads), |s, t| {
                                cache.get(model, vi, &video.frames, s, t)
                            })
                            .map_err(abort_on_nan(self.state.step))?
                        };
                        if ![l.track, l.occ, l.cons, l.total].iter().all(|v| v.is_finite()) {
                            return Err(Error::NonFiniteLoss {
                                step: self.state.step,
                                breakdown: format!("track={} occ={} cons={} point={}", l.track, l.occ, l.cons, l.total),
                            });
                        }
                        self.apply(grads, OPT_POINT, self.cfg.stage2.lr_point);
                        last_point = l.total;
                        self.record("stage2/track", l.track);
                        self.record("stage2/occ", l.occ);
                        self.record("stage2/cons", l.cons);
                        self.record("stage2/point", l.total);
                        self.record("stage2/total", last_point + last_flow);
                    } else {
                        log::warn!("stage 2 step {}: video {} has no pseudo labels, skipped", self.state.step, video.name);
                    }
                }
                Phase::Flow if ab.uflow_enabled => {
                    let batch = self.cfg.stage2.batch;
                    let mut grads = self.model.params.zero_grads();
                    let mut total = 0.0;
                    for _ in 0..batch {
                        let vi = rng.gen_range(0..videos.len());
                        let frames = &videos[vi].frames;
                        let s = rng.gen_range(0..frames.len() - 1);
                        let pair = self.cache.get(&self.model, vi, frames, s, s + 1)?;
                        let (maps, fcache) = self.model.forward(&pair.pf, alpha)?;
                        let u = loss_uflow_stage2(
                            &frames[s].pixels.view(),
                            &frames[s + 1].pixels.view(),
                            &maps.forward.view(),
                            &maps.backward.view(),
                            self.cfg.loss.lambda_smooth,
                        )
                        .map_err(abort_on_nan(self.state.step))?;
                        let scale = 1.0 / batch as f64;
                        let (h, w) = pair.pf.size;
                        let mut g = MapGrads::zeros(h, w);
                        g.forward = u.d_fwd * scale;
                        g.backward = u.d_bwd * scale;
                        self.model.backward(&mut grads, &pair.pf, &fcache, &g);
                        total += u.value * scale;
                    }
                    if !total.is_finite() {
                        return Err(Error::NonFiniteLoss { step: self.state.step, breakdown: format!("uflow={total}") });
                    }
                    self.apply(grads, OPT_FLOW, self.cfg.stage2.lr_flow);
                    last_flow = total;
                    self.record("stage2/uflow", total);
                    self.record("stage2/total", last_point + last_flow);
                }
                // switched-off phases leave every parameter untouched
                _ => {}
            }
            self.state.step += 1;
            self.state.rng = RngState::capture(&rng);
            self.state.latest = [last_point, last_flow];
            if self.state.step % 50 == 0 {
                log::info!("stage 2 step {} ({phase:?}): point {last_point:.4} uflow {last_flow:.4}", self.state.step);
            }
        }
        self.state.rng = RngState::capture(&rng);
        if self.model.frozen_fingerprint() != frozen {
            return Err(Error::Invalid("frozen backbone changed during stage II".into()));
        }
        Ok(())
    }
}

/// Loss inputs rejected as non-finite become a training abort at `step`.
fn abort_on_nan(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::NonFiniteLoss { step, breakdown: format!("non-finite {what} entering the loss") },
        other => other,
    }
}

/// Labeled intermediate frames for one point step, plus the last frame.
fn sample_frames(pseudo: &PseudoLabelSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut frames: Vec<usize> = pseudo.labels.keys().copied().filter(|&t| t > 0 && t < pseudo.last_frame).collect();
    if k > 0 && frames.len() > k {
        frames.shuffle(rng);
        frames.truncate(k);
        frames.sort_unstable();
    }
    frames.push(pseudo.last_frame);
    frames
}

/// Stage-II point losses of one video on the given frames, predicting each
/// frame from the direct pair `(0, t)`. Gradients are added to `grads`
/// when given. Without pseudo labels only the last-frame terms remain.
fn point_losses(
    model: &Model,
    video: &SparseVideo,
    frames: &[usize],
    alpha: f64,
    w: &LossWeights,
    mut grads: Option<&mut Grads>,
    mut features: impl FnMut(usize, usize) -> Result<Arc<CachedPair>>,
) -> Result<PointLosses> {
    let last = video.last_frame();
    let empty = PseudoLabelSet { last_frame: last, ..Default::default() };
    let full = video.pseudo.as_ref().unwrap_or(&empty);
    if full.last_frame != last {
        return Err(Error::Invalid(format!("pseudo labels of {} end at frame {}, video at {last}", video.name, full.last_frame)));
    }
    let pseudo = PseudoLabelSet {
        anchors: full.anchors.clone(),
        labels: full.labels.iter().filter(|(t, _)| frames.contains(t)).map(|(t, l)| (*t, l.clone())).collect(),
        survivors: full.survivors.clone(),
        last_frame: last,
    };
    let gt_last = video.gt_last();
    let anchors: BTreeMap<u32, [f64; 2]> = pseudo.anchors.iter().map(|a| (a.point_id, [a.x1, a.y1])).collect();
    let gt_start: BTreeMap<u32, [f64; 2]> =
        video.sparse.iter().filter_map(|t| t.at_frame(0).map(|p| (t.id, p.position()))).collect();

    let mut targets: Vec<(usize, u32, [f64; 2], bool)> = Vec::new();
    for (&t, labels) in &pseudo.labels {
        for l in labels {
            let start = anchors
                .get(&anchor_of(l.point_id))
                .ok_or(Error::UnmatchedLabel { point_id: l.point_id, frame: t })?;
            targets.push((t, l.point_id, *start, !l.visible));
        }
    }
    if frames.contains(&last) {
        for l in &gt_last {
            let start = gt_start.get(&l.point_id).ok_or(Error::UnmatchedLabel { point_id: l.point_id, frame: 0 })?;
            targets.push((last, l.point_id, *start, !l.visible));
        }
    }

    let mut preds = Predictions::new();
    let mut stencils: BTreeMap<(usize, u32), Stencil> = BTreeMap::new();
    let mut passes = Vec::new();
    let (h, wd) = video.frames[0].size();
    for &t in frames {
        if t == 0 || !targets.iter().any(|x| x.0 == t) {
            continue;
        }
        let pair = features(0, t)?;
        let (maps, fcache) = model.forward(&pair.pf, alpha)?;
        let fwd = maps.forward.view();
        for &(_, id, p0, _) in targets.iter().filter(|x| x.0 == t) {
            let st = Stencil::new(h, wd, p0[0], p0[1]);
            preds.insert(
                (t, id),
                PointPrediction {
                    x: p0[0] + st.sample3(&fwd, 0),
                    y: p0[1] + st.sample3(&fwd, 1),
                    confidence: -st.sample2(&maps.log_variance.view()),
                    occlusion_logit: st.sample2(&maps.occlusion.view()),
                },
            );
            stencils.insert((t, id), st);
        }
        if grads.is_some() {
            passes.push((t, pair, fcache));
        }
    }

    let (track, g_track) = loss_track_stage2(&preds, &pseudo, if frames.contains(&last) { &gt_last } else { &[] }, w)?;
    let occ_targets: Vec<(usize, u32, bool)> = targets.iter().map(|x| (x.0, x.1, x.3)).collect();
    let (occ, g_occ) = loss_occ_points(&preds, &occ_targets)?;
    let (cons, g_cons) = loss_cons_stage2(&preds, &pseudo, w)?;
    let total = loss_point_stage2(track, occ, cons, w);

    if let Some(grads) = grads.as_deref_mut() {
        let mut g = PointGrads::new();
        accumulate(&mut g, &g_track, w.eps2);
        accumulate(&mut g, &g_occ, w.eps3);
        accumulate(&mut g, &g_cons, 1.0);
        for (t, pair, fcache) in &passes {
            let mut mg = MapGrads::zeros(h, wd);
            for (&(ft, id), pg) in g.range((*t, 0)..=(*t, u32::MAX)) {
                debug_assert_eq!(ft, *t);
                let st = &stencils[&(ft, id)];
                for (&(y, x), wt) in st.cells.iter().zip(st.weights) {
                    mg.forward[[y, x, 0]] += wt * pg.x;
                    mg.forward[[y, x, 1]] += wt * pg.y;
                    mg.log_variance[[y, x]] -= wt * pg.confidence;
                    mg.occlusion[[y, x]] += wt * pg.occlusion_logit;
                }
            }
            model.backward(grads, &pair.pf, fcache, &mg);
        }
    }
    Ok(PointLosses { track, occ, cons, total })
}

/// Point losses over every labeled frame, without caching or gradients.
pub fn evaluate_point_losses(model: &Model, video: &SparseVideo, alpha: f64, w: &LossWeights) -> Result<PointLosses> {
    let last = video.last_frame();
    let mut frames: Vec<usize> =
        video.pseudo.as_ref().map(|p| p.labels.keys().copied().filter(|&t| t > 0 && t < last).collect()).unwrap_or_default();
    frames.push(last);
    let sem = model.embed(&video.frames[0])?;
    point_losses(model, video, &frames, alpha, w, None, |s, t| {
        let (pf, _) = model.pair_features(&video.frames[s], &video.frames[t], Arc::clone(&sem))?;
        Ok(Arc::new(CachedPair { pf, sequence: Vec::new() }))
    })
}

/// Mean unsupervised flow loss over consecutive pairs.
pub fn evaluate_uflow(model: &Model, frames: &[Frame], alpha: f64, w: &LossWeights) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Invalid("flow loss needs at least two frames".into()));
    }
    let mut total = 0.0;
    for s in 0..frames.len() - 1 {
        let (pf, _) = model.pair_features(&frames[s], &frames[s + 1], model.embed(&frames[s])?)?;
        let (maps, _) = model.forward(&pf, alpha)?;
        total += loss_uflow_stage2(
            &frames[s].pixels.view(),
            &frames[s + 1].pixels.view(),
            &maps.forward.view(),
            &maps.backward.view(),
            w.lambda_smooth,
        )?
        .value;
    }
    Ok(total / (frames.len() - 1) as f64)
}

/// Mean stage-I uncertainty loss over consecutive pairs of a synthetic video.
pub fn evaluate_unc(model: &Model, sample: &SynthSample, alpha: f64, w: &LossWeights) -> Result<f64> {
    let n = sample.frames.len();
    let mut total = 0.0;
    for s in 0..n - 1 {
        let (pf, _) = model.pair_features(&sample.frames[s], &sample.frames[s + 1], model.embed(&sample.frames[s])?)?;
        let (maps, _) = model.forward(&pf, alpha)?;
        let gt = sample.flow_between(s, s + 1).vectors;
        total += loss_unc_stage1(&maps.forward.view(), &gt.view(), &maps.log_variance.view(), w.huber_delta)?.value;
    }
    Ok(total / (n - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, OccluderSpec, SynthSpec};
    use crate::plg::{generate, IdentityTeacher, ListMatcher};
    use crate::types::Correspondence;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            c_ls: 8,
            c_hybrid: 8,
            stage1: Stage1Config { iterations: 4, ..TrainConfig::default().stage1 },
            stage2: Stage2Config { block_iterations: 2, total: 8, frames_per_step: 2, ..TrainConfig::default().stage2 },
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> Vec<Arc<SynthSample>> {
        (0..2)
            .map(|i| {
                let spec = SynthSpec {
                    seed: 40 + i,
                    height: 32,
                    width: 32,
                    frame_count: 5,
                    warp_amplitude: 1.5,
                    grid: 3,
                    occluder: Some(OccluderSpec { width: 8.0, height: 8.0, velocity: [6.0, 0.0], entry_frame: 1, start: None }),
                    ..SynthSpec::default()
                };
                Arc::new(generate_synth(&spec).unwrap())
            })
            .collect()
    }

    fn tiny_videos(data: &[Arc<SynthSample>]) -> Vec<SparseVideo> {
        data.iter()
            .enumerate()
            .map(|(i, s)| {
                let matches: Vec<Correspondence> = s.gt_tracks[..3]
                    .iter()
                    .map(|t| Correspondence { x1: t.query.x, y1: t.query.y, x_t: t.points[4].x, y_t: t.points[4].y, score: 0.9 })
                    .collect();
                let pseudo = generate(&s.frames, &ListMatcher(matches), &[&IdentityTeacher], &Default::default(), "v").unwrap();
                SparseVideo::from_synth(&format!("v{i}"), s, Some(pseudo))
            })
            .collect()
    }

    #[test]
    fn phase_schedule() {
        let phases: Vec<Phase> = (0..400).map(|s| phase_at(s, 100)).collect();
        for (i, chunk) in phases.chunks(100).enumerate() {
            let want = if i % 2 == 0 { Phase::Point } else { Phase::Flow };
            assert!(chunk.iter().all(|p| *p == want));
        }
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let cfg = TrainConfig { stage1: Stage1Config { iterations: 0, ..tiny_cfg().stage1 }, ..tiny_cfg() };
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        tr.train_stage1(&tiny_data()).unwrap();
        assert_eq!(tr.model.params, Model::new(cfg.model_config()).unwrap().params);
        assert!(tr.log.rows.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let data = tiny_data();
        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        tr.train_stage1_until(&data, 2).unwrap();
        let bytes = tr.checkpoint().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.restore().unwrap().params, tr.model.params);
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bumped), Err(Error::VersionMismatch { found: 2, expected: 1 })));
        let no_mfga = TrainConfig { ablation: Ablation { mfga_enabled: false, ..Ablation::default() }, ..tiny_cfg() };
        assert!(Trainer::from_checkpoint(no_mfga, &back).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data();
        let videos = tiny_videos(&data);
        let mut straight = Trainer::new(tiny_cfg()).unwrap();
        straight.train_stage1(&data).unwrap();
        straight.train_stage2_until(&videos, 6).unwrap();

        let mut first = Trainer::new(tiny_cfg()).unwrap();
        first.train_stage1_until(&data, 2).unwrap();
        let mut second = Trainer::from_checkpoint(tiny_cfg(), &Checkpoint::decode(&first.checkpoint().encode()).unwrap()).unwrap();
        second.train_stage1(&data).unwrap();
        let mut s1 = Trainer::new(tiny_cfg()).unwrap();
        s1.train_stage1(&data).unwrap();
        assert_eq!(second.state, s1.state, "stage 1 state");
        assert_eq!(second.model.params, s1.model.params, "stage 1 params");
        second.train_stage2_until(&videos, 3).unwrap();
        let mut third = Trainer::from_checkpoint(tiny_cfg(), &second.checkpoint()).unwrap();
        third.train_stage2_until(&videos, 6).unwrap();
        assert_eq!(third.model.params, straight.model.params);
        assert_eq!(third.state, straight.state);
    }

    #[test]
    fn disabled_phases_change_nothing() {
        let data = tiny_data();
        let videos = tiny_videos(&data);
        let cfg = TrainConfig { ablation: Ablation { uflow_enabled: false, ..Ablation::default() }, ..tiny_cfg() };
        let mut tr = Trainer::new(cfg).unwrap();
        tr.train_stage1(&data).unwrap();
        let frozen = tr.model.frozen_fingerprint();
        tr.train_stage2_until(&videos, 2).unwrap();
        let after_point = tr.model.params.clone();
        tr.train_stage2_until(&videos, 4).unwrap();
        assert_eq!(tr.model.params, after_point);
        tr.train_stage2_until(&videos, 6).unwrap();
        assert_ne!(tr.model.params, after_point);
        assert_eq!(tr.model.frozen_fingerprint(), frozen);
        assert!(tr.log.values("stage2/uflow").is_empty());
    }

    #[test]
    fn missing_labels_and_nan() {
        let data = tiny_data();
        let mut videos = tiny_videos(&data);
        videos.iter_mut().for_each(|v| v.pseudo = None);
        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        tr.begin_stage2();
        assert!(matches!(tr.train_stage2(&videos), Err(Error::AllVideosSkipped)));

        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        tr.model.params.values_mut().fill(f64::NAN);
        match tr.train_stage1(&data) {
            Err(Error::NonFiniteLoss { step, breakdown }) => {
                assert_eq!(step, 0);
                assert!(breakdown.contains("flow"), "{breakdown}");
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn point_gradients_match_differences() {
        let data = tiny_data();
        let videos = tiny_videos(&data);
        let mut model = Model::new(tiny_cfg().model_config()).unwrap();
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in model.params.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let video = &videos[0];
        let frames = vec![1, 2, 4];
        let w = LossWeights::default();
        let sem = model.embed(&video.frames[0]).unwrap();
        let eval = |m: &Model, grads: Option<&mut Grads>| {
            point_losses(m, video, &frames, 0.5, &w, grads, |s, t| {
                let (pf, _) = m.pair_features(&video.frames[s], &video.frames[t], Arc::clone(&sem))?;
                Ok(Arc::new(CachedPair { pf, sequence: Vec::new() }))
            })
            .unwrap()
            .total
        };
        let mut grads = model.params.zero_grads();
        eval(&model, Some(&mut grads));
        let h = 1e-6;
        for spec in model.params.specs().to_vec() {
            let i = spec.offset + spec.len / 3;
            let orig = model.params.values()[i];
            model.params.values_mut()[i] = orig + h;
            let lp = eval(&model, None);
            model.params.values_mut()[i] = orig - h;
            let lm = eval(&model, None);
            model.params.values_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.values()[i];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4), "{}: fd {fd} analytic {an}", spec.name);
        }
    }
}
