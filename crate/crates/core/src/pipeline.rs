//! Desk-scale end-to-end runs on synthetic videos: stage I, pseudo labels,
//! stage II, then tracking held-out videos and scoring them.

use std::sync::Arc;

use crate::backbone::FlowBackbone;
use crate::data::{desk_suite, generate_synth, SynthSample};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::Model;
use crate::plg::{self, teacher_by_name, NccMatcher, PlgConfig, Teacher};
use crate::tracker::{track_points, ModelEstimator, TrackerConfig};
use crate::trainer::{SparseVideo, TrainConfig, Trainer};
use crate::types::{PointTrack, PseudoLabelSet};

/// Track ids of held-out video `i` are offset by `i * VIDEO_ID_STRIDE` when
/// several videos are pooled into one evaluation.
pub const VIDEO_ID_STRIDE: u32 = 100_000;

pub struct DeskSuite {
    pub train: Vec<Arc<SynthSample>>,
    pub held_out: Vec<Arc<SynthSample>>,
}

impl DeskSuite {
    /// `n_train + n_held` videos of [`desk_suite`]; the last `n_held` are held out.
    pub fn generate(seed: u64, n_train: usize, n_held: usize) -> Result<Self> {
        let mut all = desk_suite(seed, n_train + n_held)
            .iter()
            .map(|s| generate_synth(s).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let held_out = all.split_off(n_train);
        Ok(Self { train: all, held_out })
    }
}

/// Pseudo labels for one video with the teachers named in `cfg`. A video
/// without reliable anchors gets `None` and is skipped by stage II.
pub fn pseudo_labels(
    backbone: &Arc<dyn FlowBackbone>,
    sample: &Arc<SynthSample>,
    cfg: &PlgConfig,
    video_id: &str,
) -> Result<Option<PseudoLabelSet>> {
    let teachers = cfg.teachers.iter().map(|n| teacher_by_name(n, backbone, Some(sample))).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn Teacher> = teachers.iter().map(|t| t.as_ref()).collect();
    match plg::generate(&sample.frames, &NccMatcher::default(), &refs, cfg, video_id) {
        Ok(set) => Ok(Some(set)),
        Err(Error::NoReliableAnchors { .. }) => {
            log::warn!("{video_id}: no reliable anchors, no pseudo labels");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Stage-II inputs for the training videos, named `train{i}`.
pub fn sparse_videos(backbone: &Arc<dyn FlowBackbone>, samples: &[Arc<SynthSample>], cfg: &PlgConfig) -> Result<Vec<SparseVideo>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let name = format!("train{i}");
            let pseudo = pseudo_labels(backbone, s, cfg, &name)?;
            Ok(SparseVideo::from_synth(&name, s, pseudo))
        })
        .collect()
}

/// Tracks every ground-truth query of each sample with the network at `alpha`.
pub fn track_samples(model: &Model, alpha: f64, samples: &[Arc<SynthSample>], cfg: &TrackerConfig) -> Result<Vec<Vec<PointTrack>>> {
    samples
        .iter()
        .map(|s| {
            let queries: Vec<_> = s.gt_tracks.iter().map(|t| t.query).collect();
            track_points(&s.frames, &queries, &ModelEstimator::new(model, alpha), cfg)
        })
        .collect()
}

fn offset_ids(tracks: &[PointTrack], video: usize) -> impl Iterator<Item = PointTrack> + '_ {
    tracks.iter().map(move |t| PointTrack { id: t.id + video as u32 * VIDEO_ID_STRIDE, ..t.clone() })
}

/// One report over all held-out videos pooled together.
pub fn evaluate_pooled(predictions: &[Vec<PointTrack>], samples: &[Arc<SynthSample>]) -> Result<MetricReport> {
    if predictions.len() != samples.len() {
        return Err(Error::Invalid(format!("{} predictions for {} videos", predictions.len(), samples.len())));
    }
    let pred: Vec<_> = predictions.iter().enumerate().flat_map(|(i, p)| offset_ids(p, i)).collect();
    let gt: Vec<_> = samples.iter().enumerate().flat_map(|(i, s)| offset_ids(&s.gt_tracks, i)).collect();
    MetricReport::compute(&pred, &gt)
}

/// Everything a desk run produces.
pub struct DeskRun {
    /// Model and loss log at the end of stage I.
    pub stage1_model: Model,
    pub stage1_log: String,
    pub videos: Vec<SparseVideo>,
    pub trainer: Trainer,
}

/// Stage I on `suite.train`.
pub fn run_stage1(cfg: &TrainConfig, suite: &DeskSuite) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.train_stage1(&suite.train)?;
    Ok(trainer)
}

/// Stage II from a finished stage-I trainer. `cfg` may switch stage-II
/// losses on or off but must keep the architecture of the stage-I model.
pub fn run_stage2(stage1: &Trainer, cfg: &TrainConfig, videos: &[SparseVideo]) -> Result<Trainer> {
    let mut trainer = Trainer::from_checkpoint(cfg.clone(), &stage1.checkpoint())?;
    trainer.train_stage2(videos)?;
    Ok(trainer)
}

/// The full pipeline: stage I, pseudo labels for the training videos, stage II.
pub fn run_desk(cfg: &TrainConfig, suite: &DeskSuite, plg_cfg: &PlgConfig) -> Result<DeskRun> {
    let stage1 = run_stage1(cfg, suite)?;
    let videos = sparse_videos(&stage1.model.shared_backbone(), &suite.train, plg_cfg)?;
    let trainer = run_stage2(&stage1, cfg, &videos)?;
    Ok(DeskRun { stage1_model: stage1.model.clone(), stage1_log: stage1.log.to_csv(), videos, trainer })
}
