//! Long-term tracking by chaining pairwise flows over several frame gaps.
//!
//! For each frame `t` every query gets one candidate per gap `d` (from its
//! state at `t - d`) plus a direct one from the query frame. Candidates
//! carry the sum of sampled log-variances along their chain; the lowest
//! scoring visible candidate wins.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3};

use crate::backbone::FlowBackbone;
use crate::data::io::{frame_path, write_png};
use crate::data::SynthSample;
use crate::error::{Error, Result};
use crate::geometry::Stencil;
use crate::losses::huber;
use crate::model::Model;
use crate::types::{in_bounds, logistic, Frame, PointQuery, PointTrack, TrackPoint};

/// Flow, log-variance and occlusion probability at the source frame's pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub flow: Array3<f64>,
    pub log_variance: Array2<f64>,
    pub occlusion: Array2<f64>,
}

pub trait PairEstimator {
    fn estimate(&self, video: &[Frame], s: usize, t: usize) -> Result<PairEstimate>;
}

/// Trained network at a fixed α; semantic tokens are cached per frame.
pub struct ModelEstimator<'a> {
    pub model: &'a Model,
    pub alpha: f64,
    semantic: Mutex<HashMap<usize, Arc<Array2<f64>>>>,
}

impl<'a> ModelEstimator<'a> {
    pub fn new(model: &'a Model, alpha: f64) -> Self {
        Self { model, alpha, semantic: Mutex::new(HashMap::new()) }
    }
}

impl PairEstimator for ModelEstimator<'_> {
    fn estimate(&self, video: &[Frame], s: usize, t: usize) -> Result<PairEstimate> {
        let cached = self.semantic.lock().expect("semantic cache").get(&s).cloned();
        let sem = match cached {
            Some(v) => v,
            None => {
                let v = self.model.embed(&video[s])?;
                self.semantic.lock().expect("semantic cache").insert(s, Arc::clone(&v));
                v
            }
        };
        let (pf, _) = self.model.pair_features(&video[s], &video[t], sem)?;
        let (maps, _) = self.model.forward(&pf, self.alpha)?;
        Ok(PairEstimate { flow: maps.forward, log_variance: maps.log_variance, occlusion: maps.occlusion.mapv(logistic) })
    }
}

/// Ground truth from a synthetic sample. Without a backbone the flow is
/// exact; with one, the backbone flow is scored by its true error.
#[derive(Clone)]
pub struct OracleEstimator {
    pub sample: Arc<SynthSample>,
    pub backbone: Option<Arc<dyn FlowBackbone>>,
}

impl PairEstimator for OracleEstimator {
    fn estimate(&self, video: &[Frame], s: usize, t: usize) -> Result<PairEstimate> {
        let gt = self.sample.flow_between(s, t).vectors;
        let flow = match &self.backbone {
            Some(b) => b.compute_flow_features(&video[s], &video[t])?.forward_flow.vectors,
            None => gt.clone(),
        };
        let (h, w, _) = flow.dim();
        let log_variance = Array2::from_shape_fn((h, w), |(y, x)| {
            let e = (flow[[y, x, 0]] - gt[[y, x, 0]]).hypot(flow[[y, x, 1]] - gt[[y, x, 1]]);
            huber(e, 1.0).max(1e-4).ln()
        });
        let occlusion = self.sample.pair_occlusion(s, t).mapv(|o| if o { 1.0 } else { 0.0 });
        Ok(PairEstimate { flow, log_variance, occlusion })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub deltas: Vec<usize>,
    pub occlusion_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { deltas: vec![1, 2, 4, 8], occlusion_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainCandidate {
    pub delta: usize,
    pub position: [f64; 2],
    /// Log of the summed link variances along the chain, so every extra
    /// link raises the score.
    pub accumulated_log_variance: f64,
    /// Log-variance of the last link alone.
    pub step_log_variance: f64,
    pub occluded: bool,
}

/// Lowest score among visible candidates, else among all; ties keep the
/// smaller gap. Candidates must be sorted by gap.
pub fn select_candidate(candidates: &[ChainCandidate]) -> Option<&ChainCandidate> {
    let best = |visible_only: bool| {
        candidates
            .iter()
            .filter(|c| !visible_only || !c.occluded)
            .fold(None::<&ChainCandidate>, |acc, c| match acc {
                Some(a) if a.accumulated_log_variance <= c.accumulated_log_variance => Some(a),
                _ => Some(c),
            })
    };
    best(true).or_else(|| best(false))
}

#[derive(Debug, Clone, Copy)]
struct State {
    position: [f64; 2],
    score: f64,
    visible: bool,
}

pub fn track_points(video: &[Frame], queries: &[PointQuery], estimator: &dyn PairEstimator, cfg: &TrackerConfig) -> Result<Vec<PointTrack>> {
    let first = video.first().ok_or(Error::EmptyVideo)?;
    let (h, w) = first.size();
    if cfg.deltas.is_empty() || cfg.deltas.contains(&0) {
        return Err(Error::Config("tracker gaps must be positive and non-empty".into()));
    }
    for q in queries {
        if q.frame_index >= video.len() || !in_bounds(h, w, q.x, q.y) {
            return Err(Error::Invalid(format!("query ({}, {}) at frame {} is outside the video", q.x, q.y, q.frame_index)));
        }
    }
    let mut pairs: HashMap<(usize, usize), PairEstimate> = HashMap::new();
    let mut states: Vec<Vec<State>> =
        queries.iter().map(|q| vec![State { position: [q.x, q.y], score: f64::NEG_INFINITY, visible: true }]).collect();
    let mut tracks: Vec<PointTrack> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| PointTrack {
            id: i as u32,
            query: *q,
            points: vec![TrackPoint { frame: q.frame_index, x: q.x, y: q.y, visible: true, uncertainty: None }],
        })
        .collect();

    for t in 1..video.len() {
        for (qi, q) in queries.iter().enumerate() {
            if t <= q.frame_index {
                continue;
            }
            let span = t - q.frame_index;
            let mut gaps: Vec<usize> = cfg.deltas.iter().copied().filter(|&d| d <= span).collect();
            gaps.push(span);
            gaps.sort_unstable();
            gaps.dedup();
            let mut candidates = Vec::with_capacity(gaps.len());
            for d in gaps {
                let s = t - d;
                if !pairs.contains_key(&(s, t)) {
                    pairs.insert((s, t), estimator.estimate(video, s, t)?);
                }
                let est = &pairs[&(s, t)];
                let from = states[qi][s - q.frame_index];
                let st = Stencil::new(h, w, from.position[0], from.position[1]);
                let fv = est.flow.view();
                let position = [from.position[0] + st.sample3(&fv, 0), from.position[1] + st.sample3(&fv, 1)];
                let step = st.sample2(&est.log_variance.view());
                let p_occ = st.sample2(&est.occlusion.view());
                candidates.push(ChainCandidate {
                    delta: d,
                    position,
                    accumulated_log_variance: log_add_exp(from.score, step),
                    step_log_variance: step,
                    occluded: !from.visible || p_occ > cfg.occlusion_threshold || !in_bounds(h, w, position[0], position[1]),
                });
            }
            let c = *select_candidate(&candidates).expect("at least the direct candidate");
            states[qi].push(State { position: c.position, score: c.accumulated_log_variance, visible: !c.occluded });
            tracks[qi].points.push(TrackPoint {
                frame: t,
                x: c.position[0],
                y: c.position[1],
                visible: !c.occluded,
                uncertainty: Some(logistic(c.step_log_variance)),
            });
        }
        // every pair ends at t, none is needed again
        pairs.clear();
    }
    Ok(tracks)
}

/// `ln(e^a + e^b)`, exact when `a` is `-inf`.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn palette(id: u32) -> [f64; 3] {
    const COLORS: [[f64; 3]; 6] =
        [[1.0, 0.9, 0.1], [0.1, 0.9, 1.0], [0.2, 1.0, 0.3], [1.0, 0.4, 0.9], [1.0, 0.6, 0.1], [0.6, 0.6, 1.0]];
    COLORS[id as usize % COLORS.len()]
}

fn put(px: &mut Array3<f64>, x: i64, y: i64, c: [f64; 3]) {
    let (h, w, _) = px.dim();
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        for k in 0..3 {
            px[[y as usize, x as usize, k]] = c[k];
        }
    }
}

fn line(px: &mut Array3<f64>, a: [f64; 2], b: [f64; 2], c: [f64; 3]) {
    let n = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let s = i as f64 / n as f64;
        put(px, (a[0] + s * (b[0] - a[0])).round() as i64, (a[1] + s * (b[1] - a[1])).round() as i64, c);
    }
}

/// Trajectories so far as polylines; a filled square marks a visible point,
/// an outlined one a hidden point.
pub fn render_overlay(video: &[Frame], tracks: &[PointTrack]) -> Vec<Frame> {
    video
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let mut px = frame.pixels.clone();
            for track in tracks {
                let color = palette(track.id);
                let upto: Vec<&TrackPoint> = track.points.iter().filter(|p| p.frame <= t).collect();
                for seg in upto.windows(2) {
                    line(&mut px, seg[0].position(), seg[1].position(), color);
                }
                let Some(now) = upto.last().filter(|p| p.frame == t) else { continue };
                let (cx, cy) = (now.x.round() as i64, now.y.round() as i64);
                for dy in -2..=2i64 {
                    for dx in -2..=2i64 {
                        let edge = dx.abs() == 2 || dy.abs() == 2;
                        if now.visible && dx.abs() <= 1 && dy.abs() <= 1 {
                            put(&mut px, cx + dx, cy + dy, color);
                        } else if !now.visible && edge {
                            put(&mut px, cx + dx, cy + dy, [1.0, 0.0, 0.0]);
                        }
                    }
                }
            }
            Frame { pixels: px, index: frame.index }
        })
        .collect()
}

pub fn write_overlay(video: &[Frame], tracks: &[PointTrack], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    render_overlay(video, tracks)
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let p = frame_path(out_dir, t);
            write_png(&p, f)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, OccluderSpec, SynthSpec};

    fn sample(spec: SynthSpec) -> Arc<SynthSample> {
        Arc::new(generate_synth(&spec).unwrap())
    }

    fn query(x: f64, y: f64) -> PointQuery {
        PointQuery { frame_index: 0, x, y }
    }

    #[test]
    fn static_video_is_constant() {
        let s = sample(SynthSpec { seed: 3, warp_amplitude: 0.0, frame_count: 6, occluder: None, ..SynthSpec::default() });
        let est = OracleEstimator { sample: Arc::clone(&s), backbone: None };
        let tracks = track_points(&s.frames, &[query(10.0, 20.0), query(40.5, 33.25)], &est, &TrackerConfig::default()).unwrap();
        for tr in &tracks {
            assert_eq!(tr.points.len(), 6);
            for p in &tr.points {
                assert!((p.x - tr.query.x).abs() < 0.5 && (p.y - tr.query.y).abs() < 0.5 && p.visible);
            }
        }
    }

    #[test]
    fn translation_composes() {
        let s = sample(SynthSpec {
            seed: 4,
            warp_amplitude: 0.0,
            translation: [2.0, 0.0],
            frame_count: 11,
            occluder: None,
            ..SynthSpec::default()
        });
        let est = OracleEstimator { sample: Arc::clone(&s), backbone: None };
        let tr = &track_points(&s.frames, &[query(12.0, 30.0)], &est, &TrackerConfig::default()).unwrap()[0];
        let end = tr.points.last().unwrap();
        assert!((end.x - 32.0).abs() < 1.0 && (end.y - 30.0).abs() < 1.0, "{end:?}");
    }

    #[test]
    fn occluded_frames_then_reacquired() {
        // a 20 px wide occluder sweeps right over x = 30 during frames 5..=7
        let s = sample(SynthSpec {
            seed: 6,
            warp_amplitude: 1.0,
            frame_count: 12,
            occluder: Some(OccluderSpec { width: 20.0, height: 12.0, velocity: [8.0, 0.0], entry_frame: 5, start: Some([12.0, 24.0]) }),
            ..SynthSpec::default()
        });
        let gt = s.track_from(0, query(30.0, 30.0));
        let hidden: Vec<usize> = gt.points.iter().filter(|p| !p.visible).map(|p| p.frame).collect();
        assert_eq!(hidden, vec![5, 6, 7]);
        let est = OracleEstimator { sample: Arc::clone(&s), backbone: None };
        let tr = &track_points(&s.frames, &[query(30.0, 30.0)], &est, &TrackerConfig::default()).unwrap()[0];
        let flagged: Vec<usize> = tr.points.iter().filter(|p| !p.visible).map(|p| p.frame).collect();
        assert_eq!(flagged, vec![5, 6, 7]);
        let p9 = tr.points[9].position();
        let g9 = gt.points[9].position();
        assert!((p9[0] - g9[0]).hypot(p9[1] - g9[1]) < 3.0);
    }

    #[test]
    fn render_is_deterministic() {
        let s = sample(SynthSpec { seed: 2, frame_count: 4, ..SynthSpec::default() });
        assert_eq!(render_overlay(&s.frames, &[]), s.frames);
        let tr = PointTrack {
            id: 0,
            query: query(20.0, 20.0),
            points: (0..4).map(|t| TrackPoint { frame: t, x: 20.0, y: 20.0, visible: true, uncertainty: None }).collect(),
        };
        let out = render_overlay(&s.frames, std::slice::from_ref(&tr));
        for f in &out {
            assert_eq!(f.pixels[[20, 20, 0]], 1.0);
            assert_eq!(f.pixels[[21, 21, 1]], 0.9);
        }
        let dir = tempfile::tempdir().unwrap();
        let a = write_overlay(&s.frames, std::slice::from_ref(&tr), &dir.path().join("a")).unwrap();
        let b = write_overlay(&s.frames, std::slice::from_ref(&tr), &dir.path().join("b")).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        assert!(matches!(track_points(&[], &[], &OracleEstimator { sample: s, backbone: None }, &TrackerConfig::default()), Err(Error::EmptyVideo)));
    }
}
