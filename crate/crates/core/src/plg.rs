//! Pseudo labels for sparsely annotated videos.
//!
//! Anchors come from first-to-last-frame matches above a score threshold.
//! Each teacher tracker propagates the anchors through the whole video; a
//! trajectory survives only if it ends within `d_filter` pixels of its
//! anchor's last-frame position, and non-survivors are dropped from every
//! frame. Labels of several teachers are kept side by side under tagged ids.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;

use crate::backbone::FlowBackbone;
use crate::data::SynthSample;
use crate::error::{Error, Result};
use crate::geometry::{euclidean_dist, Stencil};
use crate::losses::fb_occlusion;
use crate::types::{in_bounds, Anchor, Correspondence, Frame, Label, PointQuery, PointTrack, PseudoLabelSet, TrackPoint};

/// Tagged ids are `TAG_BASE * (slot + 1) + anchor_id`.
pub const TAG_BASE: u32 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct PlgConfig {
    pub score_threshold: f64,
    pub d_filter: f64,
    pub max_anchors: usize,
    pub teachers: Vec<String>,
}

impl Default for PlgConfig {
    fn default() -> Self {
        Self { score_threshold: 0.85, d_filter: 5.0, max_anchors: 8, teachers: vec!["chain".into(), "direct".into()] }
    }
}

impl PlgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!("plg threshold must be in (0, 1), got {}", self.score_threshold)));
        }
        if !(self.d_filter > 0.0) {
            return Err(Error::Config(format!("plg d_filter must be positive, got {}", self.d_filter)));
        }
        if self.max_anchors == 0 || self.max_anchors >= TAG_BASE as usize {
            return Err(Error::Config(format!("plg max_anchors must be in 1..{TAG_BASE}, got {}", self.max_anchors)));
        }
        Ok(())
    }
}

pub fn tag_point_id(slot: usize, anchor_id: u32) -> u32 {
    TAG_BASE * (slot as u32 + 1) + anchor_id
}

/// Anchor id behind a (possibly tagged) label id.
pub fn anchor_of(point_id: u32) -> u32 {
    point_id % TAG_BASE
}

pub trait Matcher {
    fn match_frames(&self, first: &Frame, last: &Frame) -> Result<Vec<Correspondence>>;
}

/// A point tracker: one trajectory per start point, covering every frame.
pub trait Teacher {
    fn name(&self) -> &str;
    fn propagate(&self, video: &[Frame], points: &[[f64; 2]]) -> Result<Vec<Vec<TrackPoint>>>;
}

/// Keep matches scoring at least the threshold, best first, at most
/// `max_anchors`, numbered `0..N`.
pub fn select_anchors(matches: &[Correspondence], cfg: &PlgConfig) -> Result<Vec<Anchor>> {
    let mut kept: Vec<&Correspondence> = matches.iter().filter(|m| m.score >= cfg.score_threshold).collect();
    if kept.is_empty() {
        return Err(Error::NoReliableAnchors { threshold: cfg.score_threshold });
    }
    // stable: equal scores keep matcher order
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(cfg.max_anchors);
    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(i, m)| Anchor { point_id: i as u32, x1: m.x1, y1: m.y1, x_t: m.x_t, y_t: m.y_t, score: m.score })
        .collect())
}

pub fn propagate(teacher: &dyn Teacher, video: &[Frame], anchors: &[Anchor], video_id: &str) -> Result<Vec<PointTrack>> {
    let fail = |reason: String| Error::Teacher { teacher: teacher.name().into(), video: video_id.into(), reason };
    let starts: Vec<[f64; 2]> = anchors.iter().map(|a| [a.x1, a.y1]).collect();
    let raw = teacher.propagate(video, &starts).map_err(|e| fail(e.to_string()))?;
    if raw.len() != anchors.len() {
        return Err(fail(format!("returned {} tracks for {} anchors", raw.len(), anchors.len())));
    }
    anchors
        .iter()
        .zip(raw)
        .map(|(a, points)| {
            if points.len() != video.len() || points.iter().enumerate().any(|(t, p)| p.frame != t) {
                return Err(fail(format!("track for anchor {} does not cover all {} frames", a.point_id, video.len())));
            }
            if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
                return Err(fail(format!("non-finite position for anchor {}", a.point_id)));
            }
            Ok(PointTrack { id: a.point_id, query: PointQuery { frame_index: 0, x: a.x1, y: a.y1 }, points })
        })
        .collect()
}

/// Tracks ending more than `d_filter` from their anchor are removed from
/// every frame; survivors are labeled on all intermediate frames.
pub fn filter_and_backtrace(tracks: &[PointTrack], anchors: &[Anchor], cfg: &PlgConfig, last_frame: usize) -> PseudoLabelSet {
    let mut set = PseudoLabelSet { anchors: anchors.to_vec(), last_frame, ..Default::default() };
    let by_id: BTreeMap<u32, &Anchor> = anchors.iter().map(|a| (a.point_id, a)).collect();
    for track in tracks {
        let Some(anchor) = by_id.get(&track.id) else { continue };
        let Some(end) = track.at_frame(last_frame) else { continue };
        if euclidean_dist(end.position(), [anchor.x_t, anchor.y_t]) > cfg.d_filter {
            continue;
        }
        set.survivors.push(track.id);
        for p in &track.points {
            if p.frame > 0 && p.frame < last_frame {
                set.labels.entry(p.frame).or_default().push(Label { point_id: track.id, x: p.x, y: p.y, visible: p.visible });
            }
        }
    }
    set.survivors.sort_unstable();
    for labels in set.labels.values_mut() {
        labels.sort_by_key(|l| l.point_id);
    }
    set
}

/// Anchors once, then propagate and filter per teacher. With more than one
/// teacher the label ids are tagged by teacher slot.
pub fn generate(
    video: &[Frame],
    matcher: &dyn Matcher,
    teachers: &[&dyn Teacher],
    cfg: &PlgConfig,
    video_id: &str,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    if video.len() < 3 {
        return Err(Error::Invalid(format!("video {video_id} has {} frames, pseudo labels need at least 3", video.len())));
    }
    if teachers.is_empty() {
        return Err(Error::Config("at least one teacher is required".into()));
    }
    let last = video.len() - 1;
    let matches = matcher.match_frames(&video[0], &video[last])?;
    let anchors = select_anchors(&matches, cfg)?;
    let mut per_teacher = Vec::with_capacity(teachers.len());
    for teacher in teachers {
        let tracks = propagate(*teacher, video, &anchors, video_id)?;
        per_teacher.push(filter_and_backtrace(&tracks, &anchors, cfg, last));
    }
    if per_teacher.len() == 1 {
        return Ok(per_teacher.pop().expect("one teacher"));
    }
    let mut merged = PseudoLabelSet { anchors, last_frame: last, ..Default::default() };
    for (slot, set) in per_teacher.into_iter().enumerate() {
        merged.survivors.extend(set.survivors.iter().map(|&id| tag_point_id(slot, id)));
        for (frame, labels) in set.labels {
            merged
                .labels
                .entry(frame)
                .or_default()
                .extend(labels.into_iter().map(|l| Label { point_id: tag_point_id(slot, l.point_id), ..l }));
        }
    }
    merged.survivors.sort_unstable();
    for labels in merged.labels.values_mut() {
        labels.sort_by_key(|l| l.point_id);
    }
    Ok(merged)
}

/// Keeps every point where it started.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTeacher;

impl Teacher for IdentityTeacher {
    fn name(&self) -> &str {
        "identity"
    }

    fn propagate(&self, video: &[Frame], points: &[[f64; 2]]) -> Result<Vec<Vec<TrackPoint>>> {
        Ok(points
            .iter()
            .map(|p| (0..video.len()).map(|t| TrackPoint { frame: t, x: p[0], y: p[1], visible: true, uncertainty: None }).collect())
            .collect())
    }
}

/// Moves every point by a constant velocity, ignoring the images.
#[derive(Debug, Clone, Copy)]
pub struct DriftTeacher {
    pub velocity: [f64; 2],
}

impl Teacher for DriftTeacher {
    fn name(&self) -> &str {
        "drift"
    }

    fn propagate(&self, video: &[Frame], points: &[[f64; 2]]) -> Result<Vec<Vec<TrackPoint>>> {
        let (h, w) = video.first().ok_or(Error::EmptyVideo)?.size();
        Ok(points
            .iter()
            .map(|p| {
                (0..video.len())
                    .map(|t| {
                        let x = p[0] + self.velocity[0] * t as f64;
                        let y = p[1] + self.velocity[1] * t as f64;
                        TrackPoint { frame: t, x, y, visible: in_bounds(h, w, x, y), uncertainty: None }
                    })
                    .collect()
            })
            .collect())
    }
}

/// Follows the analytic motion of a synthetic video.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    pub sample: Arc<SynthSample>,
}

impl Teacher for OracleTeacher {
    fn name(&self) -> &str {
        "oracle"
    }

    fn propagate(&self, video: &[Frame], points: &[[f64; 2]]) -> Result<Vec<Vec<TrackPoint>>> {
        if video.len() != self.sample.frames.len() {
            return Err(Error::Invalid("oracle teacher used on a different video".into()));
        }
        Ok(points
            .iter()
            .enumerate()
            .map(|(i, p)| self.sample.track_from(i as u32, PointQuery { frame_index: 0, x: p[0], y: p[1] }).points)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowTeacherMode {
    /// Compose consecutive-frame flows.
    Chain,
    /// Flow from the first frame straight to each frame.
    Direct,
}

/// Tracks with the frozen flow backbone; a point is marked hidden where the
/// forward-backward check fails or it leaves the frame.
#[derive(Clone)]
pub struct FlowTeacher {
    pub backbone: Arc<dyn FlowBackbone>,
    pub mode: FlowTeacherMode,
}

impl Teacher for FlowTeacher {
    fn name(&self) -> &str {
        match self.mode {
            FlowTeacherMode::Chain => "chain",
            FlowTeacherMode::Direct => "direct",
        }
    }

    fn propagate(&self, video: &[Frame], points: &[[f64; 2]]) -> Result<Vec<Vec<TrackPoint>>> {
        let first = video.first().ok_or(Error::EmptyVideo)?;
        let (h, w) = first.size();
        let mut tracks: Vec<Vec<TrackPoint>> = points
            .iter()
            .map(|p| vec![TrackPoint { frame: 0, x: p[0], y: p[1], visible: true, uncertainty: None }])
            .collect();
        for t in 1..video.len() {
            let src = match self.mode {
                FlowTeacherMode::Chain => t - 1,
                FlowTeacherMode::Direct => 0,
            };
            let out = self.backbone.compute_flow_features(&video[src], &video[t])?;
            let occ = fb_occlusion(&out.forward_flow.vectors.view(), &out.backward_flow.vectors.view()).mapv(|o| if o { 1.0 } else { 0.0 });
            for track in tracks.iter_mut() {
                let from = track[src];
                let st = Stencil::new(h, w, from.x, from.y);
                let fv = out.forward_flow.vectors.view();
                let x = from.x + st.sample3(&fv, 0);
                let y = from.y + st.sample3(&fv, 1);
                let hidden = st.sample2(&occ.view()) > 0.5;
                let visible = in_bounds(h, w, x, y) && !hidden && (self.mode == FlowTeacherMode::Direct || from.visible);
                track.push(TrackPoint { frame: t, x, y, visible, uncertainty: None });
            }
        }
        Ok(tracks)
    }
}

fn gray(frame: &Frame) -> Array2<f64> {
    let (h, w) = frame.size();
    Array2::from_shape_fn((h, w), |(y, x)| (frame.pixels[[y, x, 0]] + frame.pixels[[y, x, 1]] + frame.pixels[[y, x, 2]]) / 3.0)
}

/// Harris corners on the first frame, matched into the last frame by
/// normalized cross-correlation over a search window.
///
/// The score is the correlation of the best match, discounted when a
/// second, distinct peak comes close to it.
#[derive(Debug, Clone, Copy)]
pub struct NccMatcher {
    pub max_keypoints: usize,
    pub patch_radius: usize,
    pub search_radius: usize,
    pub border: usize,
}

impl Default for NccMatcher {
    fn default() -> Self {
        Self { max_keypoints: 24, patch_radius: 4, search_radius: 20, border: 6 }
    }
}

impl NccMatcher {
    pub fn keypoints(&self, frame: &Frame) -> Vec<(usize, usize)> {
        let g = gray(frame);
        let (h, w) = g.dim();
        let mut ix = Array2::<f64>::zeros((h, w));
        let mut iy = Array2::<f64>::zeros((h, w));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                ix[[y, x]] = (g[[y, x + 1]] - g[[y, x - 1]]) / 2.0;
                iy[[y, x]] = (g[[y + 1, x]] - g[[y - 1, x]]) / 2.0;
            }
        }
        let r = 2usize;
        let mut response = Array2::<f64>::zeros((h, w));
        for y in r..h - r {
            for x in r..w - r {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        a += ix[[yy, xx]] * ix[[yy, xx]];
                        b += ix[[yy, xx]] * iy[[yy, xx]];
                        c += iy[[yy, xx]] * iy[[yy, xx]];
                    }
                }
                response[[y, x]] = a * c - b * b - 0.04 * (a + c) * (a + c);
            }
        }
        let nms = 3isize;
        let mut peaks = Vec::new();
        let lo = self.border.max(self.patch_radius);
        for y in lo..h.saturating_sub(lo) {
            for x in lo..w.saturating_sub(lo) {
                let v = response[[y, x]];
                if v <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'scan: for dy in -nms..=nms {
                    for dx in -nms..=nms {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let o = response[[yy as usize, xx as usize]];
                        // ties go to the earlier pixel in raster order
                        if o > v || (o == v && (dy, dx) < (0, 0)) {
                            is_max = false;
                            break 'scan;
                        }
                    }
                }
                if is_max {
                    peaks.push((v, y, x));
                }
            }
        }
        peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        peaks.into_iter().take(self.max_keypoints).map(|(_, y, x)| (y, x)).collect()
    }

    fn ncc(&self, a: &Array2<f64>, ay: usize, ax: usize, b: &Array2<f64>, by: usize, bx: usize) -> f64 {
        let r = self.patch_radius as isize;
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let va = a[[(ay as isize + dy) as usize, (ax as isize + dx) as usize]];
                let vb = b[[(by as isize + dy) as usize, (bx as isize + dx) as usize]];
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
            }
        }
        let cov = sab - sa * sb / n;
        let var = (saa - sa * sa / n) * (sbb - sb * sb / n);
        if var <= 1e-18 {
            0.0
        } else {
            cov / var.sqrt()
        }
    }
}

impl Matcher for NccMatcher {
    fn match_frames(&self, first: &Frame, last: &Frame) -> Result<Vec<Correspondence>> {
        if first.size() != last.size() {
            return Err(Error::FrameSizeMismatch(first.height(), first.width(), last.height(), last.width()));
        }
        let (ga, gb) = (gray(first), gray(last));
        let (h, w) = ga.dim();
        let pr = self.patch_radius;
        let mut out = Vec::new();
        for (ky, kx) in self.keypoints(first) {
            let sr = self.search_radius;
            let (y0, y1) = (ky.saturating_sub(sr).max(pr), (ky + sr).min(h - 1 - pr));
            let (x0, x1) = (kx.saturating_sub(sr).max(pr), (kx + sr).min(w - 1 - pr));
            let mut scores = Array2::<f64>::from_elem((h, w), f64::NEG_INFINITY);
            let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let s = self.ncc(&ga, ky, kx, &gb, y, x);
                    scores[[y, x]] = s;
                    if s > best.0 {
                        best = (s, y, x);
                    }
                }
            }
            let (bs, by, bx) = best;
            if !bs.is_finite() {
                continue;
            }
            let mut second = f64::NEG_INFINITY;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if y.abs_diff(by) > 2 || x.abs_diff(bx) > 2 {
                        second = second.max(scores[[y, x]]);
                    }
                }
            }
            let sub = |lo: f64, mid: f64, hi: f64| {
                let d = lo - 2.0 * mid + hi;
                if lo.is_finite() && hi.is_finite() && d < -1e-12 {
                    (0.5 * (lo - hi) / d).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            let sx = if bx > x0 && bx < x1 { sub(scores[[by, bx - 1]], bs, scores[[by, bx + 1]]) } else { 0.0 };
            let sy = if by > y0 && by < y1 { sub(scores[[by - 1, bx]], bs, scores[[by + 1, bx]]) } else { 0.0 };
            let distinct = if second.is_finite() { (10.0 * (bs - second)).clamp(0.0, 1.0) } else { 1.0 };
            out.push(Correspondence {
                x1: kx as f64,
                y1: ky as f64,
                x_t: bx as f64 + sx,
                y_t: by as f64 + sy,
                score: (bs.max(0.0) * distinct).clamp(0.0, 1.0),
            });
        }
        Ok(out)
    }
}

/// Maps corners of the first frame through the known synthetic motion;
/// score 1 when the point is visible at both ends, else 0.
#[derive(Debug, Clone)]
pub struct OracleMatcher {
    pub sample: Arc<SynthSample>,
    pub keypoints: NccMatcher,
}

impl Matcher for OracleMatcher {
    fn match_frames(&self, first: &Frame, _last: &Frame) -> Result<Vec<Correspondence>> {
        let last = self.sample.frames.len() - 1;
        Ok(self
            .keypoints
            .keypoints(first)
            .into_iter()
            .map(|(y, x)| {
                let track = self.sample.track_from(0, PointQuery { frame_index: 0, x: x as f64, y: y as f64 });
                let end = track.points[last];
                let ok = track.points[0].visible && end.visible;
                Correspondence { x1: x as f64, y1: y as f64, x_t: end.x, y_t: end.y, score: if ok { 1.0 } else { 0.0 } }
            })
            .collect())
    }
}

/// Fixed list of correspondences, for tests and external matchers.
#[derive(Debug, Clone, Default)]
pub struct ListMatcher(pub Vec<Correspondence>);

impl Matcher for ListMatcher {
    fn match_frames(&self, _: &Frame, _: &Frame) -> Result<Vec<Correspondence>> {
        Ok(self.0.clone())
    }
}

/// Teachers by CLI/config name. `oracle` needs the synthetic ground truth.
pub fn teacher_by_name(
    name: &str,
    backbone: &Arc<dyn FlowBackbone>,
    truth: Option<&Arc<SynthSample>>,
) -> Result<Box<dyn Teacher>> {
    Ok(match name {
        "identity" => Box::new(IdentityTeacher),
        "drift" => Box::new(DriftTeacher { velocity: [0.5, 0.0] }),
        "chain" => Box::new(FlowTeacher { backbone: Arc::clone(backbone), mode: FlowTeacherMode::Chain }),
        "direct" => Box::new(FlowTeacher { backbone: Arc::clone(backbone), mode: FlowTeacherMode::Direct }),
        "oracle" => Box::new(OracleTeacher {
            sample: Arc::clone(truth.ok_or_else(|| Error::Config("teacher `oracle` needs synthetic ground truth".into()))?),
        }),
        other => return Err(Error::Config(format!("unknown teacher `{other}` (identity, drift, chain, direct, oracle)"))),
    })
}
