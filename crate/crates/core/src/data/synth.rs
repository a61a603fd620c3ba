//! Synthetic videos with analytic ground truth.
//!
//! Material points are identified by their position `u` in frame 0. At time
//! `t` a material point sits at `u + D_t(u)`, where `D_t` is a global drift
//! plus a sum of gaussian radial-basis displacements with smoothly varying
//! amplitudes. Frames are rendered by inverting that map per pixel, and all
//! flows, tracks and occlusion masks are derived from the same map.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::texture::{blob_color, hash01, noise_color};
use crate::error::{Error, Result};
use crate::types::{in_bounds, FlowField, Frame, PointQuery, PointTrack, TrackPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Noise,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderSpec {
    pub width: f64,
    pub height: f64,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub entry_frame: usize,
    /// Top-left corner at `entry_frame`; by default it enters from the side
    /// it moves away from, vertically near the middle.
    pub start: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    pub warp_amplitude: f64,
    pub warp_control_points: usize,
    /// Global drift in pixels per frame.
    pub translation: [f64; 2],
    pub occluder: Option<OccluderSpec>,
    pub texture: Texture,
    /// Ground-truth queries form a `grid x grid` lattice on frame 0.
    pub grid: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            frame_count: 20,
            warp_amplitude: 3.0,
            warp_control_points: 4,
            translation: [0.0, 0.0],
            occluder: None,
            texture: Texture::Noise,
            grid: 6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid("synthetic frames must be at least 8x8".into()));
        }
        if self.frame_count < 3 {
            return Err(Error::Invalid(format!("frame_count must be >= 3, got {}", self.frame_count)));
        }
        let limit = self.height.min(self.width) as f64 / 4.0;
        if !(self.warp_amplitude >= 0.0) || self.warp_amplitude >= limit {
            return Err(Error::FoldOver(format!(
                "warp amplitude {} must be below min(H, W)/4 = {limit}",
                self.warp_amplitude
            )));
        }
        let lip = MotionModel::new(self).lipschitz_bound();
        if lip >= 0.7 {
            return Err(Error::FoldOver(format!("deformation gradient bound {lip:.3} >= 0.7")));
        }
        Ok(())
    }

    /// Parse flat `key = value` text; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = crate::config::parse_flat(text)?;
        let mut spec = Self::default();
        let mut occ: Option<OccluderSpec> = None;
        let mut occ_start = [None, None];
        for (key, value) in &kv {
            let num = || value.parse::<f64>().map_err(|_| Error::Config(format!("`{key}`: expected a number, got `{value}`")));
            let int = || value.parse::<usize>().map_err(|_| Error::Config(format!("`{key}`: expected an integer, got `{value}`")));
            match key.as_str() {
                "seed" => spec.seed = value.parse().map_err(|_| Error::Config(format!("`seed`: bad integer `{value}`")))?,
                "height" => spec.height = int()?,
                "width" => spec.width = int()?,
                "frames" => spec.frame_count = int()?,
                "amplitude" => spec.warp_amplitude = num()?,
                "control_points" => spec.warp_control_points = int()?,
                "translation_x" => spec.translation[0] = num()?,
                "translation_y" => spec.translation[1] = num()?,
                "grid" => spec.grid = int()?,
                "count" => {}
                "texture" => {
                    spec.texture = match value.as_str() {
                        "noise" => Texture::Noise,
                        "blobs" => Texture::Blobs,
                        other => return Err(Error::Config(format!("`texture`: unknown `{other}`"))),
                    }
                }
                "occluder" => {
                    if value == "none" {
                        occ = None;
                    } else {
                        occ_mut(&mut occ);
                    }
                }
                "occluder.width" => occ_mut(&mut occ).width = num()?,
                "occluder.height" => occ_mut(&mut occ).height = num()?,
                "occluder.vx" => occ_mut(&mut occ).velocity[0] = num()?,
                "occluder.vy" => occ_mut(&mut occ).velocity[1] = num()?,
                "occluder.entry" => occ_mut(&mut occ).entry_frame = int()?,
                "occluder.x" => occ_start[0] = Some(num()?),
                "occluder.y" => occ_start[1] = Some(num()?),
                other => return Err(Error::Config(format!("unknown synth key `{other}`"))),
            }
        }
        if let (Some(o), [Some(x), Some(y)]) = (occ.as_mut(), occ_start) {
            o.start = Some([x, y]);
        }
        spec.occluder = occ;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed = {}\nheight = {}\nwidth = {}\nframes = {}\namplitude = {}\ncontrol_points = {}\ntranslation_x = {}\ntranslation_y = {}\ntexture = {}\ngrid = {}\n",
            self.seed,
            self.height,
            self.width,
            self.frame_count,
            self.warp_amplitude,
            self.warp_control_points,
            self.translation[0],
            self.translation[1],
            match self.texture {
                Texture::Noise => "noise",
                Texture::Blobs => "blobs",
            },
            self.grid,
        );
        match &self.occluder {
            None => s.push_str("occluder = none\n"),
            Some(o) => {
                s.push_str(&format!(
                    "occluder = rect\noccluder.width = {}\noccluder.height = {}\noccluder.vx = {}\noccluder.vy = {}\noccluder.entry = {}\n",
                    o.width, o.height, o.velocity[0], o.velocity[1], o.entry_frame
                ));
                if let Some([x, y]) = o.start {
                    s.push_str(&format!("occluder.x = {x}\noccluder.y = {y}\n"));
                }
            }
        }
        s
    }
}

fn occ_mut(o: &mut Option<OccluderSpec>) -> &mut OccluderSpec {
    o.get_or_insert(OccluderSpec { width: 12.0, height: 12.0, velocity: [3.0, 0.0], entry_frame: 0, start: None })
}

/// The analytic deformation of a synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    centers: Vec<[f64; 2]>,
    directions: Vec<[f64; 2]>,
    omegas: Vec<f64>,
    phases: Vec<f64>,
    amplitude: f64,
    rho: f64,
    translation: [f64; 2],
}

impl MotionModel {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x3a07);
        let n = spec.warp_control_points;
        let (h, w) = (spec.height as f64, spec.width as f64);
        let mut centers = Vec::with_capacity(n);
        let mut directions = Vec::with_capacity(n);
        let mut omegas = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        for _ in 0..n {
            centers.push([rng.gen_range(0.0..w), rng.gen_range(0.0..h)]);
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            directions.push([ang.cos(), ang.sin()]);
            omegas.push(rng.gen_range(0.15..0.4));
            phases.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        Self {
            centers,
            directions,
            omegas,
            phases,
            amplitude: spec.warp_amplitude,
            rho: h.min(w) / 3.0,
            translation: spec.translation,
        }
    }

    fn coefficient(&self, j: usize, t: f64) -> f64 {
        self.amplitude * 0.5 * ((self.omegas[j] * t + self.phases[j]).sin() - self.phases[j].sin())
    }

    pub fn displacement(&self, u: [f64; 2], t: usize) -> [f64; 2] {
        let tf = t as f64;
        let mut d = [self.translation[0] * tf, self.translation[1] * tf];
        for j in 0..self.centers.len() {
            let a = self.coefficient(j, tf);
            let r2 = (u[0] - self.centers[j][0]).powi(2) + (u[1] - self.centers[j][1]).powi(2);
            let phi = (-r2 / (2.0 * self.rho * self.rho)).exp();
            d[0] += a * phi * self.directions[j][0];
            d[1] += a * phi * self.directions[j][1];
        }
        d
    }

    /// Spatial Jacobian of the displacement, `[[dDx/dx, dDx/dy], [dDy/dx, dDy/dy]]`.
    fn jacobian(&self, u: [f64; 2], t: usize) -> [[f64; 2]; 2] {
        let tf = t as f64;
        let mut jac = [[0.0; 2]; 2];
        for j in 0..self.centers.len() {
            let a = self.coefficient(j, tf);
            let dx = u[0] - self.centers[j][0];
            let dy = u[1] - self.centers[j][1];
            let phi = (-(dx * dx + dy * dy) / (2.0 * self.rho * self.rho)).exp();
            let g = [-dx / (self.rho * self.rho) * phi, -dy / (self.rho * self.rho) * phi];
            for r in 0..2 {
                for c in 0..2 {
                    jac[r][c] += a * self.directions[j][r] * g[c];
                }
            }
        }
        jac
    }

    pub fn position(&self, u: [f64; 2], t: usize) -> [f64; 2] {
        let d = self.displacement(u, t);
        [u[0] + d[0], u[1] + d[1]]
    }

    /// Material point that sits at `x` in frame `t` (Newton on `u + D_t(u) = x`).
    pub fn material(&self, x: [f64; 2], t: usize) -> [f64; 2] {
        let d0 = self.displacement(x, t);
        let mut u = [x[0] - d0[0], x[1] - d0[1]];
        for _ in 0..8 {
            let p = self.position(u, t);
            let r = [p[0] - x[0], p[1] - x[1]];
            if r[0].abs() < 1e-12 && r[1].abs() < 1e-12 {
                break;
            }
            let j = self.jacobian(u, t);
            let (a, b, c, d) = (1.0 + j[0][0], j[0][1], j[1][0], 1.0 + j[1][1]);
            let det = a * d - b * c;
            u[0] -= (d * r[0] - b * r[1]) / det;
            u[1] -= (-c * r[0] + a * r[1]) / det;
        }
        u
    }

    pub fn lipschitz_bound(&self) -> f64 {
        if self.centers.is_empty() {
            return 0.0;
        }
        self.centers.len() as f64 * self.amplitude * (-0.5f64).exp() / self.rho
    }
}

/// A solid rectangle sliding across the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub spec: OccluderSpec,
    pub start: [f64; 2],
}

pub const OCCLUDER_COLOR: [f64; 3] = [0.78, 0.82, 0.86];

impl Occluder {
    fn resolve(spec: &OccluderSpec, synth: &SynthSpec) -> Self {
        let start = spec.start.unwrap_or_else(|| {
            let jitter = hash01(synth.seed, 17, 29, 5) - 0.5;
            let y = synth.height as f64 / 2.0 - spec.height / 2.0 + jitter * synth.height as f64 / 3.0;
            let x = if spec.velocity[0] >= 0.0 { -spec.width } else { synth.width as f64 };
            [x, y]
        });
        Self { spec: *spec, start }
    }

    /// `[x0, y0, x1, y1)` at frame `t`, if the occluder has entered.
    pub fn rect_at(&self, t: usize) -> Option<[f64; 4]> {
        let dt = t.checked_sub(self.spec.entry_frame)? as f64;
        let x0 = self.start[0] + self.spec.velocity[0] * dt;
        let y0 = self.start[1] + self.spec.velocity[1] * dt;
        Some([x0, y0, x0 + self.spec.width, y0 + self.spec.height])
    }

    pub fn covers(&self, x: f64, y: f64, t: usize) -> bool {
        self.rect_at(t).is_some_and(|r| x >= r[0] && x < r[2] && y >= r[1] && y < r[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub spec: SynthSpec,
    pub motion: MotionModel,
    pub occluder: Option<Occluder>,
    pub frames: Vec<Frame>,
    /// `forward_flows[t]` maps frame `t` to `t + 1`.
    pub forward_flows: Vec<FlowField>,
    /// `backward_flows[t]` maps frame `t + 1` to `t`.
    pub backward_flows: Vec<FlowField>,
    pub gt_tracks: Vec<PointTrack>,
    /// Pixels covered by the occluder, per frame.
    pub occluder_masks: Vec<Array2<bool>>,
}

/// The desk-scale suite: `count` 64x64 videos of 20 frames with blob or
/// noise texture and an instrument-like occluder crossing the view.
pub fn desk_suite(base_seed: u64, count: usize) -> Vec<SynthSpec> {
    (0..count)
        .map(|i| {
            let seed = base_seed * 1000 + i as u64;
            let dir = if i % 2 == 0 { 1.0 } else { -1.0 };
            SynthSpec {
                seed,
                texture: if i % 3 == 2 { Texture::Noise } else { Texture::Blobs },
                occluder: Some(OccluderSpec {
                    width: 12.0,
                    height: 16.0,
                    velocity: [dir * (3.0 + hash01(seed, 3, 1, 9)), 0.0],
                    entry_frame: 1 + i % 4,
                    start: None,
                }),
                ..SynthSpec::default()
            }
        })
        .collect()
}

pub fn generate_synth(spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let motion = MotionModel::new(spec);
    let occluder = spec.occluder.as_ref().map(|o| Occluder::resolve(o, spec));
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut masks = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let mut px = Array3::zeros((h, w, 3));
        let mut mask = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let color = if occluder.is_some_and(|o| o.covers(xf, yf, t)) {
                    mask[[y, x]] = true;
                    OCCLUDER_COLOR
                } else {
                    let u = motion.material([xf, yf], t);
                    match spec.texture {
                        Texture::Noise => noise_color(spec.seed, u[0], u[1]),
                        Texture::Blobs => blob_color(spec.seed, u[0], u[1]),
                    }
                };
                for c in 0..3 {
                    // 8-bit levels so the PNG round trip is lossless
                    px[[y, x, c]] = (color[c] * 255.0).round() / 255.0;
                }
            }
        }
        frames.push(Frame::new(px, t)?);
        masks.push(mask);
    }

    let mut sample = SynthSample {
        spec: spec.clone(),
        motion,
        occluder,
        frames,
        forward_flows: Vec::new(),
        backward_flows: Vec::new(),
        gt_tracks: Vec::new(),
        occluder_masks: masks,
    };
    for t in 0..spec.frame_count - 1 {
        let f = sample.flow_between(t, t + 1);
        let b = sample.flow_between(t + 1, t);
        sample.forward_flows.push(f);
        sample.backward_flows.push(b);
    }
    sample.gt_tracks = sample.grid_tracks();
    Ok(sample)
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    /// Exact flow from frame `s` to frame `t`, at every pixel of frame `s`.
    pub fn flow_between(&self, s: usize, t: usize) -> FlowField {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut v = Array3::zeros((h, w, 2));
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                let u = self.motion.material(p, s);
                let q = self.motion.position(u, t);
                v[[y, x, 0]] = q[0] - p[0];
                v[[y, x, 1]] = q[1] - p[1];
            }
        }
        FlowField { vectors: v, source_index: s, target_index: t }
    }

    /// Pixels of frame `s` whose content is not visible in frame `t`: hidden
    /// by the occluder in either frame, or carried outside the frame.
    pub fn pair_occlusion(&self, s: usize, t: usize) -> Array2<bool> {
        let (h, w) = (self.spec.height, self.spec.width);
        let flow = self.flow_between(s, t);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let tx = x as f64 + flow.vectors[[y, x, 0]];
            let ty = y as f64 + flow.vectors[[y, x, 1]];
            self.occluder_masks[s][[y, x]] || !self.point_visible(tx, ty, t)
        })
    }

    pub fn point_visible(&self, x: f64, y: f64, t: usize) -> bool {
        in_bounds(self.spec.height, self.spec.width, x, y) && !self.occluder.is_some_and(|o| o.covers(x, y, t))
    }

    /// Ground-truth trajectory of the material point at `query` in its frame.
    pub fn track_from(&self, id: u32, query: PointQuery) -> PointTrack {
        let u = self.motion.material([query.x, query.y], query.frame_index);
        let points = (query.frame_index..self.spec.frame_count)
            .map(|t| {
                let p = self.motion.position(u, t);
                TrackPoint { frame: t, x: p[0], y: p[1], visible: self.point_visible(p[0], p[1], t), uncertainty: None }
            })
            .collect();
        PointTrack { id, query, points }
    }

    fn grid_tracks(&self) -> Vec<PointTrack> {
        let n = self.spec.grid;
        let (h, w) = (self.spec.height as f64, self.spec.width as f64);
        let margin = 6.0f64.min(w / 4.0).min(h / 4.0);
        let mut out = Vec::new();
        for gy in 0..n {
            for gx in 0..n {
                let fx = if n > 1 { gx as f64 / (n - 1) as f64 } else { 0.5 };
                let fy = if n > 1 { gy as f64 / (n - 1) as f64 } else { 0.5 };
                let jx = (hash01(self.spec.seed, gx as i64, gy as i64, 900) - 0.5) * 3.0;
                let jy = (hash01(self.spec.seed, gx as i64, gy as i64, 901) - 0.5) * 3.0;
                let x = (margin + fx * (w - 1.0 - 2.0 * margin) + jx).clamp(0.0, w - 1.0);
                let y = (margin + fy * (h - 1.0 - 2.0 * margin) + jy).clamp(0.0, h - 1.0);
                if !self.point_visible(x, y, 0) {
                    continue;
                }
                let id = out.len() as u32;
                out.push(self.track_from(id, PointQuery { frame_index: 0, x, y }));
            }
        }
        out
    }

    /// Ground truth restricted to the first and last frames, as in sparsely
    /// annotated clinical videos.
    pub fn sparse_labels(&self) -> Vec<PointTrack> {
        let last = self.spec.frame_count - 1;
        self.gt_tracks
            .iter()
            .map(|t| PointTrack {
                id: t.id,
                query: t.query,
                points: t.points.iter().filter(|p| p.frame == t.query.frame_index || p.frame == last).copied().collect(),
            })
            .collect()
    }
}

/// Ground-truth positions keyed by `(frame, point_id)`.
pub fn index_tracks(tracks: &[PointTrack]) -> BTreeMap<(usize, u32), TrackPoint> {
    tracks.iter().flat_map(|t| t.points.iter().map(move |p| ((p.frame, t.id), *p))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{warp, Stencil};

    fn spec() -> SynthSpec {
        SynthSpec {
            seed: 3,
            occluder: Some(OccluderSpec { width: 10.0, height: 14.0, velocity: [4.0, 0.5], entry_frame: 2, start: None }),
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_amplitude_is_static() {
        let s = generate_synth(&SynthSpec { warp_amplitude: 0.0, frame_count: 5, ..spec() }).unwrap();
        assert!(s.forward_flows.iter().all(|f| f.vectors.iter().all(|v| *v == 0.0)));
        for t in &s.gt_tracks {
            assert!(t.points.iter().all(|p| p.x == t.query.x && p.y == t.query.y));
        }
        for (t, m) in s.occluder_masks.iter().enumerate() {
            for ((y, x), &v) in m.indexed_iter() {
                assert_eq!(v, s.occluder.unwrap().covers(x as f64, y as f64, t));
            }
        }
    }

    #[test]
    fn pure_translation_flow_is_uniform() {
        let s = generate_synth(&SynthSpec {
            warp_amplitude: 0.0,
            translation: [2.0, -1.0],
            occluder: None,
            frame_count: 4,
            ..spec()
        })
        .unwrap();
        for f in &s.forward_flows {
            for y in 0..64 {
                for x in 0..64 {
                    let v = f.at(y, x);
                    assert!((v[0] - 2.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn warping_reproduces_neighbor_frame() {
        let s = generate_synth(&spec()).unwrap();
        for t in 0..s.spec.frame_count - 1 {
            // frame t+1 sampled along the forward flow reproduces frame t
            let back = warp(&s.frames[t + 1].pixels.view(), &s.forward_flows[t].vectors.view());
            let occ = s.pair_occlusion(t, t + 1);
            let mut err = 0.0;
            let mut n = 0.0;
            for y in 0..64 {
                for x in 0..64 {
                    if occ[[y, x]] {
                        continue;
                    }
                    for c in 0..3 {
                        err += (back[[y, x, c]] - s.frames[t].pixels[[y, x, c]]).abs();
                        n += 1.0;
                    }
                }
            }
            assert!(err / n < 0.02, "frame {t}: {}", err / n);
        }
    }

    #[test]
    fn flows_match_generating_warp() {
        let s = generate_synth(&spec()).unwrap();
        let f = &s.forward_flows[4];
        for (y, x) in [(3usize, 7usize), (30, 30), (60, 12)] {
            let u = s.motion.material([x as f64, y as f64], 4);
            let q = s.motion.position(u, 5);
            assert!((x as f64 + f.at(y, x)[0] - q[0]).abs() < 1e-4);
            assert!((y as f64 + f.at(y, x)[1] - q[1]).abs() < 1e-4);
        }
    }

    #[test]
    fn integrated_flow_matches_tracks() {
        let s = generate_synth(&SynthSpec { warp_amplitude: 4.0, translation: [0.3, 0.2], ..spec() }).unwrap();
        for track in &s.gt_tracks {
            let mut p = [track.query.x, track.query.y];
            for t in 0..s.spec.frame_count - 1 {
                let st = Stencil::new(64, 64, p[0], p[1]);
                if st.clamped {
                    break;
                }
                let fv = s.forward_flows[t].vectors.view();
                p = [p[0] + st.sample3(&fv, 0), p[1] + st.sample3(&fv, 1)];
                let gt = track.points[t + 1];
                assert!((p[0] - gt.x).hypot(p[1] - gt.y) < 0.1, "track {} frame {}", track.id, t + 1);
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        assert_eq!(generate_synth(&spec()).unwrap(), generate_synth(&spec()).unwrap());
        let bad = SynthSpec { warp_amplitude: 20.0, ..spec() };
        assert!(matches!(generate_synth(&bad), Err(Error::FoldOver(_))));
        assert!(generate_synth(&SynthSpec { frame_count: 2, ..spec() }).is_err());
    }

    #[test]
    fn spec_text_roundtrip() {
        let s = SynthSpec { texture: Texture::Blobs, ..spec() };
        assert_eq!(SynthSpec::parse(&s.to_text()).unwrap(), s);
        let with_start = SynthSpec {
            occluder: Some(OccluderSpec { width: 8.0, height: 8.0, velocity: [1.0, 0.0], entry_frame: 3, start: Some([4.0, 5.5]) }),
            ..spec()
        };
        assert_eq!(SynthSpec::parse(&with_start.to_text()).unwrap(), with_start);
        assert!(SynthSpec::parse("bogus = 1").is_err());
    }
}
