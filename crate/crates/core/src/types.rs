//! Domain values shared by every module.
//!
//! Coordinates follow one convention throughout: `x` is the column, `y` the
//! row, and `(0, 0)` is the center of the top-left pixel.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An RGB frame with values in `[0, 1]`, stored `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f64>,
    pub index: usize,
}

impl Frame {
    pub fn new(pixels: Array3<f64>, index: usize) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < 8 || w < 8 {
            return Err(Error::Invalid(format!("frame must be at least 8x8, got {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::Shape(format!("frame needs 3 channels, got {c}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invalid("frame pixels must be finite and in [0, 1]".into()));
        }
        Ok(Self { pixels, index })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        in_bounds(self.height(), self.width(), x, y)
    }
}

/// True when `(x, y)` lies on the pixel-center grid of an `h x w` image.
pub fn in_bounds(h: usize, w: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Dense displacement `(dx, dy)` in pixels from `source_index` to `target_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Array3<f64>,
    pub source_index: usize,
    pub target_index: usize,
}

impl FlowField {
    pub fn new(vectors: Array3<f64>, source_index: usize, target_index: usize) -> Result<Self> {
        if vectors.dim().2 != 2 {
            return Err(Error::Shape(format!("flow needs 2 channels, got {}", vectors.dim().2)));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { vectors, source_index, target_index })
    }

    pub fn zeros(h: usize, w: usize, source_index: usize, target_index: usize) -> Self {
        Self { vectors: Array3::zeros((h, w, 2)), source_index, target_index }
    }

    pub fn height(&self) -> usize {
        self.vectors.dim().0
    }

    pub fn width(&self) -> usize {
        self.vectors.dim().1
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        [self.vectors[[y, x, 0]], self.vectors[[y, x, 1]]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    pub logits: Array2<f64>,
}

impl OcclusionMap {
    pub fn probability(&self, y: usize, x: usize) -> f64 {
        logistic(self.logits[[y, x]])
    }
}

/// Per-pixel predicted `log(sigma^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub log_variance: Array2<f64>,
}

impl UncertaintyMap {
    pub fn variance(&self, y: usize, x: usize) -> f64 {
        self.log_variance[[y, x]].exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointQuery {
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
    /// Squashed predicted log-variance in `[0, 1]`; `None` for ground truth.
    pub uncertainty: Option<f64>,
}

impl TrackPoint {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// One trajectory, sorted by frame. Tracker output covers every frame from
/// the query on; sparse label tracks only some.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrack {
    pub id: u32,
    pub query: PointQuery,
    pub points: Vec<TrackPoint>,
}

impl PointTrack {
    /// Points are sorted by frame but may skip frames (sparse labels).
    pub fn at_frame(&self, frame: usize) -> Option<&TrackPoint> {
        let offset = frame.checked_sub(self.points.first()?.frame)?;
        match self.points.get(offset) {
            Some(p) if p.frame == frame => Some(p),
            _ => self.points.binary_search_by_key(&frame, |p| p.frame).ok().map(|i| &self.points[i]),
        }
    }
}

/// A first-to-last-frame correspondence from a feature matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x1: f64,
    pub y1: f64,
    pub x_t: f64,
    pub y_t: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub point_id: u32,
    pub x1: f64,
    pub y1: f64,
    pub x_t: f64,
    pub y_t: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub point_id: u32,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Label {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Pseudo labels for the unlabeled frames of a sparsely annotated video.
///
/// `labels` only holds intermediate frames (`1..last_frame`); anchors carry
/// the first and last frame. Point ids of labels are teacher-tagged, see
/// [`crate::plg::tag_point_id`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    pub anchors: Vec<Anchor>,
    pub labels: BTreeMap<usize, Vec<Label>>,
    pub survivors: Vec<u32>,
    pub last_frame: usize,
}

impl PseudoLabelSet {
    pub fn survivor_count(&self) -> usize {
        self.survivors.len()
    }

    pub fn label_count(&self) -> usize {
        self.labels.values().map(Vec::len).sum()
    }
}

pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
