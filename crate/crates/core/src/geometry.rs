//! Sub-pixel sampling, distances and resampling between the frame grid and
//! the strided feature grid.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// The four grid cells and weights of a bilinear interpolation.
///
/// Out-of-range coordinates are clamped to the border and `clamped` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub cells: [(usize, usize); 4],
    pub weights: [f64; 4],
    /// Partial derivatives of each weight with respect to `x` and `y`.
    /// Zero along an axis that was clamped.
    pub dweights_dx: [f64; 4],
    pub dweights_dy: [f64; 4],
    pub clamped: bool,
}

impl Stencil {
    pub fn new(h: usize, w: usize, x: f64, y: f64) -> Self {
        let (xc, cx) = clamp_axis(x, w);
        let (yc, cy) = clamp_axis(y, h);
        let x0 = (xc.floor() as usize).min(w - 1);
        let y0 = (yc.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let gx = if cx { 0.0 } else { 1.0 };
        let gy = if cy { 0.0 } else { 1.0 };
        Self {
            cells: [(y0, x0), (y0, x1), (y1, x0), (y1, x1)],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dweights_dx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
            dweights_dy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
            clamped: cx || cy,
        }
    }

    pub fn sample2(&self, map: &ArrayView2<f64>) -> f64 {
        self.cells
            .iter()
            .zip(self.weights)
            .map(|(&(y, x), wt)| wt * map[[y, x]])
            .sum()
    }

    pub fn sample3(&self, map: &ArrayView3<f64>, channel: usize) -> f64 {
        self.cells
            .iter()
            .zip(self.weights)
            .map(|(&(y, x), wt)| wt * map[[y, x, channel]])
            .sum()
    }

    /// `(d/dx, d/dy)` of the interpolated value of one channel.
    pub fn gradient3(&self, map: &ArrayView3<f64>, channel: usize) -> (f64, f64) {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (k, &(y, x)) in self.cells.iter().enumerate() {
            let v = map[[y, x, channel]];
            gx += self.dweights_dx[k] * v;
            gy += self.dweights_dy[k] * v;
        }
        (gx, gy)
    }
}

fn clamp_axis(v: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if v < 0.0 {
        (0.0, true)
    } else if v > hi {
        (hi, true)
    } else {
        (v, false)
    }
}

/// Bilinear interpolation of every channel of `field` at `(x, y)`.
///
/// Returns the interpolated vector and whether the position was clamped.
pub fn bilinear_sample(field: &ArrayView3<f64>, x: f64, y: f64) -> (Vec<f64>, bool) {
    let (h, w, c) = field.dim();
    let st = Stencil::new(h, w, x, y);
    ((0..c).map(|ch| st.sample3(field, ch)).collect(), st.clamped)
}

pub fn euclidean_dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Frame-pixel coordinate to feature-grid coordinate for a given stride.
/// Feature cell `j` covers pixels `s*j .. s*j + s - 1`, centered on their mean.
pub fn to_feature_coord(v: f64, stride: usize) -> f64 {
    (v - (stride as f64 - 1.0) / 2.0) / stride as f64
}

/// Mean over non-overlapping `stride x stride` blocks; trailing partial
/// blocks are averaged over the pixels they do contain.
pub fn avg_pool(map: &ArrayView3<f64>, stride: usize) -> Array3<f64> {
    let (h, w, c) = map.dim();
    let (ph, pw) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Array3::zeros((ph, pw, c));
    for i in 0..ph {
        for j in 0..pw {
            let ys = i * stride..((i + 1) * stride).min(h);
            let xs = j * stride..((j + 1) * stride).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for y in ys.clone() {
                for x in xs.clone() {
                    for ch in 0..c {
                        out[[i, j, ch]] += map[[y, x, ch]];
                    }
                }
            }
            for ch in 0..c {
                out[[i, j, ch]] /= n;
            }
        }
    }
    out
}

/// Resample a strided feature map back onto an `h x w` frame grid.
pub fn upsample(map: &ArrayView3<f64>, stride: usize, h: usize, w: usize) -> Array3<f64> {
    let (fh, fw, c) = map.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        let fy = to_feature_coord(y as f64, stride);
        for x in 0..w {
            let st = Stencil::new(fh, fw, to_feature_coord(x as f64, stride), fy);
            for ch in 0..c {
                out[[y, x, ch]] = st.sample3(map, ch);
            }
        }
    }
    out
}

/// Transpose of [`upsample`]: scatter a frame-grid gradient back onto the
/// `fh x fw` feature grid.
pub fn upsample_adjoint(grad: &ArrayView3<f64>, stride: usize, fh: usize, fw: usize) -> Array3<f64> {
    let (h, w, c) = grad.dim();
    let mut out = Array3::zeros((fh, fw, c));
    for y in 0..h {
        let fy = to_feature_coord(y as f64, stride);
        for x in 0..w {
            let st = Stencil::new(fh, fw, to_feature_coord(x as f64, stride), fy);
            for (k, &(cy, cx)) in st.cells.iter().enumerate() {
                for ch in 0..c {
                    out[[cy, cx, ch]] += st.weights[k] * grad[[y, x, ch]];
                }
            }
        }
    }
    out
}

/// Backward warp: `out(p) = image(p + flow(p))`, clamped at the border.
pub fn warp(image: &ArrayView3<f64>, flow: &ArrayView3<f64>) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let st = Stencil::new(h, w, x as f64 + flow[[y, x, 0]], y as f64 + flow[[y, x, 1]]);
            for ch in 0..c {
                out[[y, x, ch]] = st.sample3(image, ch);
            }
        }
    }
    out
}

/// View an `h x w x c` map as `hw x c` token rows.
pub fn to_tokens(map: &ArrayView3<f64>) -> Array2<f64> {
    let (h, w, c) = map.dim();
    map.to_owned().into_shape_with_order((h * w, c)).expect("contiguous")
}

pub fn from_tokens(tokens: Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = tokens.ncols();
    tokens
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((h, w, c))
        .expect("token count matches grid")
}
