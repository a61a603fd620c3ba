//! Procedural textures defined on the whole plane, so warped content never
//! runs out at the border.

use ndarray::Array3;

use crate::types::Frame;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` from a lattice cell and a salt.
pub fn hash01(seed: u64, ix: i64, iy: i64, salt: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64 ^ splitmix(salt))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0, 1)`.
pub fn value_noise(seed: u64, salt: u64, x: f64, y: f64, scale: f64) -> f64 {
    let (gx, gy) = (x / scale, y / scale);
    let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
    let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
    let v = |dx: i64, dy: i64| hash01(seed, ix + dx, iy + dy, salt);
    let top = v(0, 0) * (1.0 - fx) + v(1, 0) * fx;
    let bot = v(0, 1) * (1.0 - fx) + v(1, 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Three-octave colored noise in roughly `[0.05, 0.95]`.
pub fn noise_color(seed: u64, x: f64, y: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let salt = c as u64 * 7;
        let v = 0.55 * value_noise(seed, salt, x, y, 14.0)
            + 0.3 * value_noise(seed, salt + 1, x, y, 7.0)
            + 0.15 * value_noise(seed, salt + 2, x, y, 4.5);
        *o = 0.05 + 0.9 * v;
    }
    out
}

const BLOB_CELL: f64 = 12.0;

/// Pink-red base with darker and lighter gaussian blobs and fine grain.
pub fn blob_color(seed: u64, x: f64, y: f64) -> [f64; 3] {
    let mut shade = 0.0;
    let (cx, cy) = ((x / BLOB_CELL).floor() as i64, (y / BLOB_CELL).floor() as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (ix, iy) = (cx + dx, cy + dy);
            for k in 0..2 {
                let salt = 100 + k * 10;
                let bx = (ix as f64 + hash01(seed, ix, iy, salt)) * BLOB_CELL;
                let by = (iy as f64 + hash01(seed, ix, iy, salt + 1)) * BLOB_CELL;
                let sigma = 2.5 + 3.5 * hash01(seed, ix, iy, salt + 2);
                let amp = hash01(seed, ix, iy, salt + 3) * 2.0 - 1.0;
                let r2 = (x - bx).powi(2) + (y - by).powi(2);
                shade += amp * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let grain = value_noise(seed, 300, x, y, 4.0) - 0.5;
    let s = (0.5 + 0.35 * shade + 0.15 * grain).clamp(0.0, 1.0);
    [0.35 + 0.55 * s, 0.12 + 0.45 * s, 0.15 + 0.4 * s]
}

/// Test helper: a noise frame with `(0, 0)` at the top-left pixel center.
pub fn value_noise_frame(h: usize, w: usize, seed: u64, index: usize) -> Frame {
    let px = Array3::from_shape_fn((h, w, 3), |(y, x, c)| noise_color(seed, x as f64, y as f64)[c]);
    Frame::new(px, index).expect("noise in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_in_range_and_deterministic() {
        for i in 0..200 {
            let (x, y) = (i as f64 * 1.37 - 40.0, i as f64 * 0.71 + 3.0);
            let a = noise_color(5, x, y);
            assert_eq!(a, noise_color(5, x, y));
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(blob_color(5, x, y).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
