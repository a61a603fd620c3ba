//! 2D tracking metrics over point tracks matched by id.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::euclidean_dist;
use crate::types::{PointTrack, TrackPoint};

pub const ACC_THRESHOLDS: [f64; 5] = [4.0, 8.0, 16.0, 32.0, 64.0];
pub const ROB_THRESHOLD: f64 = 8.0;

/// (prediction, ground truth) for every frame where both exist.
fn pairs<'a>(pred: &'a [PointTrack], gt: &'a [PointTrack]) -> Result<Vec<(&'a TrackPoint, &'a TrackPoint)>> {
    let by_id: BTreeMap<u32, &PointTrack> = pred.iter().map(|t| (t.id, t)).collect();
    let mut out = Vec::new();
    for g in gt {
        for gp in &g.points {
            let pp = by_id.get(&g.id).and_then(|t| t.at_frame(gp.frame));
            match pp {
                Some(pp) => out.push((pp, gp)),
                None if gp.visible => return Err(Error::UnmatchedLabel { point_id: g.id, frame: gp.frame }),
                None => {}
            }
        }
    }
    Ok(out)
}

/// Position errors at every visible ground-truth point.
fn visible_errors(pred: &[PointTrack], gt: &[PointTrack]) -> Result<Vec<(f64, bool, bool)>> {
    let errors: Vec<_> = pairs(pred, gt)?
        .into_iter()
        .filter(|(_, g)| g.visible)
        .map(|(p, g)| (euclidean_dist(p.position(), g.position()), p.visible, g.visible))
        .collect();
    if errors.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(errors)
}

pub fn epe2d(pred: &[PointTrack], gt: &[PointTrack]) -> Result<f64> {
    let e = visible_errors(pred, gt)?;
    Ok(e.iter().map(|v| v.0).sum::<f64>() / e.len() as f64)
}

/// Fraction of visible points within each threshold.
pub fn accuracy_at(pred: &[PointTrack], gt: &[PointTrack], thresholds: &[f64]) -> Result<Vec<f64>> {
    let e = visible_errors(pred, gt)?;
    Ok(thresholds.iter().map(|&th| e.iter().filter(|v| v.0 <= th).count() as f64 / e.len() as f64).collect())
}

/// δ-average accuracy over [`ACC_THRESHOLDS`].
pub fn acc2d(pred: &[PointTrack], gt: &[PointTrack]) -> Result<f64> {
    let a = accuracy_at(pred, gt, &ACC_THRESHOLDS)?;
    Ok(a.iter().sum::<f64>() / a.len() as f64)
}

/// Visible ground-truth points predicted within `threshold` and marked visible.
pub fn rob2d(pred: &[PointTrack], gt: &[PointTrack], threshold: f64) -> Result<f64> {
    let e = visible_errors(pred, gt)?;
    Ok(e.iter().filter(|(d, pv, gv)| *d <= threshold && pv == gv).count() as f64 / e.len() as f64)
}

/// Agreement of visibility flags over all matched (frame, point) pairs;
/// 1.0 when nothing is matched.
pub fn occ_accuracy(pred: &[PointTrack], gt: &[PointTrack]) -> Result<f64> {
    let p = pairs(pred, gt)?;
    if p.is_empty() {
        return Ok(1.0);
    }
    Ok(p.iter().filter(|(a, b)| a.visible == b.visible).count() as f64 / p.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub acc2d: f64,
    pub epe2d: f64,
    pub rob2d: f64,
    pub occ_accuracy: f64,
    /// (threshold px, fraction within)
    pub per_threshold: Vec<(f64, f64)>,
    pub evaluated: usize,
}

impl MetricReport {
    pub fn compute(pred: &[PointTrack], gt: &[PointTrack]) -> Result<Self> {
        let acc = accuracy_at(pred, gt, &ACC_THRESHOLDS)?;
        Ok(Self {
            acc2d: acc.iter().sum::<f64>() / acc.len() as f64,
            epe2d: epe2d(pred, gt)?,
            rob2d: rob2d(pred, gt, ROB_THRESHOLD)?,
            occ_accuracy: occ_accuracy(pred, gt)?,
            per_threshold: ACC_THRESHOLDS.iter().copied().zip(acc).collect(),
            evaluated: visible_errors(pred, gt)?.len(),
        })
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "acc2d = {:.6}", self.acc2d);
        let _ = writeln!(s, "epe2d = {:.6}", self.epe2d);
        let _ = writeln!(s, "rob2d = {:.6}", self.rob2d);
        let _ = writeln!(s, "occ_accuracy = {:.6}", self.occ_accuracy);
        for (th, a) in &self.per_threshold {
            let _ = writeln!(s, "acc_within_{th} = {a:.6}");
        }
        let _ = writeln!(s, "evaluated_points = {}", self.evaluated);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PointQuery;
    use proptest::prelude::*;

    fn track(id: u32, pts: &[(f64, f64, bool)]) -> PointTrack {
        PointTrack {
            id,
            query: PointQuery { frame_index: 0, x: pts[0].0, y: pts[0].1 },
            points: pts
                .iter()
                .enumerate()
                .map(|(t, &(x, y, visible))| TrackPoint { frame: t, x, y, visible, uncertainty: None })
                .collect(),
        }
    }

    fn shifted(tracks: &[PointTrack], dx: f64, dy: f64) -> Vec<PointTrack> {
        tracks
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for p in &mut t.points {
                    p.x += dx;
                    p.y += dy;
                }
                t
            })
            .collect()
    }

    fn gt() -> Vec<PointTrack> {
        vec![track(0, &[(1.0, 1.0, true), (2.0, 1.0, true)]), track(3, &[(5.0, 5.0, true), (5.0, 6.0, true)])]
    }

    #[test]
    fn examples() {
        let g = gt();
        assert_eq!(epe2d(&g, &g).unwrap(), 0.0);
        assert_eq!(acc2d(&g, &g).unwrap(), 1.0);
        assert_eq!(rob2d(&g, &g, 8.0).unwrap(), 1.0);
        assert!((epe2d(&shifted(&g, 3.0, 0.0), &g).unwrap() - 3.0).abs() < 1e-12);
        assert!((acc2d(&shifted(&g, 6.0, 8.0), &g).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(acc2d(&shifted(&g, 100.0, 0.0), &g).unwrap(), 0.0);
        assert_eq!(rob2d(&shifted(&g, 100.0, 0.0), &g, 8.0).unwrap(), 0.0);

        let one = vec![track(0, &[(0.0, 0.0, true)]), track(1, &[(0.0, 0.0, true)])];
        let p = vec![track(0, &[(2.0, 0.0, true)]), track(1, &[(0.0, 4.0, true)])];
        assert!((epe2d(&p, &one).unwrap() - 3.0).abs() < 1e-12);

        let mut half = g.clone();
        half[0].points[0].visible = false;
        half[1].points[1].visible = false;
        assert_eq!(rob2d(&half, &g, 8.0).unwrap(), 0.5);
        assert_eq!(occ_accuracy(&half, &g).unwrap(), 0.5);
        let mut three = g.clone();
        three[0].points[1].visible = false;
        assert_eq!(occ_accuracy(&three, &g).unwrap(), 0.75);
        let inverted: Vec<_> = g
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.points.iter_mut().for_each(|p| p.visible = !p.visible);
                t
            })
            .collect();
        assert_eq!(occ_accuracy(&inverted, &g).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_unmatched() {
        let hidden = vec![track(0, &[(1.0, 1.0, false)])];
        assert!(matches!(epe2d(&hidden, &hidden), Err(Error::EmptyEvaluation)));
        assert!(matches!(epe2d(&[], &gt()), Err(Error::UnmatchedLabel { point_id: 0, frame: 0 })));
        let r = MetricReport::compute(&gt(), &gt()).unwrap();
        assert!(r.to_text().contains("epe2d = 0.000000"));
        assert_eq!(r.evaluated, 4);
    }

    proptest! {
        #[test]
        fn invariants(
            pts in prop::collection::vec((0.0..64.0f64, 0.0..64.0f64, -20.0..20.0f64, -20.0..20.0f64), 1..12),
            shift in (-30.0..30.0f64, -30.0..30.0f64),
            scale in 1.0..4.0f64,
        ) {
            let g: Vec<_> = pts.iter().enumerate().map(|(i, p)| track(i as u32, &[(p.0, p.1, true)])).collect();
            let pr: Vec<_> = pts.iter().enumerate().map(|(i, p)| track(i as u32, &[(p.0 + p.2, p.1 + p.3, true)])).collect();
            let inflated: Vec<_> = pts.iter().enumerate().map(|(i, p)| track(i as u32, &[(p.0 + scale * p.2, p.1 + scale * p.3, true)])).collect();
            prop_assert!(acc2d(&inflated, &g).unwrap() <= acc2d(&pr, &g).unwrap());
            let e = epe2d(&pr, &g).unwrap();
            let es = epe2d(&shifted(&pr, shift.0, shift.1), &shifted(&g, shift.0, shift.1)).unwrap();
            prop_assert!((e - es).abs() < 1e-9);
            let (mut rg, mut rp) = (g.clone(), pr.clone());
            rg.reverse();
            rp.rotate_left(1);
            prop_assert!((epe2d(&rp, &rg).unwrap() - e).abs() < 1e-9);
            prop_assert_eq!(acc2d(&rp, &rg).unwrap(), acc2d(&pr, &g).unwrap());
        }
    }
}
