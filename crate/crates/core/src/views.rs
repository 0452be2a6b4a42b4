//! Greedy maximum-coverage selection of RGB-D frames for a chunk.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{PointCloud, RgbdFrame};
use crate::projection::project_point;

pub const DEFAULT_MATCH_RADIUS: f64 = 0.05;
pub const DEFAULT_VIEW_BUDGET: usize = 5;

/// Which chunk points a frame observes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMask {
    pub frame_id: u32,
    pub covered: Vec<bool>,
}

impl CoverageMask {
    pub fn count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

/// A point is covered when it projects in front of the camera onto a pixel
/// whose recorded depth is within `match_radius` of the projected depth.
pub fn compute_coverage(frame: &RgbdFrame, points: &PointCloud, match_radius: f64) -> Result<CoverageMask> {
    if match_radius.is_nan() || match_radius <= 0.0 {
        return Err(Error::invalid(format!("match radius must be positive, got {match_radius}")));
    }
    let (w, h) = (frame.width(), frame.height());
    let covered = points
        .points()
        .iter()
        .map(|p| {
            project_point(p, frame)
                .and_then(|proj| proj.pixel(w, h).map(|(u, v)| (proj.z, frame.depth_at(u, v))))
                .is_some_and(|(z, depth)| depth > 0.0 && (depth - z).abs() <= match_radius)
        })
        .collect();
    Ok(CoverageMask {
        frame_id: frame.frame_id,
        covered,
    })
}

/// Greedy max-cover over precomputed masks.
///
/// Each round takes the mask adding the most uncovered points; ties go to the
/// lower frame id. Stops early once no mask adds coverage.
pub fn greedy_cover(masks: &[CoverageMask], budget: usize) -> Result<Vec<u32>> {
    if masks.is_empty() {
        return Err(Error::invalid("no frames to select from"));
    }
    if budget == 0 {
        return Err(Error::invalid("view budget must be at least 1"));
    }
    let n = masks[0].covered.len();
    if masks.iter().any(|m| m.covered.len() != n) {
        return Err(Error::invalid("coverage masks differ in length"));
    }
    let mut covered = vec![false; n];
    let mut taken = vec![false; masks.len()];
    let mut selected = Vec::with_capacity(budget.min(masks.len()));
    while selected.len() < budget {
        let best = masks
            .par_iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, m)| {
                let gain = m
                    .covered
                    .iter()
                    .zip(&covered)
                    .filter(|(&c, &already)| c && !already)
                    .count();
                (gain, m.frame_id, i)
            })
            .reduce_with(|a, b| {
                // larger gain wins, then smaller frame id
                if (a.0, std::cmp::Reverse(a.1)) >= (b.0, std::cmp::Reverse(b.1)) {
                    a
                } else {
                    b
                }
            });
        let Some((gain, frame_id, i)) = best else {
            break;
        };
        if gain == 0 {
            break;
        }
        taken[i] = true;
        for (c, &m) in covered.iter_mut().zip(&masks[i].covered) {
            *c |= m;
        }
        selected.push(frame_id);
    }
    Ok(selected)
}

/// Picks up to `budget` frames maximizing the number of covered points.
pub fn greedy_select(
    frames: &[RgbdFrame],
    points: &PointCloud,
    budget: usize,
    match_radius: f64,
) -> Result<Vec<u32>> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to select from"));
    }
    let masks = frames
        .par_iter()
        .map(|f| compute_coverage(f, points, match_radius))
        .collect::<Result<Vec<_>>>()?;
    greedy_cover(&masks, budget)
}

/// Number of points covered by the union of the given masks.
pub fn union_coverage(masks: &[CoverageMask], selected: &[u32]) -> usize {
    let Some(first) = masks.first() else {
        return 0;
    };
    (0..first.covered.len())
        .filter(|&j| {
            masks
                .iter()
                .filter(|m| selected.contains(&m.frame_id))
                .any(|m| m.covered[j])
        })
        .count()
}
