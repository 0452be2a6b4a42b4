//! Sliding-window chunking, fixed-size sampling, and majority voting.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Point3, PointCloud};

pub const DEFAULT_CHUNK_SIZE: [f64; 3] = [1.5, 1.5, 3.0];
pub const DEFAULT_STRIDE: f64 = 0.5;
pub const DEFAULT_CHUNK_POINTS: usize = 8192;

/// An axis-aligned window over the scene and the points falling inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkWindow {
    pub min_corner: Point3,
    pub size: [f64; 3],
    /// Scene point indices, ascending.
    pub point_indices: Vec<usize>,
}

impl ChunkWindow {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    pub fn max_corner(&self) -> Point3 {
        Point3::new(
            self.min_corner.x + self.size[0],
            self.min_corner.y + self.size[1],
            self.min_corner.z + self.size[2],
        )
    }

    pub fn center(&self) -> Point3 {
        nalgebra::center(&self.min_corner, &self.max_corner())
    }
}

/// Window start positions along one axis and whether each is the last one.
fn axis_starts(lo: f64, hi: f64, size: f64, stride: f64) -> Vec<f64> {
    let extent = hi - lo;
    let count = if extent <= size {
        1
    } else {
        ((extent - size) / stride).ceil() as usize + 1
    };
    (0..count).map(|i| lo + i as f64 * stride).collect()
}

/// Tiles the xy bounding box with `chunk_size` windows every `stride` meters.
///
/// Each window spans the full z range of the scene (at least `chunk_size[2]`).
/// Membership is closed on the window minimum and open on its maximum, except
/// that the last window along an axis also takes points on the scene maximum.
/// Empty windows are dropped; the rest are ordered by `(y, x)`.
pub fn make_chunks(cloud: &PointCloud, chunk_size: [f64; 3], stride: f64) -> Result<Vec<ChunkWindow>> {
    if chunk_size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("chunk size must be positive, got {chunk_size:?}")));
    }
    if !(stride.is_finite() && stride > 0.0) {
        return Err(Error::invalid(format!("stride must be positive, got {stride}")));
    }
    if stride > chunk_size[0] || stride > chunk_size[1] {
        return Err(Error::invalid("stride larger than the window would leave gaps"));
    }
    let Some((lo, hi)) = cloud.bounds() else {
        return Ok(Vec::new());
    };
    let xs = axis_starts(lo.x, hi.x, chunk_size[0], stride);
    let ys = axis_starts(lo.y, hi.y, chunk_size[1], stride);
    let size_z = chunk_size[2].max(hi.z - lo.z);

    let mut chunks = Vec::new();
    for (iy, &y0) in ys.iter().enumerate() {
        let last_y = iy + 1 == ys.len();
        for (ix, &x0) in xs.iter().enumerate() {
            let last_x = ix + 1 == xs.len();
            let inside = |c: f64, start: f64, size: f64, last: bool| {
                c >= start && (c < start + size || last)
            };
            let point_indices: Vec<usize> = cloud
                .points()
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    inside(p.x, x0, chunk_size[0], last_x) && inside(p.y, y0, chunk_size[1], last_y)
                })
                .map(|(i, _)| i)
                .collect();
            if !point_indices.is_empty() {
                chunks.push(ChunkWindow {
                    min_corner: Point3::new(x0, y0, lo.z),
                    size: [chunk_size[0], chunk_size[1], size_z],
                    point_indices,
                });
            }
        }
    }
    Ok(chunks)
}

/// Draws exactly `n` scene indices from the chunk.
///
/// With at least `n` points this samples without replacement; otherwise all
/// points are kept and the remainder is drawn with replacement.
pub fn sample_chunk(chunk: &ChunkWindow, n: usize, seed: u64) -> Result<Vec<usize>> {
    if chunk.is_empty() {
        return Err(Error::invalid("cannot sample an empty chunk"));
    }
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = chunk.len();
    if len >= n {
        return Ok(sample(&mut rng, len, n)
            .into_iter()
            .map(|i| chunk.point_indices[i])
            .collect());
    }
    let mut out = chunk.point_indices.clone();
    out.extend((len..n).map(|_| chunk.point_indices[rng.gen_range(0..len)]));
    Ok(out)
}

/// Per-point class vote counts for a whole scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteAccumulator {
    class_count: usize,
    counts: Vec<u32>,
}

impl VoteAccumulator {
    pub fn new(point_count: usize, class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; point_count * class_count],
        }
    }

    pub fn point_count(&self) -> usize {
        self.counts.len() / self.class_count.max(1)
    }

    pub fn counts(&self, point: usize) -> &[u32] {
        &self.counts[point * self.class_count..(point + 1) * self.class_count]
    }

    /// Records one chunk's predictions for the given scene points.
    pub fn add(&mut self, point_indices: &[usize], predictions: &[u32]) -> Result<()> {
        if point_indices.len() != predictions.len() {
            return Err(Error::invalid("prediction count does not match point count"));
        }
        for (&p, &c) in point_indices.iter().zip(predictions) {
            if p >= self.point_count() || c as usize >= self.class_count {
                return Err(Error::invalid(format!("vote ({p}, {c}) out of range")));
            }
            self.counts[p * self.class_count + c as usize] += 1;
        }
        Ok(())
    }

    /// Adds another accumulator's counts; order of merging does not matter.
    pub fn merge(&mut self, other: &VoteAccumulator) -> Result<()> {
        if other.class_count != self.class_count || other.counts.len() != self.counts.len() {
            return Err(Error::invalid("accumulator shapes differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn winner(&self, point: usize) -> Option<u32> {
        let counts = self.counts(point);
        let (best, &votes) = counts
            .iter()
            .enumerate()
            // max_by_key keeps the last maximum; reverse to keep the lowest class id
            .rev()
            .max_by_key(|(_, &c)| c)?;
        (votes > 0).then_some(best as u32)
    }

    /// Majority label per point, ties to the lowest class id.
    ///
    /// When `finalize` is set every point must have a vote; otherwise points
    /// without votes are reported as `None`.
    pub fn vote(&self, finalize: bool) -> Result<Vec<Option<u32>>> {
        let labels: Vec<Option<u32>> = (0..self.point_count()).map(|p| self.winner(p)).collect();
        if finalize {
            let missing: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_none())
                .map(|(i, _)| i)
                .collect();
            if !missing.is_empty() {
                return Err(Error::UncoveredPoints(missing));
            }
        }
        Ok(labels)
    }

    /// Final labels; errors if any point has no votes.
    pub fn labels(&self) -> Result<Vec<u32>> {
        Ok(self.vote(true)?.into_iter().map(|l| l.expect("checked")).collect())
    }
}
