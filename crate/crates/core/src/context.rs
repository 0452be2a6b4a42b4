//! Per-chunk geometry: view selection, back-projection of the chosen frames,
//! and the parameter-free neighborhood records fed to the network.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunks::ChunkWindow;
use crate::csm::OctantInputs;
use crate::error::{Error, Result};
use crate::fusion::{
    inverse_distance_blend, PixelSample, PointSample, AGGREGATE_NEIGHBORS, DEFAULT_R_PRIME, IMAGE_CHANNELS,
};
use crate::gsm::{backward_search, GsmNeighborhood, DEFAULT_NEIGHBORS, DEFAULT_QUERY_RADIUS};
use crate::model::{Point3, RgbdFrame, SceneBundle, NO_LABEL};
use crate::projection::{backproject_frame, BackprojectedCloud, FeatureMap};
use crate::spatial::SpatialIndex;
use crate::views::{greedy_select, DEFAULT_MATCH_RADIUS, DEFAULT_VIEW_BUDGET};

/// Q points farther than this outside a chunk's box are discarded.
pub const DEFAULT_CROP_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborhoodConfig {
    /// Maximum neighborhood size for both P and Q.
    pub k: usize,
    /// Query radius bounding the Q neighborhood.
    pub radius: f64,
    /// Distance bound for the unprojected auxiliary loss.
    pub r_prime: f64,
    pub crop_margin: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_NEIGHBORS,
            radius: DEFAULT_QUERY_RADIUS,
            r_prime: DEFAULT_R_PRIME,
            crop_margin: DEFAULT_CROP_MARGIN,
        }
    }
}

impl NeighborhoodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("neighborhood size must be positive"));
        }
        for (name, v) in [("radius", self.radius), ("r_prime", self.r_prime)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.crop_margin.is_finite() && self.crop_margin >= 0.0) {
            return Err(Error::invalid("crop margin must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub budget: usize,
    pub match_radius: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_VIEW_BUDGET,
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

/// Raw image channels of a frame as a feature map.
pub fn raw_feature_map(frame: &RgbdFrame) -> FeatureMap {
    let (w, h) = (frame.width(), frame.height());
    let mut values = Vec::with_capacity(w * h * IMAGE_CHANNELS);
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let [r, g, b] = frame.color[i];
            values.extend_from_slice(&[r, g, b, frame.depth[i], u as f64 / w as f64, v as f64 / h as f64]);
        }
    }
    FeatureMap::new(w, h, IMAGE_CHANNELS, values).expect("sizes agree by construction")
}

/// Keeps only points inside the box `[lo - margin, hi + margin]`.
pub fn crop(q: &BackprojectedCloud, lo: &Point3, hi: &Point3, margin: f64) -> BackprojectedCloud {
    let keep: Vec<usize> = q
        .cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).all(|d| p[d] >= lo[d] - margin && p[d] <= hi[d] + margin))
        .map(|(i, _)| i)
        .collect();
    BackprojectedCloud {
        cloud: q.cloud.select(&keep),
        sources: keep.iter().map(|&i| q.sources[i]).collect(),
    }
}

/// The back-projected cloud a chunk sees.
#[derive(Clone, Debug)]
pub struct ChunkContext {
    pub views: Vec<u32>,
    pub q: BackprojectedCloud,
    pub q_index: SpatialIndex,
}

impl ChunkContext {
    /// Selects views for the chunk, back-projects them, and crops the result.
    ///
    /// If no frame covers any chunk point, the first `budget` frames are used.
    /// If cropping leaves nothing, the uncropped cloud is kept.
    pub fn build(bundle: &SceneBundle, chunk: &ChunkWindow, views: &ViewConfig, nbhd: &NeighborhoodConfig) -> Result<Self> {
        if bundle.frames.is_empty() {
            return Err(Error::invalid("scene has no frames"));
        }
        let points = bundle.cloud.select(&chunk.point_indices);
        let mut selected = greedy_select(&bundle.frames, &points, views.budget, views.match_radius)?;
        if selected.is_empty() {
            let mut ids: Vec<u32> = bundle.frames.iter().map(|f| f.frame_id).collect();
            ids.sort_unstable();
            ids.truncate(views.budget);
            selected = ids;
        }
        let parts = selected
            .iter()
            .map(|id| {
                let frame = bundle.frames.iter().find(|f| f.frame_id == *id).expect("selected from these frames");
                backproject_frame(frame, &raw_feature_map(frame))
            })
            .collect::<Result<Vec<_>>>()?;
        let full = BackprojectedCloud::concat(&parts)?;
        if full.is_empty() {
            return Err(Error::invalid("selected frames contain no valid depth"));
        }
        let (lo, hi) = points.bounds().expect("chunks are never empty");
        let lo = lo.inf(&chunk.min_corner);
        let hi = hi.sup(&chunk.max_corner());
        let cropped = crop(&full, &lo, &hi, nbhd.crop_margin);
        let q = if cropped.is_empty() { full } else { cropped };
        let q_index = SpatialIndex::new(q.cloud.points());
        Ok(Self {
            views: selected,
            q,
            q_index,
        })
    }

    fn raw(&self, i: usize) -> [f64; IMAGE_CHANNELS] {
        let row = self.q.cloud.features().expect("back-projected clouds carry features").row(i);
        row.try_into().expect("raw channel width")
    }

    /// Builds the network inputs for the given scene points.
    pub fn samples(
        &self,
        bundle: &SceneBundle,
        p_index: &SpatialIndex,
        indices: &[usize],
        nbhd: &NeighborhoodConfig,
    ) -> Result<Vec<PointSample>> {
        let p_points = bundle.cloud.points();
        let labels = bundle.labels();
        // nearest-Q distance per scene point, filled on demand
        let mut nearest_q = vec![f64::NAN; p_points.len()];
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let center = p_points[i];
            let np_hits = p_index.knn(&center, nbhd.k)?;
            let np: Vec<Point3> = np_hits.iter().map(|h| p_points[h.index]).collect();
            let mut df_sum = 0.0;
            for h in &np_hits {
                if nearest_q[h.index].is_nan() {
                    nearest_q[h.index] = self.q_index.nearest(&p_points[h.index])?.distance;
                }
                df_sum += nearest_q[h.index];
            }
            let q_points = self.q_index.points();
            let nq: Vec<Point3> = self
                .q_index
                .radius_knn(&center, nbhd.k, nbhd.radius)?
                .iter()
                .map(|h| q_points[h.index])
                .collect();
            let (mean_db, mq) = backward_search(&nq, &np, &self.q_index, &center)?;

            // the center itself carries no context; leave it out when possible
            let np_context: Vec<Point3> = np_hits.iter().filter(|h| h.index != i).map(|h| p_points[h.index]).collect();
            let p_context = OctantInputs::new(&center, if np_context.is_empty() { &np } else { &np_context })?;
            let nearest = self.q_index.knn(&center, AGGREGATE_NEIGHBORS)?;
            let q_context = if nq.is_empty() {
                OctantInputs::new(&center, &[q_points[nearest[0].index]])?
            } else {
                OctantInputs::new(&center, &nq)?
            };

            let table = self.q.cloud.features().expect("back-projected clouds carry features");
            let image_raw: [f64; IMAGE_CHANNELS] = inverse_distance_blend(&nearest, table)
                .try_into()
                .expect("raw channel width");
            let unprojected_raw = (nearest[0].distance <= nbhd.r_prime).then(|| self.raw(nearest[0].index));

            out.push(PointSample {
                scene_index: i,
                position: center,
                p_context,
                q_context,
                geometry: GsmNeighborhood {
                    center_index: i,
                    mean_df: df_sum / np_hits.len() as f64,
                    mean_db,
                    np: np.len(),
                    mq,
                },
                image_raw,
                unprojected_raw,
                label: Some(labels[i]),
            });
        }
        Ok(out)
    }

    /// Up to `n` labeled back-projected pixels, drawn without replacement.
    pub fn pixel_samples(&self, n: usize, seed: u64) -> Vec<PixelSample> {
        let Some(labels) = self.q.cloud.labels() else {
            return Vec::new();
        };
        let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != NO_LABEL).collect();
        let n = n.min(labeled.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, labeled.len(), n).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|k| PixelSample {
                raw: self.raw(labeled[k]),
                label: labels[labeled[k]],
            })
            .collect()
    }
}
