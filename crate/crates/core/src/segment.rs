//! Whole-scene inference: chunk, infer every chunk independently, vote.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunks::{make_chunks, VoteAccumulator, DEFAULT_CHUNK_SIZE, DEFAULT_STRIDE};
use crate::context::{ChunkContext, NeighborhoodConfig, ViewConfig};
use crate::error::{Error, Result};
use crate::fusion::{forward, FusionSettings, SafnetModel};
use crate::model::SceneBundle;
use crate::spatial::SpatialIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub chunk_size: [f64; 3],
    pub stride: f64,
    pub views: ViewConfig,
    pub neighborhood: NeighborhoodConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            stride: DEFAULT_STRIDE,
            views: ViewConfig::default(),
            neighborhood: NeighborhoodConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<u32>,
    pub votes: VoteAccumulator,
    /// Mean combined similarity over every point evaluation.
    pub mean_similarity: f64,
}

/// Predictions of one chunk: scene indices, classes, and the similarity sum.
pub fn segment_chunk(
    bundle: &SceneBundle,
    p_index: &SpatialIndex,
    chunk: &crate::chunks::ChunkWindow,
    model: &SafnetModel,
    settings: &FusionSettings,
    config: &SegmentConfig,
) -> Result<(Vec<u32>, f64)> {
    let ctx = ChunkContext::build(bundle, chunk, &config.views, &config.neighborhood)?;
    let samples = ctx.samples(bundle, p_index, &chunk.point_indices, &config.neighborhood)?;
    let mut similarity = 0.0;
    let preds = samples
        .iter()
        .map(|s| {
            let out = forward(model, settings, s);
            similarity += out.similarity.s_combined;
            out.predicted_class(model.class_count())
        })
        .collect();
    Ok((preds, similarity))
}

/// Labels every scene point. Every point of every chunk is evaluated; chunks
/// run in parallel and votes are summed in chunk order.
pub fn segment_scene(
    bundle: &SceneBundle,
    model: &SafnetModel,
    settings: &FusionSettings,
    config: &SegmentConfig,
) -> Result<Segmentation> {
    if bundle.class_count != model.class_count() {
        return Err(Error::invalid(format!(
            "scene has {} classes but the model predicts {}",
            bundle.class_count,
            model.class_count()
        )));
    }
    config.neighborhood.validate()?;
    let p_index = SpatialIndex::new(bundle.cloud.points());
    let chunks = make_chunks(&bundle.cloud, config.chunk_size, config.stride)?;
    let results = chunks
        .par_iter()
        .map(|chunk| segment_chunk(bundle, &p_index, chunk, model, settings, config))
        .collect::<Result<Vec<_>>>()?;
    let mut votes = VoteAccumulator::new(bundle.cloud.len(), bundle.class_count);
    let mut similarity = 0.0;
    let mut evaluations = 0usize;
    for (chunk, (preds, sim)) in chunks.iter().zip(&results) {
        votes.add(&chunk.point_indices, preds)?;
        similarity += sim;
        evaluations += preds.len();
    }
    let labels = votes.labels()?;
    Ok(Segmentation {
        labels,
        votes,
        mean_similarity: if evaluations == 0 { 0.0 } else { similarity / evaluations as f64 },
    })
}
