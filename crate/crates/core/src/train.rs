//! Batch preparation and seeded gradient-descent training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunks::{make_chunks, sample_chunk, DEFAULT_CHUNK_POINTS, DEFAULT_CHUNK_SIZE, DEFAULT_STRIDE};
use crate::context::{ChunkContext, NeighborhoodConfig, ViewConfig};
use crate::error::{Error, Result};
use crate::fusion::{batch_loss, Batch, FusionSettings, LossBreakdown, LossSettings, SafnetModel};
use crate::model::SceneBundle;
use crate::nn::ParamSet;
use crate::spatial::SpatialIndex;
use crate::views::DEFAULT_MATCH_RADIUS;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_LR_DECAY_EPOCHS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate drops tenfold after this many epochs.
    pub lr_decay_epochs: usize,
    pub chunk_size: [f64; 3],
    pub stride: f64,
    /// Points sampled from each chunk once, before training.
    pub points_per_chunk: usize,
    /// Labeled back-projected pixels per chunk for the 2D auxiliary term.
    pub pixels_per_chunk: usize,
    /// View budgets assigned to chunks in rotation.
    pub view_budgets: Vec<usize>,
    pub match_radius: f64,
    pub neighborhood: NeighborhoodConfig,
    pub fusion: FusionSettings,
    pub loss: LossSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 80,
            learning_rate: DEFAULT_LEARNING_RATE,
            lr_decay_epochs: DEFAULT_LR_DECAY_EPOCHS,
            chunk_size: DEFAULT_CHUNK_SIZE,
            stride: DEFAULT_STRIDE,
            points_per_chunk: DEFAULT_CHUNK_POINTS,
            pixels_per_chunk: 256,
            view_budgets: vec![crate::views::DEFAULT_VIEW_BUDGET],
            match_radius: DEFAULT_MATCH_RADIUS,
            neighborhood: NeighborhoodConfig::default(),
            fusion: FusionSettings::default(),
            loss: LossSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.lr_decay_epochs == 0 {
            return Err(Error::invalid("lr_decay_epochs must be positive"));
        }
        if self.points_per_chunk == 0 {
            return Err(Error::invalid("points_per_chunk must be positive"));
        }
        if self.view_budgets.is_empty() || self.view_budgets.contains(&0) {
            return Err(Error::invalid("view_budgets must be non-empty and positive"));
        }
        self.neighborhood.validate()
    }

    /// Learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.1f64.powi((epoch / self.lr_decay_epochs) as i32)
    }
}

/// Mixes several integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5AFE_u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Order-preserving removal of repeated indices.
pub fn dedup_indices(indices: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::with_capacity(indices.len());
    indices.iter().copied().filter(|i| seen.insert(*i)).collect()
}

/// Builds one batch per non-empty chunk of every scene. The geometry does
/// not depend on the parameters, so this runs once before training.
pub fn prepare_batches(scenes: &[SceneBundle], config: &TrainConfig) -> Result<Vec<Batch>> {
    config.validate()?;
    let mut jobs = Vec::new();
    let mut indices = Vec::with_capacity(scenes.len());
    for (s, scene) in scenes.iter().enumerate() {
        indices.push(SpatialIndex::new(scene.cloud.points()));
        for (c, chunk) in make_chunks(&scene.cloud, config.chunk_size, config.stride)?.into_iter().enumerate() {
            jobs.push((s, c, chunk));
        }
    }
    jobs.par_iter()
        .enumerate()
        .map(|(j, (s, c, chunk))| {
            let scene = &scenes[*s];
            let views = ViewConfig {
                budget: config.view_budgets[j % config.view_budgets.len()],
                match_radius: config.match_radius,
            };
            let ctx = ChunkContext::build(scene, chunk, &views, &config.neighborhood)?;
            let seed = derive_seed(&[config.seed, *s as u64, *c as u64]);
            let picks = dedup_indices(&sample_chunk(chunk, config.points_per_chunk, seed)?);
            let points = ctx.samples(scene, &indices[*s], &picks, &config.neighborhood)?;
            let pixels = ctx.pixel_samples(config.pixels_per_chunk, seed ^ 1);
            Ok(Batch { points, pixels })
        })
        .collect()
}

/// Runs `config.epochs` epochs of one descent step per batch. Returns the
/// mean total loss of each epoch.
pub fn train_model(model: &mut SafnetModel, batches: &[Batch], config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, &b) in order.iter().enumerate() {
            let dropout = derive_seed(&[config.seed, epoch as u64, step as u64]);
            let (loss, grad) = batch_loss(model, &config.fusion, &config.loss, &batches[b], Some(dropout), true)?;
            let grad = grad.expect("gradient requested");
            model.add_scaled(&grad, -lr);
            model.gsm.clamp();
            sum += loss.total;
        }
        let mean = if batches.is_empty() { 0.0 } else { sum / batches.len() as f64 };
        log::info!("epoch {epoch}: lr {lr:e}, mean loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: SafnetModel,
    pub history: Vec<f64>,
}

pub fn train(scenes: &[SceneBundle], config: &TrainConfig) -> Result<TrainOutcome> {
    let first = scenes.first().ok_or_else(|| Error::invalid("training needs at least one scene"))?;
    if scenes.iter().any(|s| s.class_count != first.class_count) {
        return Err(Error::invalid("training scenes disagree on class_count"));
    }
    let mut model = SafnetModel::new(first.class_count, config.seed)?;
    if config.epochs == 0 {
        return Ok(TrainOutcome { model, history: Vec::new() });
    }
    let batches = prepare_batches(scenes, config)?;
    let history = train_model(&mut model, &batches, config)?;
    Ok(TrainOutcome { model, history })
}

/// Evaluation-mode loss over batches, averaged per batch.
pub fn mean_loss(model: &SafnetModel, batches: &[Batch], config: &TrainConfig) -> Result<LossBreakdown> {
    let mut acc = [0.0; 4];
    for b in batches {
        let (l, _) = batch_loss(model, &config.fusion, &config.loss, b, None, false)?;
        for (a, v) in acc.iter_mut().zip([l.l_fusion, l.l_2d, l.l_3d, l.l_2d_unp]) {
            *a += v;
        }
    }
    let n = batches.len().max(1) as f64;
    Ok(LossBreakdown::new(
        acc[0] / n,
        acc[1] / n,
        acc[2] / n,
        acc[3] / n,
        config.loss.effective_lambdas(),
    ))
}
