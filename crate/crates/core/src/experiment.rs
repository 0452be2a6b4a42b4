//! Synthetic experiment drivers: train/validate, ablation rows, and the
//! view-drop robustness sweep.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionSettings, LossSettings, SafnetModel};
use crate::gsm::GsmTerms;
use crate::metrics::{confusion, iou_scores, ConfusionMatrix};
use crate::model::SceneBundle;
use crate::segment::{segment_scene, SegmentConfig};
use crate::synth::{generate_scene, SceneSpec};
use crate::train::{derive_seed, prepare_batches, train_model, TrainConfig};

/// Preset used by the experiment drivers: small per-chunk samples and a
/// larger step size so that training finishes in minutes on one core.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        learning_rate: 0.03,
        lr_decay_epochs: 22,
        points_per_chunk: 128,
        pixels_per_chunk: 64,
        view_budgets: vec![5, 3, 1],
        ..TrainConfig::default()
    }
}

/// A reproducible set of generated training and validation scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub validation_scenes: usize,
    /// Template for every scene; its seed and mismatch offset are replaced.
    pub scene: SceneSpec,
    /// Mismatch offsets assigned to training scenes in rotation.
    pub train_mismatch: Vec<f64>,
    pub validation_mismatch: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 8,
            validation_scenes: 2,
            scene: SceneSpec::default(),
            train_mismatch: vec![0.0, 0.1, 0.2],
            validation_mismatch: 0.1,
        }
    }
}

impl SuiteConfig {
    pub fn train_specs(&self) -> Vec<SceneSpec> {
        (0..self.train_scenes)
            .map(|i| {
                let mut spec = self.scene.clone();
                spec.seed = derive_seed(&[self.seed, 0, i as u64]);
                if !self.train_mismatch.is_empty() {
                    spec.degradation.mismatch_offset = self.train_mismatch[i % self.train_mismatch.len()];
                }
                spec
            })
            .collect()
    }

    pub fn validation_specs(&self) -> Vec<SceneSpec> {
        (0..self.validation_scenes)
            .map(|i| {
                let mut spec = self.scene.clone();
                spec.seed = derive_seed(&[self.seed, 1, i as u64]);
                spec.degradation.mismatch_offset = self.validation_mismatch;
                spec
            })
            .collect()
    }
}

pub fn generate_all(specs: &[SceneSpec]) -> Result<Vec<SceneBundle>> {
    specs.par_iter().map(generate_scene).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub suite: SuiteConfig,
    /// Scene directories to train on instead of the generated suite.
    pub train_scene_dirs: Vec<PathBuf>,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            train: desk_train_config(),
            ..Self::default()
        }
    }

    pub fn training_scenes(&self) -> Result<Vec<SceneBundle>> {
        if self.train_scene_dirs.is_empty() {
            generate_all(&self.suite.train_specs())
        } else {
            self.train_scene_dirs.iter().map(crate::io::read_scene).collect()
        }
    }

    pub fn validation_scenes(&self) -> Result<Vec<SceneBundle>> {
        generate_all(&self.suite.validation_specs())
    }
}

/// Segmentation settings matching a training configuration.
pub fn segment_config_for(train: &TrainConfig, budget: usize) -> SegmentConfig {
    SegmentConfig {
        chunk_size: train.chunk_size,
        stride: train.stride,
        views: crate::context::ViewConfig {
            budget,
            match_radius: train.match_radius,
        },
        neighborhood: train.neighborhood.clone(),
    }
}

pub fn fit(scenes: &[SceneBundle], config: &TrainConfig) -> Result<Checkpoint> {
    let class_count = scenes
        .first()
        .ok_or_else(|| Error::invalid("training needs at least one scene"))?
        .class_count;
    let batches = prepare_batches(scenes, config)?;
    let mut model = SafnetModel::new(class_count, config.seed)?;
    let history = train_model(&mut model, &batches, config)?;
    Ok(Checkpoint {
        model,
        config: config.clone(),
        history,
    })
}

/// Confusion over all scenes, merged.
pub fn evaluate(
    model: &SafnetModel,
    settings: &FusionSettings,
    scenes: &[SceneBundle],
    config: &SegmentConfig,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.class_count());
    for scene in scenes {
        let seg = segment_scene(scene, model, settings, config)?;
        let gt = scene
            .cloud
            .labels()
            .ok_or_else(|| Error::invalid("evaluation scene has no labels"))?;
        cm.merge(&confusion(&seg.labels, gt, model.class_count())?)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_count: usize,
    /// `null` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub point_count: u64,
    pub loss_history: Vec<f64>,
}

impl EvalReport {
    pub fn new(cm: &ConfusionMatrix, loss_history: Vec<f64>) -> Self {
        let scores = iou_scores(cm);
        Self {
            class_count: cm.class_count,
            per_class_iou: scores.per_class,
            miou: scores.miou,
            point_count: cm.total(),
            loss_history,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub checkpoint: Checkpoint,
    pub validation: EvalReport,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let train_scenes = config.training_scenes()?;
    let checkpoint = fit(&train_scenes, &config.train)?;
    let validation_scenes = config.validation_scenes()?;
    let cm = evaluate(&checkpoint.model, &config.train.fusion, &validation_scenes, &config.segment)?;
    let validation = EvalReport::new(&cm, checkpoint.history.clone());
    Ok(ExperimentOutcome { checkpoint, validation })
}

/// Rows that add one component at a time, in order.
pub const ABLATION_PROGRESSION: [&str; 4] = ["baseline", "gsm-fs", "gsm-fs-bs", "gsm-fs-bs-csm"];
/// Full model with one training or fusion component removed.
pub const ABLATION_REMOVALS: [&str; 3] = ["no-aux", "no-unprojected", "no-attention"];

/// Fusion and loss settings of a named ablation row.
pub fn ablation_row(name: &str) -> Result<(FusionSettings, LossSettings)> {
    let full = FusionSettings::default();
    let loss = LossSettings::default();
    let terms = |forward, backward| GsmTerms { forward, backward };
    Ok(match name {
        "baseline" => (FusionSettings { gsm_terms: terms(false, false), csm: false, ..full }, loss),
        "gsm-fs" => (FusionSettings { gsm_terms: terms(true, false), csm: false, ..full }, loss),
        "gsm-fs-bs" => (FusionSettings { csm: false, ..full }, loss),
        "gsm-fs-bs-csm" => (full, loss),
        "no-aux" => (full, LossSettings { aux_losses: false, ..loss }),
        "no-unprojected" => (full, LossSettings { unprojected_loss: false, ..loss }),
        "no-attention" => (FusionSettings { channel_attention: false, ..full }, loss),
        other => return Err(Error::invalid(format!("unknown ablation row '{other}'"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub experiment: ExperimentConfig,
    /// Training seeds; each row is trained once per seed.
    pub seeds: Vec<u64>,
    pub rows: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut experiment = ExperimentConfig::desk();
        experiment.suite.train_mismatch = vec![0.1, 0.2];
        experiment.suite.validation_mismatch = 0.2;
        Self {
            experiment,
            seeds: vec![0, 1],
            rows: ABLATION_PROGRESSION.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub fusion: FusionSettings,
    pub loss: LossSettings,
    pub seed_miou: Vec<f64>,
    pub mean_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Largest mean-mIoU decrease between consecutive progression rows
    /// present in the report (negative when every step improves).
    pub progression_max_drop: Option<f64>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn run_ablation(config: &AblationConfig) -> Result<AblationReport> {
    if config.seeds.is_empty() || config.rows.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed and one row"));
    }
    let settings = config
        .rows
        .iter()
        .map(|name| ablation_row(name))
        .collect::<Result<Vec<_>>>()?;
    let exp = &config.experiment;
    let train_scenes = exp.training_scenes()?;
    let validation = exp.validation_scenes()?;
    let mut seed_miou = vec![Vec::with_capacity(config.seeds.len()); config.rows.len()];
    for &seed in &config.seeds {
        let base = TrainConfig { seed, ..exp.train.clone() };
        let batches = prepare_batches(&train_scenes, &base)?;
        for (r, (fusion, loss)) in settings.iter().enumerate() {
            let cfg = TrainConfig { fusion: *fusion, loss: *loss, ..base.clone() };
            let mut model = SafnetModel::new(train_scenes[0].class_count, seed)?;
            train_model(&mut model, &batches, &cfg)?;
            let miou = iou_scores(&evaluate(&model, fusion, &validation, &exp.segment)?).miou;
            log::info!("ablation row {} seed {seed}: mIoU {miou:.4}", config.rows[r]);
            seed_miou[r].push(miou);
        }
    }
    let rows: Vec<AblationRow> = config
        .rows
        .iter()
        .zip(settings)
        .zip(seed_miou)
        .map(|((name, (fusion, loss)), seed_miou)| AblationRow {
            name: name.clone(),
            fusion,
            loss,
            mean_miou: seed_miou.iter().sum::<f64>() / seed_miou.len() as f64,
            seed_miou,
        })
        .collect();
    let progression: Vec<f64> = ABLATION_PROGRESSION
        .iter()
        .filter_map(|n| rows.iter().find(|r| r.name == *n).map(|r| r.mean_miou))
        .collect();
    let progression_max_drop = progression.windows(2).map(|w| w[0] - w[1]).reduce(f64::max);
    Ok(AblationReport {
        seeds: config.seeds.clone(),
        rows,
        progression_max_drop,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    pub experiment: ExperimentConfig,
    /// Seeds of the evaluation scenes.
    pub seeds: Vec<u64>,
    pub camera_count: usize,
    pub view_drops: Vec<f64>,
    pub mismatch_offset: f64,
    pub points_per_scene: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::desk(),
            seeds: (0..5).collect(),
            camera_count: 5,
            view_drops: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            mismatch_offset: 0.1,
            points_per_scene: 8_000,
        }
    }
}

impl RobustnessConfig {
    pub fn scene_spec(&self, seed: u64, view_drop: f64) -> SceneSpec {
        let mut spec = self.experiment.suite.scene.clone();
        spec.seed = derive_seed(&[self.experiment.suite.seed, 2, seed]);
        spec.camera_count = self.camera_count;
        spec.camera_path.clear();
        spec.points_per_scene = self.points_per_scene;
        spec.degradation.mismatch_offset = self.mismatch_offset;
        spec.degradation.view_drop = view_drop;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub view_drop: f64,
    pub views: usize,
    pub seed: u64,
    pub safnet_miou: f64,
    pub fixed_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view_drop,views,seed,safnet_miou,fixed_miou\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.6},{:.6}", r.view_drop, r.views, r.seed, r.safnet_miou, r.fixed_miou).unwrap();
        }
        out
    }

    /// Seed-averaged (safnet, fixed) mIoU at one view-drop level.
    pub fn mean_at(&self, view_drop: f64) -> Option<(f64, f64)> {
        let rows: Vec<&RobustnessRow> = self.rows.iter().filter(|r| r.view_drop == view_drop).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.safnet_miou).sum::<f64>() / n,
            rows.iter().map(|r| r.fixed_miou).sum::<f64>() / n,
        ))
    }
}

/// Trains the same configuration twice, once per fusion mode.
pub fn train_mode_pair(config: &ExperimentConfig) -> Result<(Checkpoint, Checkpoint)> {
    let scenes = config.training_scenes()?;
    let batches = prepare_batches(&scenes, &config.train)?;
    let fit_mode = |mode: FusionMode| -> Result<Checkpoint> {
        let cfg = TrainConfig {
            fusion: config.train.fusion.with_mode(mode),
            ..config.train.clone()
        };
        let mut model = SafnetModel::new(scenes[0].class_count, cfg.seed)?;
        let history = train_model(&mut model, &batches, &cfg)?;
        Ok(Checkpoint { model, config: cfg, history })
    };
    Ok((fit_mode(FusionMode::Safnet)?, fit_mode(FusionMode::Fixed)?))
}

/// Evaluates a safnet-trained and a fixed-trained checkpoint on scenes with
/// progressively fewer views.
pub fn run_robustness(config: &RobustnessConfig, safnet: &Checkpoint, fixed: &Checkpoint) -> Result<RobustnessReport> {
    let segment = &config.experiment.segment;
    let mut rows = Vec::new();
    for &view_drop in &config.view_drops {
        for &seed in &config.seeds {
            let scene = generate_scene(&config.scene_spec(seed, view_drop))?;
            let miou = |ckpt: &Checkpoint| -> Result<f64> {
                Ok(iou_scores(&evaluate(&ckpt.model, &ckpt.config.fusion, std::slice::from_ref(&scene), segment)?).miou)
            };
            rows.push(RobustnessRow {
                view_drop,
                views: scene.frames.len(),
                seed,
                safnet_miou: miou(safnet)?,
                fixed_miou: miou(fixed)?,
            });
        }
    }
    Ok(RobustnessReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_seeds_are_distinct_and_stable() {
        let suite = SuiteConfig::default();
        let a = suite.train_specs();
        let b = suite.validation_specs();
        assert_eq!(a.len(), 8);
        assert_eq!(b.len(), 2);
        let mut seeds: Vec<u64> = a.iter().chain(&b).map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
        assert_eq!(a, suite.train_specs());
        assert_eq!(a[1].degradation.mismatch_offset, 0.1);
        assert_eq!(b[0].degradation.mismatch_offset, 0.1);
    }

    #[test]
    fn ablation_rows_toggle_one_component() {
        let (base, _) = ablation_row("baseline").unwrap();
        assert!(!base.gsm_terms.forward && !base.gsm_terms.backward && !base.csm);
        let (fs, _) = ablation_row("gsm-fs").unwrap();
        assert!(fs.gsm_terms.forward && !fs.gsm_terms.backward);
        let (full, _) = ablation_row("gsm-fs-bs-csm").unwrap();
        assert_eq!(full, FusionSettings::default());
        let (_, noaux) = ablation_row("no-aux").unwrap();
        assert_eq!(noaux.effective_lambdas()[..2], [0.0, 0.0]);
        assert!(ablation_row("everything").is_err());
    }

    #[test]
    fn csv_and_means() {
        let report = RobustnessReport {
            rows: vec![
                RobustnessRow { view_drop: 0.8, views: 1, seed: 0, safnet_miou: 0.5, fixed_miou: 0.25 },
                RobustnessRow { view_drop: 0.8, views: 1, seed: 1, safnet_miou: 0.7, fixed_miou: 0.25 },
            ],
        };
        assert_eq!(report.mean_at(0.8), Some((0.6, 0.25)));
        assert_eq!(report.mean_at(0.0), None);
        let csv = report.to_csv();
        assert!(csv.starts_with("view_drop,views,seed,safnet_miou,fixed_miou\n0.8,1,0,0.500000,0.250000\n"));
    }
}
