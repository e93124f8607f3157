//! End-to-end experiment orchestration.
//!
//! A run takes scenes (generated or loaded), detects with the mock detector,
//! builds fused tensors per detection region, trains the classifier on the
//! train split, then evaluates two variants across the IoU grid: image-only
//! (first-stage states as they are) and fused (states re-examined by the
//! classifier). With Z folds it repeats this over Z random re-splits and
//! runs the significance test per threshold.
//!
//! Folds are independent and run in parallel; every randomized step draws
//! from a stream derived from the master seed, so results are byte-identical
//! regardless of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{synth_scene_events, AudioSynthConfig};
use crate::detector::{mock_detect, DetectorNoise};
use crate::error::{Error, Result};
use crate::eval::{
    classify_yolo_outcomes, compute_metrics, unpaired_ttest, vit_transition, zfold_split,
    ConfusionCounts, MetricMode, MetricSet, TTestResult,
};
use crate::fusion::{
    build_audio_tensor, build_mask, fuse, normalize01, repeat_k, squeeze_features,
    ClassFeatureTensor,
};
use crate::scene::{
    generate_scene, iou, BoundingBox, ClassId, ClassTaxonomy, Detection, GroundTruthBox, Scene,
    SceneGenConfig,
};
use crate::vit::{train, Sample, TrainReport, ViTConfig, ViTModel};

/// Full configuration of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scene_gen: SceneGenConfig,
    pub scenes: usize,
    pub audio: AudioSynthConfig,
    pub detector: DetectorNoise,
    pub vit: ViTConfig,
    /// IoU thresholds of the evaluation grid.
    pub iou_grid: Vec<f64>,
    /// Confidence gate for detections.
    pub prob_threshold: f64,
    /// IoU threshold used to label training samples from ground truth.
    pub label_iou: f64,
    /// Number of random re-splits; 1 means a single split.
    pub folds: usize,
    pub val_fraction: f64,
}

impl RunConfig {
    /// The standard synthetic benchmark: high visual ambiguity so that audio
    /// carries the class signal, detector jitter sized so that roughly half
    /// the detections fail IoU 0.7 while nearly all pass 0.3.
    pub fn standard_benchmark(seed: u64) -> Self {
        let mut scene_gen = SceneGenConfig::default();
        scene_gen.ambiguity = 0.6;
        Self {
            seed,
            scene_gen,
            scenes: 1000,
            audio: AudioSynthConfig::default(),
            detector: DetectorNoise {
                miss_rate: 0.08,
                false_positive_rate: 0.15,
                localization_jitter: 5.0,
                class_confusion: vec![
                    vec![0.85, 0.04, 0.11],
                    vec![0.06, 0.88, 0.06],
                    vec![0.08, 0.04, 0.88],
                ],
                confidence: Default::default(),
                spurious_box_side: (25.0, 60.0),
            },
            vit: ViTConfig {
                embed_dim: 32,
                depth: 2,
                num_heads: 4,
                learning_rate: 1e-3,
                max_epochs: 40,
                patience: 6,
                batch_size: 32,
                seed,
                ..ViTConfig::default()
            },
            iou_grid: vec![0.3, 0.5, 0.7],
            prob_threshold: 0.25,
            label_iou: 0.3,
            folds: 10,
            val_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_grid.is_empty() || self.iou_grid.iter().any(|&t| !(0.0 < t && t <= 1.0)) {
            return Err(Error::InvalidConfig("IoU grid entries must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.prob_threshold) {
            return Err(Error::InvalidConfig("prob_threshold must be in [0, 1]".into()));
        }
        if self.folds == 0 || self.scenes == 0 {
            return Err(Error::InvalidConfig("need at least one fold and one scene".into()));
        }
        Ok(())
    }
}

/// A scene reduced to what evaluation needs: the normalized feature map,
/// ground truth, events, and this run's detections.
pub struct PreparedScene {
    pub id: u64,
    pub norm_map: crate::tensor::Tensor,
    pub image_width: f64,
    pub image_height: f64,
    pub duration: f64,
    pub gt_boxes: Vec<GroundTruthBox>,
    pub events: Vec<crate::audio::AudioEvent>,
    pub detections: Vec<Detection>,
    /// Audio tensor V, shared by every region of the scene.
    pub audio_tensor: ClassFeatureTensor,
    /// Repeated normalized map F.
    pub class_features: ClassFeatureTensor,
}

/// Squeezes, normalizes, detects, and precomputes the scene-wide F and V.
pub fn prepare_scene(
    scene: &Scene,
    taxonomy: &ClassTaxonomy,
    noise: &DetectorNoise,
    master_seed: u64,
) -> Result<PreparedScene> {
    let k = taxonomy.len();
    let squeezed = squeeze_features(&scene.features)?;
    let norm_map = normalize01(&squeezed);
    let class_features = repeat_k(&norm_map, k)?;
    let audio_tensor = build_audio_tensor(
        &scene.events,
        k,
        scene.layer.width,
        scene.layer.height,
        scene.duration,
    )?;
    let detections = mock_detect(scene, noise, k, master_seed)?;
    Ok(PreparedScene {
        id: scene.id,
        norm_map,
        image_width: scene.image_width,
        image_height: scene.image_height,
        duration: scene.duration,
        gt_boxes: scene.gt_boxes.clone(),
        events: scene.events.clone(),
        detections,
        audio_tensor,
        class_features,
    })
}

/// Fused tensor for one region of a prepared scene.
pub fn fused_tensor_for_region(
    prepared: &PreparedScene,
    region: &BoundingBox,
) -> Result<ClassFeatureTensor> {
    let k = prepared.class_features.classes;
    let mask = build_mask(
        region,
        prepared.image_width,
        prepared.image_height,
        k,
        prepared.class_features.width,
        prepared.class_features.height,
    )?;
    fuse(&prepared.class_features, &prepared.audio_tensor, &mask)
}

/// Builds one training sample per detection: the region's fused tensor,
/// labeled with the class of the best-overlapping ground-truth box at the
/// labeling threshold, or the rejection class when none qualifies.
pub fn training_samples(
    prepared: &[&PreparedScene],
    taxonomy: &ClassTaxonomy,
    label_iou: f64,
    prob_threshold: f64,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for scene in prepared {
        for det in &scene.detections {
            if det.confidence < prob_threshold {
                continue;
            }
            let label = scene
                .gt_boxes
                .iter()
                .map(|g| (iou(&det.bbox, &g.bbox), g.class_id))
                .filter(|&(ov, _)| ov >= label_iou)
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .map(|(_, class)| class)
                .unwrap_or_else(|| taxonomy.rejection_class());
            samples.push((fused_tensor_for_region(scene, &det.bbox)?, label));
        }
    }
    Ok(samples)
}

/// Counts for one variant at one threshold: per class plus their sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdCounts {
    pub iou: f64,
    pub per_class: Vec<ConfusionCounts>,
    pub overall: ConfusionCounts,
}

/// Evaluation of both variants over the IoU grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub image: Vec<ThresholdCounts>,
    pub fused: Vec<ThresholdCounts>,
}

impl GridEvaluation {
    pub fn overall_accuracy(&self, variant_fused: bool, idx: usize) -> f64 {
        let counts = if variant_fused { &self.fused[idx] } else { &self.image[idx] };
        compute_metrics(&counts.overall, MetricMode::Overall).accuracy
    }
}

/// Evaluates one scene set against a trained model over the grid.
///
/// The classifier's verdict per region depends only on the region, so each
/// detection is classified once and the result reused across thresholds and
/// target classes.
pub fn evaluate_grid(
    scenes: &[&PreparedScene],
    model: &ViTModel,
    taxonomy: &ClassTaxonomy,
    iou_grid: &[f64],
    prob_threshold: f64,
) -> Result<GridEvaluation> {
    let k = taxonomy.len();
    let mut image = Vec::with_capacity(iou_grid.len());
    let mut fused = Vec::with_capacity(iou_grid.len());

    // predicted class per (scene, detection) region and per boxed FN region
    let mut region_pred: Vec<Vec<ClassId>> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut preds = Vec::with_capacity(scene.detections.len());
        for det in &scene.detections {
            if det.confidence < prob_threshold {
                preds.push(usize::MAX); // never consulted
                continue;
            }
            let tensor = fused_tensor_for_region(scene, &det.bbox)?;
            preds.push(model.predict(&tensor)?);
        }
        region_pred.push(preds);
    }

    for &threshold in iou_grid {
        let mut image_counts = vec![ConfusionCounts::default(); k];
        let mut fused_counts = vec![ConfusionCounts::default(); k];
        for (si, scene) in scenes.iter().enumerate() {
            for target in 0..k {
                let states = classify_yolo_outcomes(
                    &scene.detections,
                    &scene.gt_boxes,
                    target,
                    threshold,
                    prob_threshold,
                );
                for state in &states {
                    image_counts[target].record(state.kind);
                    let final_kind = match state.region {
                        Some(region) => {
                            let pred = lookup_region_pred(
                                scene,
                                &region_pred[si],
                                &region,
                                prob_threshold,
                            );
                            vit_transition(state.kind, pred == target)
                        }
                        // No feature region exists: the first-stage verdict
                        // stands (undetected objects stay FN, vacuous TN
                        // stays TN).
                        None => state.kind,
                    };
                    fused_counts[target].record(final_kind);
                }
            }
        }
        let sum = |counts: &[ConfusionCounts]| {
            let mut total = ConfusionCounts::default();
            for c in counts {
                total.add(c);
            }
            total
        };
        image.push(ThresholdCounts {
            iou: threshold,
            overall: sum(&image_counts),
            per_class: image_counts,
        });
        fused.push(ThresholdCounts {
            iou: threshold,
            overall: sum(&fused_counts),
            per_class: fused_counts,
        });
    }
    Ok(GridEvaluation { image, fused })
}

/// Finds the cached prediction for a state's region (regions always come
/// from detection boxes).
fn lookup_region_pred(
    scene: &PreparedScene,
    preds: &[ClassId],
    region: &BoundingBox,
    prob_threshold: f64,
) -> ClassId {
    for (det, &pred) in scene.detections.iter().zip(preds) {
        if det.confidence >= prob_threshold && det.bbox == *region {
            return pred;
        }
    }
    unreachable!("state region is always one of the scene's detection boxes")
}

/// Outcome of one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub grid: GridEvaluation,
    pub train_report: TrainReport,
}

/// Per-threshold comparison across folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub iou: f64,
    pub image_accuracies: Vec<f64>,
    pub fused_accuracies: Vec<f64>,
    pub image_mean: f64,
    pub image_std: f64,
    pub fused_mean: f64,
    pub fused_std: f64,
    pub ttest: Option<TTestResult>,
}

/// Everything a run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub folds: Vec<FoldOutcome>,
    /// Present when `config.folds >= 2`.
    pub significance: Vec<SignificanceRow>,
}

/// Generates the synthetic scene pool for a config (scenes plus events).
pub fn generate_pool(config: &RunConfig, taxonomy: &ClassTaxonomy) -> Result<Vec<Scene>> {
    (0..config.scenes as u64)
        .map(|id| {
            let mut scene = generate_scene(&config.scene_gen, taxonomy, config.seed, id)?;
            scene.events = synth_scene_events(&scene, taxonomy, &config.audio, config.seed)?;
            Ok(scene)
        })
        .collect()
}

/// Runs the full experiment on an in-memory scene pool.
pub fn run_experiment(
    config: &RunConfig,
    taxonomy: &ClassTaxonomy,
    pool: &[Scene],
) -> Result<ExperimentReport> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let prepared: Vec<PreparedScene> = pool
        .par_iter()
        .map(|scene| prepare_scene(scene, taxonomy, &config.detector, config.seed))
        .collect::<Result<_>>()?;

    let splits = if config.folds == 1 {
        // single split, same mechanism as fold 0
        zfold_split(prepared.len(), 2, config.val_fraction, config.seed)?
            .into_iter()
            .take(1)
            .collect()
    } else {
        zfold_split(prepared.len(), config.folds, config.val_fraction, config.seed)?
    };

    let folds: Vec<FoldOutcome> = splits
        .par_iter()
        .enumerate()
        .map(|(fold, split)| -> Result<FoldOutcome> {
            let train_scenes: Vec<&PreparedScene> =
                split.train.iter().map(|&i| &prepared[i]).collect();
            let val_scenes: Vec<&PreparedScene> =
                split.val.iter().map(|&i| &prepared[i]).collect();

            let train_set = training_samples(
                &train_scenes,
                taxonomy,
                config.label_iou,
                config.prob_threshold,
            )?;
            let val_set = training_samples(
                &val_scenes,
                taxonomy,
                config.label_iou,
                config.prob_threshold,
            )?;

            let mut vit_cfg = config.vit.clone();
            vit_cfg.seed = config.seed.wrapping_add(fold as u64);
            let mut model = ViTModel::new(
                vit_cfg,
                taxonomy.len(),
                config.scene_gen.layer.height,
                config.scene_gen.layer.width,
            )?;
            let train_report = train(&mut model, &train_set, &val_set)?;

            let grid = evaluate_grid(
                &val_scenes,
                &model,
                taxonomy,
                &config.iou_grid,
                config.prob_threshold,
            )?;
            Ok(FoldOutcome { fold, grid, train_report })
        })
        .collect::<Result<_>>()?;

    let significance = if folds.len() >= 2 {
        config
            .iou_grid
            .iter()
            .enumerate()
            .map(|(ti, &threshold)| {
                let image: Vec<f64> = folds
                    .iter()
                    .map(|f| f.grid.overall_accuracy(false, ti))
                    .collect();
                let fused: Vec<f64> = folds
                    .iter()
                    .map(|f| f.grid.overall_accuracy(true, ti))
                    .collect();
                let (mi, si) = crate::eval::mean_std(&image);
                let (mf, sf) = crate::eval::mean_std(&fused);
                SignificanceRow {
                    iou: threshold,
                    ttest: unpaired_ttest(&fused, &image).ok(),
                    image_accuracies: image,
                    fused_accuracies: fused,
                    image_mean: mi,
                    image_std: si,
                    fused_mean: mf,
                    fused_std: sf,
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(ExperimentReport { config: config.clone(), folds, significance })
}

/// Flattened per-class rows of a grid: `(variant, iou, class, counts,
/// metrics)`.
pub fn per_class_rows(
    grid: &GridEvaluation,
) -> Vec<(String, f64, ClassId, ConfusionCounts, MetricSet)> {
    let mut rows = Vec::new();
    for (variant, thresholds) in [("image", &grid.image), ("fused", &grid.fused)] {
        for row in thresholds.iter() {
            for (class_id, counts) in row.per_class.iter().enumerate() {
                rows.push((
                    variant.to_string(),
                    row.iou,
                    class_id,
                    *counts,
                    compute_metrics(counts, MetricMode::PerClass),
                ));
            }
        }
    }
    rows
}

/// Flattened overall rows of a grid: `(variant, iou, counts, metrics)`.
pub fn overall_rows(grid: &GridEvaluation) -> Vec<(String, f64, ConfusionCounts, MetricSet)> {
    let mut rows = Vec::new();
    for (variant, thresholds) in [("image", &grid.image), ("fused", &grid.fused)] {
        for row in thresholds.iter() {
            rows.push((
                variant.to_string(),
                row.iou,
                row.overall,
                compute_metrics(&row.overall, MetricMode::Overall),
            ));
        }
    }
    rows
}
