//! Two-stage one-against-all evaluation and significance testing.
//!
//! Stage one classifies every detector output against ground truth into
//! TP/FP/FN/TN per target class. Stage two lets the classifier re-examine
//! each region and moves the state through a fixed transition table. Metrics
//! are computed in two modes because the reference tables use two accuracy
//! definitions: per-class accuracy includes TN, overall accuracy is
//! `TP / (TP + FP + FN)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::{iou, BoundingBox, ClassId, Detection, GroundTruthBox};

/// Confusion tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, r#fn: fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.r#fn += other.r#fn;
        self.tn += other.tn;
    }

    pub fn record(&mut self, kind: StateKind) {
        match kind {
            StateKind::Tp => self.tp += 1,
            StateKind::Fp => self.fp += 1,
            StateKind::Fn => self.r#fn += 1,
            StateKind::Tn => self.tn += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateKind {
    Tp,
    Fp,
    Fn,
    Tn,
}

/// First-stage outcome for one region. TP and FP always carry the detection
/// box; FN carries a box only when some detection was associated with the
/// missed object (misclassified or mislocalized); TN carries a box for
/// correctly-rejected non-target detections and no box for the per-scene
/// vacuous case.
#[derive(Debug, Clone, PartialEq)]
pub struct YoloState {
    pub kind: StateKind,
    pub region: Option<BoundingBox>,
}

/// Second-stage transition: the classifier's positive/negative call moves
/// each first-stage state to its final state.
///
/// positive: TP -> TP, FN -> TP (recovered), FP -> FP, TN -> FP
/// negative: TP -> FN (lost), FN -> FN, FP -> TN (filtered), TN -> TN
pub fn vit_transition(state: StateKind, vit_positive: bool) -> StateKind {
    match (state, vit_positive) {
        (StateKind::Tp, true) => StateKind::Tp,
        (StateKind::Fn, true) => StateKind::Tp,
        (StateKind::Fp, true) => StateKind::Fp,
        (StateKind::Tn, true) => StateKind::Fp,
        (StateKind::Tp, false) => StateKind::Fn,
        (StateKind::Fn, false) => StateKind::Fn,
        (StateKind::Fp, false) => StateKind::Tn,
        (StateKind::Tn, false) => StateKind::Tn,
    }
}

/// Classifies one scene's detections against ground truth for one target
/// class.
///
/// Detections below `prob_threshold` are discarded. Detections and ground
/// truth are matched one-to-one, greedily by descending IoU over all
/// positive-overlap pairs (class-agnostic, so a target-class prediction
/// sitting on a non-target object is visible as such). Then, per region:
///
/// * target-class detection matched to a target GT at/above the IoU
///   threshold: TP;
/// * any other target-class detection: FP;
/// * target-class GT without a qualifying prediction: FN, carrying the
///   matched detection's box when one exists;
/// * non-target detection not sitting on a target GT: TN (correctly not
///   labeled target);
/// * scene with neither target GT nor target predictions: one vacuous TN.
pub fn classify_yolo_outcomes(
    detections: &[Detection],
    gt_boxes: &[GroundTruthBox],
    target: ClassId,
    iou_threshold: f64,
    prob_threshold: f64,
) -> Vec<YoloState> {
    let kept: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.confidence >= prob_threshold)
        .collect();

    // Greedy one-to-one matching by descending IoU; ties broken by index
    // order for determinism.
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (di, d) in kept.iter().enumerate() {
        for (gi, g) in gt_boxes.iter().enumerate() {
            let ov = iou(&d.bbox, &g.bbox);
            if ov > 0.0 {
                pairs.push((di, gi, ov));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut det_match: Vec<Option<usize>> = vec![None; kept.len()];
    let mut gt_match: Vec<Option<usize>> = vec![None; gt_boxes.len()];
    for (di, gi, _) in pairs {
        if det_match[di].is_none() && gt_match[gi].is_none() {
            det_match[di] = Some(gi);
            gt_match[gi] = Some(di);
        }
    }

    let mut states = Vec::new();
    let mut gt_satisfied = vec![false; gt_boxes.len()];

    for (di, d) in kept.iter().enumerate() {
        let matched_target_gt = det_match[di]
            .map(|gi| gt_boxes[gi].class_id == target)
            .unwrap_or(false);
        if d.class_id == target {
            let qualifies = det_match[di]
                .map(|gi| {
                    gt_boxes[gi].class_id == target
                        && iou(&d.bbox, &gt_boxes[gi].bbox) >= iou_threshold
                })
                .unwrap_or(false);
            if qualifies {
                gt_satisfied[det_match[di].unwrap()] = true;
                states.push(YoloState { kind: StateKind::Tp, region: Some(d.bbox) });
            } else {
                states.push(YoloState { kind: StateKind::Fp, region: Some(d.bbox) });
            }
        } else if !matched_target_gt {
            // Non-target prediction on a region without a target object:
            // correctly not labeled target.
            states.push(YoloState { kind: StateKind::Tn, region: Some(d.bbox) });
        }
        // Non-target prediction sitting on a target GT surfaces as that
        // GT's boxed FN below.
    }

    for (gi, g) in gt_boxes.iter().enumerate() {
        if g.class_id != target || gt_satisfied[gi] {
            continue;
        }
        let region = gt_match[gi].map(|di| kept[di].bbox);
        states.push(YoloState { kind: StateKind::Fn, region });
    }

    let any_target_gt = gt_boxes.iter().any(|g| g.class_id == target);
    let any_target_pred = kept.iter().any(|d| d.class_id == target);
    if !any_target_gt && !any_target_pred {
        states.push(YoloState { kind: StateKind::Tn, region: None });
    }

    states
}

/// Precision/recall family. `degenerate` lists metrics whose denominator was
/// zero (reported as 0 by convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tnr: f64,
    pub degenerate: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricMode {
    /// Accuracy includes TN: `(TP + TN) / total`.
    PerClass,
    /// Accuracy excludes TN: `TP / (TP + FP + FN)`.
    Overall,
}

pub fn compute_metrics(counts: &ConfusionCounts, mode: MetricMode) -> MetricSet {
    let (tp, fp, fn_, tn) = (
        counts.tp as f64,
        counts.fp as f64,
        counts.r#fn as f64,
        counts.tn as f64,
    );
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);
    let tnr = ratio("tnr", tn, tn + fp);
    let accuracy = match mode {
        MetricMode::PerClass => ratio("accuracy", tp + tn, tp + fp + fn_ + tn),
        MetricMode::Overall => ratio("accuracy", tp, tp + fp + fn_),
    };
    MetricSet { precision, recall, f1, accuracy, tnr, degenerate }
}

/// One train/validation re-split: indices into the scene pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Z random train/validation re-splits of `pool_size` items, reproducible
/// from the seed. Each fold shuffles the pool independently and reserves
/// `val_fraction` (at least one item) for validation.
pub fn zfold_split(
    pool_size: usize,
    z: usize,
    val_fraction: f64,
    master_seed: u64,
) -> Result<Vec<FoldSplit>> {
    if z < 2 {
        return Err(Error::InvalidConfig("Z must be at least 2".into()));
    }
    if pool_size < z {
        return Err(Error::InvalidConfig(format!(
            "pool of {pool_size} cannot support Z = {z}"
        )));
    }
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::InvalidConfig("val_fraction must be in (0, 1)".into()));
    }
    let n_val = ((pool_size as f64 * val_fraction).round() as usize).clamp(1, pool_size - 1);
    let mut folds = Vec::with_capacity(z);
    for fold in 0..z {
        let mut rng = stream_rng(master_seed, Stream::FoldSplit(fold as u64));
        let mut indices: Vec<usize> = (0..pool_size).collect();
        indices.shuffle(&mut rng);
        let val = indices[..n_val].to_vec();
        let train = indices[n_val..].to_vec();
        folds.push(FoldSplit { train, val });
    }
    Ok(folds)
}

/// Result of an unpaired two-sample t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Student's unpaired equal-variance t-test, two-sided.
///
/// `t = (mean_a - mean_b) / sqrt(sp^2 (1/n_a + 1/n_b))` with the pooled
/// sample variance `sp^2` and `df = n_a + n_b - 2`; the p-value comes from
/// the t-distribution CDF via the regularized incomplete beta.
pub fn unpaired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::DegenerateStatistic(
            "each sample needs at least two values".into(),
        ));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let va = sample_variance(a, ma);
    let vb = sample_variance(b, mb);
    let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
    if pooled <= 0.0 {
        return Err(Error::DegenerateStatistic("zero pooled variance".into()));
    }
    let df = na + nb - 2.0;
    let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let p = if t == 0.0 {
        1.0
    } else {
        let x = df / (df + t * t);
        statrs::function::beta::beta_reg(df / 2.0, 0.5, x)
    };
    Ok(TTestResult { t, p, df })
}

/// Arithmetic mean and population (divide-by-n) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std of empty slice");
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    (m, var.sqrt())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64], m: f64) -> f64 {
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BoundingBox, Detection};

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BoundingBox, class_id: ClassId, conf: f64) -> Detection {
        Detection { bbox: b, class_id, confidence: conf }
    }

    fn gt(b: BoundingBox, class_id: ClassId) -> GroundTruthBox {
        GroundTruthBox { bbox: b, class_id }
    }

    fn kinds(states: &[YoloState]) -> Vec<StateKind> {
        let mut v: Vec<StateKind> = states.iter().map(|s| s.kind).collect();
        v.sort_by_key(|k| format!("{k:?}"));
        v
    }

    #[test]
    fn perfect_match_is_tp() {
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![det(bb(0.0, 0.0, 10.0, 10.0), 0, 0.9)];
        let states = classify_yolo_outcomes(&d, &g, 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Tp]);
    }

    #[test]
    fn mislocalized_correct_class_is_fp_plus_boxed_fn() {
        // IoU 0.4 at threshold 0.7: the prediction is an FP and the object
        // a FN that still carries the prediction's box.
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![det(bb(0.0, 0.0, 10.0, 4.0), 0, 0.9)]; // IoU = 0.4
        let states = classify_yolo_outcomes(&d, &g, 0, 0.7, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Fn, StateKind::Fp]);
        let fn_state = states.iter().find(|s| s.kind == StateKind::Fn).unwrap();
        assert_eq!(fn_state.region, Some(d[0].bbox));
    }

    #[test]
    fn empty_scene_is_one_vacuous_tn() {
        let states = classify_yolo_outcomes(&[], &[], 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Tn]);
        assert!(states[0].region.is_none());
    }

    #[test]
    fn undetected_object_is_boxless_fn() {
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let states = classify_yolo_outcomes(&[], &g, 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Fn]);
        assert!(states[0].region.is_none());
    }

    #[test]
    fn misclassified_object_is_boxed_fn() {
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![det(bb(0.0, 0.0, 10.0, 10.0), 2, 0.9)];
        let states = classify_yolo_outcomes(&d, &g, 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Fn]);
        assert_eq!(states[0].region, Some(d[0].bbox));
        // For target class 2 the same detection is an FP (wrong object).
        let states2 = classify_yolo_outcomes(&d, &g, 2, 0.5, 0.25);
        assert_eq!(kinds(&states2), vec![StateKind::Fp]);
    }

    #[test]
    fn non_target_detection_away_from_targets_is_tn() {
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![
            det(bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(bb(50.0, 50.0, 60.0, 60.0), 2, 0.9),
        ];
        let states = classify_yolo_outcomes(&d, &g, 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Tn, StateKind::Tp]);
    }

    #[test]
    fn low_confidence_detections_are_discarded() {
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![det(bb(0.0, 0.0, 10.0, 10.0), 0, 0.1)];
        let states = classify_yolo_outcomes(&d, &g, 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Fn]);
        assert!(states[0].region.is_none());
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        // Two detections over one object: only one can match; the other is FP.
        let g = vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)];
        let d = vec![
            det(bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(bb(1.0, 1.0, 11.0, 11.0), 0, 0.9),
        ];
        let states = classify_yolo_outcomes(&d, &g, 0, 0.5, 0.25);
        assert_eq!(kinds(&states), vec![StateKind::Fp, StateKind::Tp]);
    }

    #[test]
    fn transition_table_matches_definitions() {
        use StateKind::*;
        // positive calls
        assert_eq!(vit_transition(Tp, true), Tp); // confirmed positive
        assert_eq!(vit_transition(Fn, true), Tp); // recovered miss
        assert_eq!(vit_transition(Fp, true), Fp);
        assert_eq!(vit_transition(Tn, true), Fp); // wrongly indicated presence
        // negative calls
        assert_eq!(vit_transition(Tp, false), Fn);
        assert_eq!(vit_transition(Fn, false), Fn);
        assert_eq!(vit_transition(Fp, false), Tn); // correctly determined absent
        assert_eq!(vit_transition(Tn, false), Tn);
    }

    #[test]
    fn transition_conserves_positives_and_negatives() {
        use StateKind::*;
        for s in [Tp, Fp, Fn, Tn] {
            for v in [true, false] {
                let out = vit_transition(s, v);
                let in_pos = matches!(s, Tp | Fn);
                let out_pos = matches!(out, Tp | Fn);
                assert_eq!(in_pos, out_pos, "{s:?} with {v} crossed the GT boundary");
            }
        }
    }

    #[test]
    fn metrics_overall_reproduces_reference_row() {
        let m = compute_metrics(&ConfusionCounts::new(1501, 616, 212, 86), MetricMode::Overall);
        assert!((m.precision - 0.7090).abs() < 1e-4);
        assert!((m.recall - 0.8762).abs() < 1e-4);
        assert!((m.accuracy - 0.6445).abs() < 1e-4);
    }

    #[test]
    fn metrics_per_class_reproduces_reference_cell() {
        let m = compute_metrics(&ConfusionCounts::new(684, 113, 133, 31), MetricMode::PerClass);
        assert!((m.precision - 0.8582).abs() < 1e-4);
        assert!((m.recall - 0.8372).abs() < 1e-4);
        assert!((m.f1 - 0.8476).abs() < 1e-4);
        assert!((m.accuracy - 0.7440).abs() < 1e-4);
        assert!((m.tnr - 0.2153).abs() < 1e-4);
    }

    #[test]
    fn metrics_all_ones_case() {
        let m = compute_metrics(&ConfusionCounts::new(1, 0, 0, 1), MetricMode::PerClass);
        assert_eq!(
            (m.precision, m.recall, m.f1, m.accuracy, m.tnr),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn metrics_flag_degenerate_denominators() {
        let m = compute_metrics(&ConfusionCounts::new(0, 0, 0, 0), MetricMode::PerClass);
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision".to_string()));
        assert!(m.degenerate.contains(&"accuracy".to_string()));
    }

    #[test]
    fn zfold_properties() {
        let folds = zfold_split(100, 10, 0.2, 42).unwrap();
        assert_eq!(folds.len(), 10);
        for f in &folds {
            let mut all: Vec<usize> = f.train.iter().chain(&f.val).cloned().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
            assert_eq!(f.val.len(), 20);
        }
        let again = zfold_split(100, 10, 0.2, 42).unwrap();
        assert_eq!(folds, again);
        let other = zfold_split(100, 10, 0.2, 43).unwrap();
        assert_ne!(folds, other);
        assert!(zfold_split(5, 10, 0.2, 1).is_err());
    }

    #[test]
    fn ttest_hand_computed_case() {
        let r = unpaired_ttest(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((r.t - (-2.8284271)).abs() < 1e-6, "t = {}", r.t);
        assert_eq!(r.df, 2.0);
    }

    #[test]
    fn ttest_identical_samples_is_zero() {
        let r = unpaired_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn ttest_antisymmetric_and_scale_invariant() {
        let a = [0.61, 0.63, 0.60, 0.62, 0.64];
        let b = [0.55, 0.58, 0.56, 0.57, 0.54];
        let ab = unpaired_ttest(&a, &b).unwrap();
        let ba = unpaired_ttest(&b, &a).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
        let ca: Vec<f64> = a.iter().map(|v| v * 3.5).collect();
        let cb: Vec<f64> = b.iter().map(|v| v * 3.5).collect();
        let scaled = unpaired_ttest(&ca, &cb).unwrap();
        assert!((ab.t - scaled.t).abs() < 1e-9);
    }

    #[test]
    fn ttest_rejects_zero_pooled_variance() {
        assert!(unpaired_ttest(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn mean_std_population_convention() {
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert_eq!(s, 0.5);
        let (_, s0) = mean_std(&[2.0, 2.0, 2.0]);
        assert_eq!(s0, 0.0);
    }
}
