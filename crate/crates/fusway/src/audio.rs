//! Synthesis of audio-analyser outputs.
//!
//! Real recordings are never materialized; the analyser's *outputs* are
//! synthesized directly: per detected event, a time window, a class
//! probability vector, and a normalized peak measure drawn uniformly from a
//! per-class interval. Peak intervals come from analysis of real recordings:
//! Nothing (0, 0.2), Surface defect (0.3, 0.6), Rupture (0.8, 1).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scene::{BoundingBox, ClassId, ClassTaxonomy, Scene};

/// One analyser detection: window limits, class probabilities, normalized
/// peak measure, and the most probable class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEvent {
    /// Window start, seconds.
    pub t_start: f64,
    /// Window end, seconds.
    pub t_end: f64,
    /// Class probability vector, length K, sums to one.
    pub probs: Vec<f64>,
    /// Normalized signal measure on the window, in `[0, 1]`.
    pub peak: f64,
    pub predicted_class: ClassId,
}

impl AudioEvent {
    pub fn validate(&self, duration: f64, k: usize) -> Result<()> {
        if !(0.0 <= self.t_start && self.t_start < self.t_end && self.t_end <= duration) {
            return Err(Error::InvalidWindow(format!(
                "[{}, {}] outside [0, {duration}]",
                self.t_start, self.t_end
            )));
        }
        if self.probs.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "probability vector length {} != {k}",
                self.probs.len()
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("probabilities sum to {sum}")));
        }
        if argmax(&self.probs) != self.predicted_class {
            return Err(Error::InvalidConfig(
                "predicted class is not the argmax of the probability vector".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.peak) {
            return Err(Error::InvalidConfig(format!("peak {} outside [0, 1]", self.peak)));
        }
        Ok(())
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-class `(a, b)` peak-measure intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakIntervalTable {
    intervals: Vec<(f64, f64)>,
}

impl PeakIntervalTable {
    /// Intervals fixed from real-world data: Rupture (0.8, 1),
    /// Surface defect (0.3, 0.6), Nothing (0, 0.2).
    pub fn rail() -> Self {
        Self {
            intervals: vec![(0.8, 1.0), (0.3, 0.6), (0.0, 0.2)],
        }
    }

    pub fn from_intervals(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for &(a, b) in &intervals {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "peak interval ({a}, {b}) must satisfy 0 <= a < b <= 1"
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn interval(&self, class_id: ClassId) -> (f64, f64) {
        self.intervals[class_id]
    }
}

/// Draws the normalized peak for `class_id`: `a + (b - a) * u`, `u ~ U(0,1)`.
pub fn sample_peak(class_id: ClassId, table: &PeakIntervalTable, rng: &mut ChaCha8Rng) -> f64 {
    let (a, b) = table.interval(class_id);
    a + (b - a) * rng.gen_range(0.0..1.0)
}

/// Draws a probability vector with the chosen class dominant.
///
/// The chosen class gets `U(0.7, 1)`; each subsequent class in cyclic order
/// gets a uniform draw from the remaining mass; the final class takes the
/// exact remainder (which may exceed earlier non-chosen draws — that is
/// preserved rather than re-normalized). The result always sums to one and
/// its argmax is the chosen class.
pub fn sample_probs(chosen: ClassId, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(k >= 2, "need at least two classes");
    assert!(chosen < k, "chosen class out of range");
    let mut probs = vec![0.0; k];
    probs[chosen] = rng.gen_range(0.7..1.0);
    let mut remaining: f64 = 1.0 - probs[chosen];
    for step in 1..k - 1 {
        let idx = (chosen + step) % k;
        probs[idx] = rng.gen_range(0.0..remaining.max(f64::MIN_POSITIVE));
        remaining -= probs[idx];
    }
    probs[(chosen + k - 1) % k] = remaining.max(0.0);
    probs
}

/// Jitter applied to event windows relative to the box's time span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowJitter {
    /// Uniform shift amplitude, seconds.
    pub shift: f64,
    /// Uniform dilation amplitude, seconds added/removed per side.
    pub dilate: f64,
}

impl WindowJitter {
    pub fn none() -> Self {
        Self { shift: 0.0, dilate: 0.0 }
    }
}

/// Settings for per-scene event synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSynthConfig {
    pub table: PeakIntervalTable,
    pub jitter: WindowJitter,
    /// When true, rejection-class boxes also emit (low-peak) events.
    /// Off by default: they are not distinct from ambient noise.
    pub ambient_nothing_events: bool,
}

impl Default for AudioSynthConfig {
    fn default() -> Self {
        Self {
            table: PeakIntervalTable::rail(),
            jitter: WindowJitter::none(),
            ambient_nothing_events: false,
        }
    }
}

/// Time span of a box's feature-row extent: rows are `1..=grid_height`, row
/// `r` covers `[(r-1)*dt, r*dt]` with `dt = duration / grid_height`.
pub fn box_time_span(
    bbox: &BoundingBox,
    image_height: f64,
    grid_height: usize,
    duration: f64,
) -> (f64, f64) {
    let cell = image_height / grid_height as f64;
    let r0 = ((bbox.y_min / cell).floor() as i64 + 1).clamp(1, grid_height as i64);
    let r1 = ((bbox.y_max / cell).ceil() as i64).clamp(1, grid_height as i64);
    let dt = duration / grid_height as f64;
    ((r0 - 1) as f64 * dt, r1 as f64 * dt)
}

/// Synthesizes the analyser output for one ground-truth box.
pub fn synth_event_for_box(
    bbox: &BoundingBox,
    class_id: ClassId,
    scene: &Scene,
    config: &AudioSynthConfig,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AudioEvent> {
    let (mut t0, mut t1) =
        box_time_span(bbox, scene.image_height, scene.layer.height, scene.duration);
    let j = &config.jitter;
    if j.shift > 0.0 || j.dilate > 0.0 {
        let shift = if j.shift > 0.0 { rng.gen_range(-j.shift..=j.shift) } else { 0.0 };
        let grow0 = if j.dilate > 0.0 { rng.gen_range(-j.dilate..=j.dilate) } else { 0.0 };
        let grow1 = if j.dilate > 0.0 { rng.gen_range(-j.dilate..=j.dilate) } else { 0.0 };
        t0 = t0 + shift - grow0;
        t1 = t1 + shift + grow1;
    }
    let t0 = t0.clamp(0.0, scene.duration);
    let t1 = t1.clamp(0.0, scene.duration);
    if t0 >= t1 {
        return Err(Error::InvalidWindow(format!(
            "window collapsed to zero length after clamping ([{t0}, {t1}])"
        )));
    }

    let peak = sample_peak(class_id, &config.table, rng);
    let probs = sample_probs(class_id, k, rng);
    Ok(AudioEvent {
        t_start: t0,
        t_end: t1,
        peak,
        predicted_class: argmax(&probs),
        probs,
    })
}

/// Synthesizes the event list for a scene: one event per audible box, plus
/// optional ambient events for rejection-class boxes.
pub fn synth_scene_events(
    scene: &Scene,
    taxonomy: &ClassTaxonomy,
    config: &AudioSynthConfig,
    master_seed: u64,
) -> Result<Vec<AudioEvent>> {
    let mut rng = stream_rng(master_seed, Stream::AudioSynth(scene.id));
    let mut events = Vec::new();
    for gt in &scene.gt_boxes {
        if taxonomy.is_audible(gt.class_id) || config.ambient_nothing_events {
            events.push(synth_event_for_box(
                &gt.bbox,
                gt.class_id,
                scene,
                config,
                taxonomy.len(),
                &mut rng,
            )?);
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneGenConfig};
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn peak_stays_inside_class_interval() {
        let table = PeakIntervalTable::rail();
        let mut r = rng(1);
        for _ in 0..1000 {
            let g = sample_peak(ClassTaxonomy::NOTHING, &table, &mut r);
            assert!((0.0..=0.2).contains(&g));
            let g = sample_peak(ClassTaxonomy::RUPTURE, &table, &mut r);
            assert!((0.8..=1.0).contains(&g));
        }
    }

    #[test]
    fn peak_mean_converges_to_interval_midpoint() {
        let table = PeakIntervalTable::rail();
        let mut r = rng(2);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample_peak(ClassTaxonomy::RUPTURE, &table, &mut r))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn probability_vectors_are_dominated_simplex_points() {
        let mut r = rng(3);
        for i in 0..10_000 {
            let chosen = i % 3;
            let p = sample_probs(chosen, 3, &mut r);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            assert!(p[chosen] >= 0.7);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert_eq!(argmax(&p), chosen);
        }
    }

    #[test]
    fn event_window_matches_row_arithmetic() {
        // Box spanning feature rows 5..=7 of a 20-row grid over 1 s:
        // rows cover [0.20, 0.35].
        let tax = ClassTaxonomy::rail();
        let mut cfg = SceneGenConfig::default();
        cfg.boxes_per_scene = (0, 0);
        let scene = generate_scene(&cfg, &tax, 1, 0).unwrap();
        // 200 px image, 20 rows -> 10 px per row; rows 5..=7 are y in [40, 70).
        let bbox = BoundingBox::new(20.0, 40.0, 60.0, 70.0).unwrap();
        let audio_cfg = AudioSynthConfig::default();
        let ev = synth_event_for_box(&bbox, 0, &scene, &audio_cfg, 3, &mut rng(4)).unwrap();
        assert!((ev.t_start - 0.20).abs() < 1e-12);
        assert!((ev.t_end - 0.35).abs() < 1e-12);
    }

    #[test]
    fn nothing_events_have_low_peaks() {
        let tax = ClassTaxonomy::rail();
        let mut cfg = SceneGenConfig::default();
        cfg.boxes_per_scene = (0, 0);
        let scene = generate_scene(&cfg, &tax, 1, 0).unwrap();
        let bbox = BoundingBox::new(20.0, 40.0, 60.0, 70.0).unwrap();
        let audio_cfg = AudioSynthConfig::default();
        for s in 0..50 {
            let ev = synth_event_for_box(
                &bbox,
                ClassTaxonomy::NOTHING,
                &scene,
                &audio_cfg,
                3,
                &mut rng(s),
            )
            .unwrap();
            assert!(ev.peak <= 0.2);
        }
    }

    #[test]
    fn windows_clamp_to_capture_duration() {
        let tax = ClassTaxonomy::rail();
        let mut cfg = SceneGenConfig::default();
        cfg.boxes_per_scene = (0, 0);
        let scene = generate_scene(&cfg, &tax, 1, 0).unwrap();
        // Bottom rows: span would be [0.9, 1.0]; a +0.2 s shift must clamp.
        let bbox = BoundingBox::new(0.0, 180.0, 50.0, 200.0).unwrap();
        let audio_cfg = AudioSynthConfig {
            jitter: WindowJitter { shift: 0.2, dilate: 0.0 },
            ..Default::default()
        };
        for s in 0..100 {
            match synth_event_for_box(&bbox, 0, &scene, &audio_cfg, 3, &mut rng(s)) {
                Ok(ev) => assert!(ev.t_end <= scene.duration && ev.t_start >= 0.0),
                // the whole window may get pushed past T and collapse
                Err(Error::InvalidWindow(_)) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn one_event_per_audible_box() {
        let tax = ClassTaxonomy::rail();
        let cfg = SceneGenConfig::default();
        let audio_cfg = AudioSynthConfig::default();
        let mut audible = 0usize;
        let mut events = 0usize;
        for id in 0..1000 {
            let scene = generate_scene(&cfg, &tax, 11, id).unwrap();
            audible += scene
                .gt_boxes
                .iter()
                .filter(|g| tax.is_audible(g.class_id))
                .count();
            events += synth_scene_events(&scene, &tax, &audio_cfg, 11).unwrap().len();
        }
        assert_eq!(audible, events);
    }

    #[test]
    fn empty_scene_has_no_events() {
        let tax = ClassTaxonomy::rail();
        let mut cfg = SceneGenConfig::default();
        cfg.boxes_per_scene = (0, 0);
        let scene = generate_scene(&cfg, &tax, 1, 0).unwrap();
        let events =
            synth_scene_events(&scene, &tax, &AudioSynthConfig::default(), 1).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn events_validate() {
        let tax = ClassTaxonomy::rail();
        let cfg = SceneGenConfig::default();
        let audio_cfg = AudioSynthConfig::default();
        for id in 0..50 {
            let scene = generate_scene(&cfg, &tax, 21, id).unwrap();
            for ev in synth_scene_events(&scene, &tax, &audio_cfg, 21).unwrap() {
                ev.validate(scene.duration, tax.len()).unwrap();
            }
        }
    }
}
