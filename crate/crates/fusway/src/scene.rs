//! Class taxonomy, scene geometry, and synthetic scene generation.
//!
//! Scenes stand in for inspection imagery: each one carries a raw feature
//! tensor (what a detector backbone layer would produce), ground-truth boxes
//! with classes, and the audio events synthesized for those boxes. The
//! vertical axis of the feature map is the time axis of the capture window:
//! a box spanning feature rows `r0..=r1` happened during
//! `[(r0-1)*dt, r1*dt]` with `dt = duration / grid_height`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioEvent;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Index into the taxonomy's class list.
pub type ClassId = usize;

/// Ordered class names. The last class is always the rejection class that
/// absorbs background and audio-silent anomalies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    names: Vec<String>,
}

impl ClassTaxonomy {
    pub const RUPTURE: ClassId = 0;
    pub const SURFACE_DEFECT: ClassId = 1;
    pub const NOTHING: ClassId = 2;

    /// The rail taxonomy: Rupture, Surface defect, and the rejection class.
    pub fn rail() -> Self {
        Self {
            names: vec![
                "Rupture".to_string(),
                "Surface defect".to_string(),
                "Nothing".to_string(),
            ],
        }
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidConfig(
                "taxonomy needs at least one object class plus the rejection class".into(),
            ));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Result<ClassId> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// The rejection class is by convention the last entry.
    pub fn rejection_class(&self) -> ClassId {
        self.names.len() - 1
    }

    /// Classes that produce audio distinct from ambient noise: everything
    /// except the rejection class.
    pub fn is_audible(&self, id: ClassId) -> bool {
        id != self.rejection_class()
    }
}

/// Axis-aligned box in image pixel coordinates, `min` inclusive / `max`
/// exclusive, with `x` along width and `y` along height (= time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidBox(format!(
                "({x_min}, {y_min}, {x_max}, {y_max}) has non-positive extent"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

/// Intersection over union. Zero for disjoint boxes, one iff identical.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Spatial/channel dimensions of the detector layer features are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub layer_id: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl LayerConfig {
    /// Backbone layer presets: 7 and 19 give 20x20x128, 16 gives 40x40x64.
    pub fn preset(layer_id: u32) -> Result<Self> {
        match layer_id {
            7 => Ok(Self { layer_id, width: 20, height: 20, channels: 128 }),
            16 => Ok(Self { layer_id, width: 40, height: 40, channels: 64 }),
            19 => Ok(Self { layer_id, width: 20, height: 20, channels: 128 }),
            other => Err(Error::InvalidConfig(format!(
                "no preset for layer {other}; known layers are 7, 16, 19"
            ))),
        }
    }
}

/// Ground-truth object: a box plus its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

/// One capture window: feature tensor, annotations, and audio events.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub image_width: f64,
    pub image_height: f64,
    pub layer: LayerConfig,
    /// Raw features, shape `[channels, grid_height, grid_width]`.
    pub features: Tensor,
    pub gt_boxes: Vec<GroundTruthBox>,
    pub events: Vec<AudioEvent>,
    /// Capture duration in seconds.
    pub duration: f64,
}

impl Scene {
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let expect = [self.layer.channels, self.layer.height, self.layer.width];
        if self.features.shape() != expect {
            return Err(Error::ShapeMismatch(format!(
                "scene {}: feature shape {:?} != layer config {:?}",
                self.id,
                self.features.shape(),
                expect
            )));
        }
        if self.duration <= 0.0 {
            return Err(Error::InvalidConfig("scene duration must be positive".into()));
        }
        for gt in &self.gt_boxes {
            if gt.class_id >= taxonomy.len() {
                return Err(Error::UnknownClass(format!("class id {}", gt.class_id)));
            }
            if !gt.bbox.within(self.image_width, self.image_height) {
                return Err(Error::InvalidBox(format!(
                    "scene {}: box outside image bounds",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Detector output: box, class, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub confidence: f64,
}

/// Knobs for the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub layer: LayerConfig,
    pub duration: f64,
    /// Per-class probability of each generated object; normalized on use.
    pub class_mixture: Vec<f64>,
    /// Inclusive range of objects per scene.
    pub boxes_per_scene: (usize, usize),
    /// Box side length range in pixels.
    pub box_side: (f64, f64),
    /// In `[0, 1]`: how far the Rupture and Nothing visual signatures are
    /// pulled toward each other. At 1 they are identical and only audio can
    /// separate the classes.
    pub ambiguity: f64,
    /// Uniform background noise amplitude in feature space.
    pub background_level: f64,
    /// Placement attempts per box before giving up.
    pub max_placement_retries: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            image_width: 200.0,
            image_height: 200.0,
            layer: LayerConfig::preset(7).unwrap(),
            duration: 1.0,
            // Corpus proportions: 8156 : 3026 : 10990.
            class_mixture: vec![0.3679, 0.1365, 0.4957],
            boxes_per_scene: (1, 3),
            box_side: (30.0, 70.0),
            ambiguity: 0.0,
            background_level: 0.15,
            max_placement_retries: 64,
        }
    }
}

impl SceneGenConfig {
    fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        if self.class_mixture.len() != taxonomy.len() {
            return Err(Error::InvalidConfig(format!(
                "class mixture has {} entries for {} classes",
                self.class_mixture.len(),
                taxonomy.len()
            )));
        }
        if self.class_mixture.iter().any(|&p| p < 0.0)
            || self.class_mixture.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig("class mixture must be non-negative and non-zero".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::InvalidConfig("ambiguity must be in [0, 1]".into()));
        }
        if self.boxes_per_scene.0 > self.boxes_per_scene.1 {
            return Err(Error::InvalidConfig("boxes_per_scene range reversed".into()));
        }
        if self.box_side.0 <= 0.0 || self.box_side.0 > self.box_side.1 {
            return Err(Error::InvalidConfig("box_side range invalid".into()));
        }
        Ok(())
    }
}

/// Per-class rendering amplitudes. Rupture shows as a compact bright blob,
/// a surface defect as diffuse speckle, the rejection class as a faint smudge
/// barely above background. Ambiguity pulls the Rupture and Nothing
/// amplitudes toward their midpoint.
fn class_visuals(class_id: ClassId, ambiguity: f64) -> (f64, f64) {
    const RUPTURE_AMP: f64 = 0.95;
    const NOTHING_AMP: f64 = 0.25;
    let mid = 0.5 * (RUPTURE_AMP + NOTHING_AMP);
    match class_id {
        ClassTaxonomy::RUPTURE => (RUPTURE_AMP + (mid - RUPTURE_AMP) * ambiguity, 0.35),
        ClassTaxonomy::SURFACE_DEFECT => (0.55, 0.9),
        _ => (NOTHING_AMP + (mid - NOTHING_AMP) * ambiguity, 0.35),
    }
}

/// Generates one scene. Fully determined by `(config, master_seed, scene_id)`;
/// audio events are left empty here and attached by the audio synthesizer.
pub fn generate_scene(
    config: &SceneGenConfig,
    taxonomy: &ClassTaxonomy,
    master_seed: u64,
    scene_id: u64,
) -> Result<Scene> {
    config.validate(taxonomy)?;
    let mut rng = stream_rng(master_seed, Stream::SceneGen(scene_id));

    let (lo, hi) = config.boxes_per_scene;
    let n_boxes = if lo == hi { lo } else { rng.gen_range(lo..=hi) };

    let mut gt_boxes: Vec<GroundTruthBox> = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let class_id = sample_class(&config.class_mixture, &mut rng);
        let bbox = place_box(config, &gt_boxes, &mut rng)?;
        gt_boxes.push(GroundTruthBox { bbox, class_id });
    }

    let mut features = render_features(config, &gt_boxes, &mut rng);
    debug_assert!(features.is_finite());
    // Tensor values are rendered in f64 but the on-disk format is f32;
    // quantize now so in-memory and reloaded datasets are bit-identical.
    for v in features.data_mut() {
        *v = *v as f32 as f64;
    }

    Ok(Scene {
        id: scene_id,
        image_width: config.image_width,
        image_height: config.image_height,
        layer: config.layer,
        features,
        gt_boxes,
        events: Vec::new(),
        duration: config.duration,
    })
}

fn sample_class(mixture: &[f64], rng: &mut ChaCha8Rng) -> ClassId {
    let total: f64 = mixture.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &p) in mixture.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    mixture.len() - 1
}

/// Uniform placement with bounded retries; new boxes may not overlap an
/// existing one by more than IoU 0.3 so objects stay distinguishable.
fn place_box(
    config: &SceneGenConfig,
    placed: &[GroundTruthBox],
    rng: &mut ChaCha8Rng,
) -> Result<BoundingBox> {
    const MAX_OVERLAP: f64 = 0.3;
    for _ in 0..config.max_placement_retries {
        let w = rng.gen_range(config.box_side.0..=config.box_side.1);
        let h = rng.gen_range(config.box_side.0..=config.box_side.1);
        if w >= config.image_width || h >= config.image_height {
            continue;
        }
        let x = rng.gen_range(0.0..(config.image_width - w));
        let y = rng.gen_range(0.0..(config.image_height - h));
        let candidate = BoundingBox::new(x, y, x + w, y + h)?;
        if placed.iter().all(|g| iou(&g.bbox, &candidate) <= MAX_OVERLAP) {
            return Ok(candidate);
        }
    }
    Err(Error::PlacementFailed(config.max_placement_retries))
}

/// Renders class-dependent patterns into the raw feature tensor.
fn render_features(
    config: &SceneGenConfig,
    gt_boxes: &[GroundTruthBox],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (c, h, w) = (config.layer.channels, config.layer.height, config.layer.width);
    let mut t = Tensor::zeros(vec![c, h, w]);

    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                t.set3(ch, r, col, rng.gen_range(0.0..config.background_level));
            }
        }
    }

    let cell_w = config.image_width / w as f64;
    let cell_h = config.image_height / h as f64;

    for gt in gt_boxes {
        let (amp, spread) = class_visuals(gt.class_id, config.ambiguity);
        let (cx, cy) = gt.bbox.center();
        let sigma_x = (gt.bbox.width() * spread / 2.0).max(cell_w * 0.5);
        let sigma_y = (gt.bbox.height() * spread / 2.0).max(cell_h * 0.5);
        let speckle = gt.class_id == ClassTaxonomy::SURFACE_DEFECT;

        // Channels respond with random gains so the channel mean stays
        // near `amp` while individual channels vary.
        for ch in 0..c {
            let gain = rng.gen_range(0.6..1.4);
            for r in 0..h {
                let py = (r as f64 + 0.5) * cell_h;
                for col in 0..w {
                    let px = (col as f64 + 0.5) * cell_w;
                    let inside = px >= gt.bbox.x_min
                        && px < gt.bbox.x_max
                        && py >= gt.bbox.y_min
                        && py < gt.bbox.y_max;
                    if !inside {
                        continue;
                    }
                    let dx = (px - cx) / sigma_x;
                    let dy = (py - cy) / sigma_y;
                    let mut v = amp * gain * (-0.5 * (dx * dx + dy * dy)).exp();
                    if speckle {
                        // diffuse texture instead of a single bump
                        v = amp * gain * rng.gen_range(0.3..1.0);
                    }
                    let cur = t.at3(ch, r, col);
                    t.set3(ch, r, col, cur.max(v));
                }
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneGenConfig {
        SceneGenConfig::default()
    }

    #[test]
    fn iou_identical_disjoint_and_partial() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        let c = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &c), 0.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bounding_box_rejects_degenerate_extents() {
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, 10.0, 10.0, 5.0).is_err());
    }

    #[test]
    fn layer_presets_match_backbone_dimensions() {
        let l7 = LayerConfig::preset(7).unwrap();
        assert_eq!((l7.width, l7.height, l7.channels), (20, 20, 128));
        let l16 = LayerConfig::preset(16).unwrap();
        assert_eq!((l16.width, l16.height, l16.channels), (40, 40, 64));
        let l19 = LayerConfig::preset(19).unwrap();
        assert_eq!((l19.width, l19.height, l19.channels), (20, 20, 128));
        assert!(LayerConfig::preset(8).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let tax = ClassTaxonomy::rail();
        let a = generate_scene(&cfg(), &tax, 99, 5).unwrap();
        let b = generate_scene(&cfg(), &tax, 99, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg(), &tax, 99, 6).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn zero_boxes_gives_empty_ground_truth() {
        let tax = ClassTaxonomy::rail();
        let mut c = cfg();
        c.boxes_per_scene = (0, 0);
        let s = generate_scene(&c, &tax, 1, 0).unwrap();
        assert!(s.gt_boxes.is_empty());
        s.validate(&tax).unwrap();
    }

    #[test]
    fn class_mixture_proportions_hold_over_many_scenes() {
        let tax = ClassTaxonomy::rail();
        let mut c = cfg();
        c.class_mixture = vec![0.4, 0.15, 0.45];
        c.boxes_per_scene = (1, 3);
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for id in 0..1000 {
            let s = generate_scene(&c, &tax, 7, id).unwrap();
            for gt in &s.gt_boxes {
                counts[gt.class_id] += 1;
                total += 1;
            }
        }
        for (i, &want) in [0.4, 0.15, 0.45].iter().enumerate() {
            let got = counts[i] as f64 / total as f64;
            assert!(
                (got - want).abs() <= 0.03,
                "class {i}: {got:.3} vs {want} over {total} boxes"
            );
        }
    }

    #[test]
    fn impossible_placement_errors_after_retries() {
        let tax = ClassTaxonomy::rail();
        let mut c = cfg();
        // Boxes the size of the whole image cannot avoid overlapping.
        c.box_side = (190.0, 199.0);
        c.boxes_per_scene = (4, 4);
        c.max_placement_retries = 8;
        let err = generate_scene(&c, &tax, 1, 0).unwrap_err();
        assert!(matches!(err, Error::PlacementFailed(8)));
    }

    #[test]
    fn scenes_validate_against_taxonomy() {
        let tax = ClassTaxonomy::rail();
        let s = generate_scene(&cfg(), &tax, 3, 0).unwrap();
        s.validate(&tax).unwrap();
        assert!(s.features.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ambiguity_pulls_rupture_and_nothing_together() {
        let (r0, _) = class_visuals(ClassTaxonomy::RUPTURE, 0.0);
        let (n0, _) = class_visuals(ClassTaxonomy::NOTHING, 0.0);
        let (r1, _) = class_visuals(ClassTaxonomy::RUPTURE, 1.0);
        let (n1, _) = class_visuals(ClassTaxonomy::NOTHING, 1.0);
        assert!((r0 - n0).abs() > 0.5);
        assert!((r1 - n1).abs() < 1e-12);
    }
}
