//! Dataset persistence.
//!
//! A dataset directory holds `manifest.json` plus one binary tensor file per
//! scene. The tensor format ("FWT1") is: the 4 magic bytes `FWT1`, a u32
//! little-endian rank, `rank` u32 little-endian extents, then the row-major
//! payload as IEEE-754 little-endian f32. Round-trips are byte-exact because
//! scene tensors are quantized to f32 at generation time.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioEvent;
use crate::error::{Error, Result};
use crate::scene::{BoundingBox, ClassTaxonomy, GroundTruthBox, LayerConfig, Scene};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FWT1";

/// Writes a tensor in FWT1 format.
pub fn write_fwt<W: Write>(mut w: W, tensor: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    let rank = tensor.shape().len() as u32;
    w.write_all(&rank.to_le_bytes())?;
    for &e in tensor.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a tensor in FWT1 format.
pub fn read_fwt<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::DatasetFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4, "rank")?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::DatasetFormat(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        read_exact(&mut r, &mut buf4, "extent")?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let numel: usize = shape.iter().product();
    if numel == 0 || numel > (1 << 28) {
        return Err(Error::DatasetFormat(format!("implausible shape {shape:?}")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        read_exact(&mut r, &mut buf4, "payload")?;
        data.push(f32::from_le_bytes(buf4) as f64);
    }
    Tensor::from_vec(shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::DatasetFormat(format!("truncated while reading {what}: {e}")))
}

pub fn write_fwt_file(path: &Path, tensor: &Tensor) -> Result<()> {
    write_fwt(BufWriter::new(File::create(path)?), tensor)
}

pub fn read_fwt_file(path: &Path) -> Result<Tensor> {
    read_fwt(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoxRecord {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EventRecord {
    t_start: f64,
    t_end: f64,
    probs: Vec<f64>,
    peak: f64,
    predicted_class: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    id: u64,
    image_width: f64,
    image_height: f64,
    tensor_file: String,
    boxes: Vec<BoxRecord>,
    events: Vec<EventRecord>,
}

/// `manifest.json` schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub taxonomy: Vec<String>,
    pub layer: LayerConfig,
    pub duration: f64,
    /// Free-form provenance: generator config and master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    scenes: Vec<SceneRecord>,
}

/// Incremental dataset writer: scenes stream to disk one at a time so the
/// full corpus never has to be resident.
pub struct DatasetWriter {
    dir: PathBuf,
    taxonomy: ClassTaxonomy,
    layer: Option<LayerConfig>,
    duration: Option<f64>,
    provenance: Option<serde_json::Value>,
    scenes: Vec<SceneRecord>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, taxonomy: ClassTaxonomy) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            taxonomy,
            layer: None,
            duration: None,
            provenance: None,
            scenes: Vec::new(),
        })
    }

    pub fn set_provenance(&mut self, value: serde_json::Value) {
        self.provenance = Some(value);
    }

    pub fn add_scene(&mut self, scene: &Scene) -> Result<()> {
        scene.validate(&self.taxonomy)?;
        match (self.layer, self.duration) {
            (None, None) => {
                self.layer = Some(scene.layer);
                self.duration = Some(scene.duration);
            }
            (Some(layer), Some(duration)) => {
                if layer != scene.layer || duration != scene.duration {
                    return Err(Error::DatasetFormat(
                        "all scenes in a dataset must share layer config and duration".into(),
                    ));
                }
            }
            _ => unreachable!(),
        }
        let tensor_file = format!("scene_{:06}.fwt", scene.id);
        write_fwt_file(&self.dir.join(&tensor_file), &scene.features)?;
        self.scenes.push(SceneRecord {
            id: scene.id,
            image_width: scene.image_width,
            image_height: scene.image_height,
            tensor_file,
            boxes: scene
                .gt_boxes
                .iter()
                .map(|g| BoxRecord {
                    x_min: g.bbox.x_min,
                    y_min: g.bbox.y_min,
                    x_max: g.bbox.x_max,
                    y_max: g.bbox.y_max,
                    class: self.taxonomy.name(g.class_id).to_string(),
                })
                .collect(),
            events: scene
                .events
                .iter()
                .map(|e| EventRecord {
                    t_start: e.t_start,
                    t_end: e.t_end,
                    probs: e.probs.clone(),
                    peak: e.peak,
                    predicted_class: self.taxonomy.name(e.predicted_class).to_string(),
                })
                .collect(),
        });
        Ok(())
    }

    /// Writes `manifest.json` and finishes the dataset.
    pub fn finish(self) -> Result<()> {
        let manifest = Manifest {
            format: "fusway-dataset".to_string(),
            version: 1,
            taxonomy: self.taxonomy.names().to_vec(),
            layer: self
                .layer
                .ok_or_else(|| Error::DatasetFormat("dataset has no scenes".into()))?,
            duration: self.duration.unwrap(),
            provenance: self.provenance,
            scenes: self.scenes,
        };
        let file = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(file, &manifest)?;
        Ok(())
    }
}

/// Saves a complete in-memory dataset.
pub fn save_dataset(scenes: &[Scene], taxonomy: &ClassTaxonomy, dir: &Path) -> Result<()> {
    let mut writer = DatasetWriter::create(dir, taxonomy.clone())?;
    for scene in scenes {
        writer.add_scene(scene)?;
    }
    writer.finish()
}

/// Streaming dataset reader.
pub struct DatasetReader {
    dir: PathBuf,
    pub taxonomy: ClassTaxonomy,
    pub layer: LayerConfig,
    pub duration: f64,
    records: Vec<SceneRecord>,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(dir.join("manifest.json"))?);
        let manifest: Manifest = serde_json::from_reader(file)?;
        if manifest.format != "fusway-dataset" || manifest.version != 1 {
            return Err(Error::DatasetFormat(format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            taxonomy: ClassTaxonomy::from_names(manifest.taxonomy)?,
            layer: manifest.layer,
            duration: manifest.duration,
            records: manifest.scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_scene(&self, index: usize) -> Result<Scene> {
        let rec = &self.records[index];
        let features = read_fwt_file(&self.dir.join(&rec.tensor_file))?;
        let mut gt_boxes = Vec::with_capacity(rec.boxes.len());
        for b in &rec.boxes {
            gt_boxes.push(GroundTruthBox {
                bbox: BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max)?,
                class_id: self.taxonomy.id_of(&b.class)?,
            });
        }
        let mut events = Vec::with_capacity(rec.events.len());
        for e in &rec.events {
            events.push(AudioEvent {
                t_start: e.t_start,
                t_end: e.t_end,
                probs: e.probs.clone(),
                peak: e.peak,
                predicted_class: self.taxonomy.id_of(&e.predicted_class)?,
            });
        }
        let scene = Scene {
            id: rec.id,
            image_width: rec.image_width,
            image_height: rec.image_height,
            layer: self.layer,
            features,
            gt_boxes,
            events,
            duration: self.duration,
        };
        scene.validate(&self.taxonomy)?;
        Ok(scene)
    }
}

/// Loads a full dataset into memory.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, ClassTaxonomy)> {
    let reader = DatasetReader::open(dir)?;
    let mut scenes = Vec::with_capacity(reader.len());
    for i in 0..reader.len() {
        scenes.push(reader.load_scene(i)?);
    }
    Ok((scenes, reader.taxonomy.clone()))
}
