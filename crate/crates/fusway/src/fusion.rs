//! Upstream fusion: combining image features, audio events, and detection
//! masks into the classifier's input tensor.
//!
//! The stages, in order:
//!
//! 1. squeeze the raw `C x H x W` features to one `H x W` map (channel mean),
//! 2. normalize the map to `[0, 1]` and repeat it K times -> `F`,
//! 3. quantize each audio event window onto feature rows and spread its
//!    weighted peak vector over those rows -> `V`,
//! 4. rasterize the detection box onto the feature grid -> mask `M`,
//! 5. fuse: `mF = F (*) (1 + V) (*) M`, elementwise.
//!
//! Index convention, used everywhere: `i` is the row (height/time axis),
//! `j` the column (width). Class slices come first in memory: `[K, H, W]`.

use crate::audio::AudioEvent;
use crate::error::{Error, Result};
use crate::scene::BoundingBox;
use crate::tensor::Tensor;

/// `K x H x W` tensor of per-class feature maps; carrier for `F`, `V`, `M`,
/// and the fused `mF`. Values are role-dependent: `F` and `V` live in
/// `[0, 1]`, masks in `{0, 1}`, fused tensors in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureTensor {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ClassFeatureTensor {
    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![0.0; classes * height * width],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.data[(k * self.height + i) * self.width + j] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.classes == other.classes
            && self.height == other.height
            && self.width == other.width
    }

    /// View as a rank-3 [`Tensor`] (for binary dumps or the classifier).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.classes, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent by construction")
    }
}

/// Contiguous 1-based feature-row range hit by an event window, with the
/// event's weighted peak vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBand {
    /// First row, 1-based, inclusive.
    pub row_start: usize,
    /// Last row, 1-based, inclusive.
    pub row_end: usize,
    /// `peak * probs`, length K, entries in `[0, 1]`.
    pub weighted_peak: Vec<f64>,
}

/// Channel mean: `C x H x W` -> `H x W`.
pub fn squeeze_features(raw: &Tensor) -> Result<Tensor> {
    let shape = raw.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected rank-3 [C, H, W] features, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(vec![h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.data_mut()[i * w + j] += raw.at3(ch, i, j);
            }
        }
    }
    for v in out.data_mut() {
        *v /= c as f64;
    }
    Ok(out)
}

/// Min-max normalization to `[0, 1]`. A constant map normalizes to all
/// zeros: a featureless map carries no signal, and dividing by zero is the
/// alternative.
pub fn normalize01(map: &Tensor) -> Tensor {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = map.clone();
    if hi - lo <= 0.0 {
        for v in out.data_mut() {
            *v = 0.0;
        }
        return out;
    }
    let span = hi - lo;
    for v in out.data_mut() {
        // direct division so the extremes land exactly on 0 and 1
        *v = (*v - lo) / span;
    }
    out
}

/// Stacks K identical copies of an `H x W` map into the class tensor `F`.
pub fn repeat_k(map: &Tensor, k: usize) -> Result<ClassFeatureTensor> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected rank-2 [H, W] map, got {shape:?}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = ClassFeatureTensor::zeros(k, h, w);
    for slice in 0..k {
        out.data[slice * h * w..(slice + 1) * h * w].copy_from_slice(map.data());
    }
    Ok(out)
}

/// Maps a time window onto 1-based feature rows.
///
/// With `dt = duration / grid_height`, the row of an instant `t` is
/// `floor(t / dt) + 1`; the window's rows are everything hit by
/// `[t_start, t_end]`, clamped to `1..=grid_height` (so `t = duration`
/// lands on the last row rather than one past it).
pub fn quantize_window(
    t_start: f64,
    t_end: f64,
    duration: f64,
    grid_height: usize,
) -> Result<(usize, usize)> {
    if !(0.0 <= t_start && t_start < t_end && t_end <= duration) {
        return Err(Error::InvalidWindow(format!(
            "[{t_start}, {t_end}] is not a window inside [0, {duration}]"
        )));
    }
    let dt = duration / grid_height as f64;
    let first = ((t_start / dt).floor() as i64 + 1).clamp(1, grid_height as i64) as usize;
    let last = ((t_end / dt).floor() as i64 + 1).clamp(1, grid_height as i64) as usize;
    Ok((first, last))
}

/// `peak * probs`, elementwise.
pub fn weighted_peak(peak: f64, probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| peak * p).collect()
}

/// Builds the audio tensor `V`: each event writes its weighted peak vector
/// across all columns of its row band, per class slice; overlapping events
/// combine by elementwise maximum, which keeps `V <= 1`.
pub fn build_audio_tensor(
    events: &[AudioEvent],
    k: usize,
    width: usize,
    height: usize,
    duration: f64,
) -> Result<ClassFeatureTensor> {
    let mut v = ClassFeatureTensor::zeros(k, height, width);
    for ev in events {
        if ev.probs.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "event probability vector length {} != K={k}",
                ev.probs.len()
            )));
        }
        let (first, last) = quantize_window(ev.t_start, ev.t_end, duration, height)?;
        let gp = weighted_peak(ev.peak, &ev.probs);
        for (slice, &g) in gp.iter().enumerate() {
            for row in first..=last {
                let i = row - 1;
                for j in 0..width {
                    let cur = v.at(slice, i, j);
                    if g > cur {
                        v.set(slice, i, j, g);
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Rasterizes a detection box onto the feature grid.
///
/// The box is scaled by `(grid_w / image_w, grid_h / image_h)`; a cell is
/// set iff its center lies inside the scaled box. A box too small to cover
/// any center falls back to the cell nearest its own center, so the mask is
/// never empty. All K slices are identical.
pub fn build_mask(
    bbox: &BoundingBox,
    image_width: f64,
    image_height: f64,
    k: usize,
    grid_width: usize,
    grid_height: usize,
) -> Result<ClassFeatureTensor> {
    if bbox.area() <= 0.0 {
        return Err(Error::InvalidBox("zero-area box cannot be rasterized".into()));
    }
    let sx = grid_width as f64 / image_width;
    let sy = grid_height as f64 / image_height;
    let (x0, x1) = (bbox.x_min * sx, bbox.x_max * sx);
    let (y0, y1) = (bbox.y_min * sy, bbox.y_max * sy);

    let mut mask = ClassFeatureTensor::zeros(k, grid_height, grid_width);
    let mut any = false;
    for i in 0..grid_height {
        let cy = i as f64 + 0.5;
        for j in 0..grid_width {
            let cx = j as f64 + 0.5;
            if cx >= x0 && cx < x1 && cy >= y0 && cy < y1 {
                for slice in 0..k {
                    mask.set(slice, i, j, 1.0);
                }
                any = true;
            }
        }
    }
    if !any {
        let cx = 0.5 * (x0 + x1);
        let cy = 0.5 * (y0 + y1);
        let j = (cx.floor() as i64).clamp(0, grid_width as i64 - 1) as usize;
        let i = (cy.floor() as i64).clamp(0, grid_height as i64 - 1) as usize;
        for slice in 0..k {
            mask.set(slice, i, j, 1.0);
        }
    }
    Ok(mask)
}

/// The fusion product: `mF = F (*) (1 + V) (*) M`, elementwise.
pub fn fuse(
    f: &ClassFeatureTensor,
    v: &ClassFeatureTensor,
    m: &ClassFeatureTensor,
) -> Result<ClassFeatureTensor> {
    if !f.same_shape(v) || !f.same_shape(m) {
        return Err(Error::ShapeMismatch(format!(
            "F {}x{}x{}, V {}x{}x{}, M {}x{}x{}",
            f.classes, f.height, f.width, v.classes, v.height, v.width, m.classes, m.height,
            m.width
        )));
    }
    let mut out = ClassFeatureTensor::zeros(f.classes, f.height, f.width);
    for (o, ((fv, vv), mv)) in out
        .data
        .iter_mut()
        .zip(f.data.iter().zip(&v.data).zip(&m.data))
    {
        *o = fv * (1.0 + vv) * mv;
    }
    Ok(out)
}
