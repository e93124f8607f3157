//! Small Vision Transformer over fused class-feature tensors.
//!
//! The `K x H x W` fused tensor is cut into non-overlapping `p x p` patches
//! (channel-major flattening), linearly embedded, prefixed with a class
//! token, and run through a pre-norm transformer encoder. The head reads the
//! class token and emits K logits. Training is plain cross-entropy with
//! Adam, an epoch cap, and early stopping on stagnant validation accuracy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, NodeId, Tape};
use crate::error::{Error, Result};
use crate::fusion::ClassFeatureTensor;
use crate::rng::{stream_rng, Stream};
use crate::scene::ClassId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Early stopping: epochs without a validation-accuracy improvement.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            num_heads: 4,
            embed_dim: 64,
            depth: 4,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            learning_rate: 1e-6,
            max_epochs: 100,
            patience: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self, classes: usize, height: usize, width: usize) -> Result<()> {
        if height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "grid {height}x{width} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if classes < 2 || self.depth == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("classes >= 2, depth >= 1, lr > 0".into()));
        }
        Ok(())
    }

    pub fn tokens(&self, height: usize, width: usize) -> usize {
        (height / self.patch_size) * (width / self.patch_size)
    }

    pub fn patch_dim(&self, classes: usize) -> usize {
        classes * self.patch_size * self.patch_size
    }
}

/// Cuts `K x H x W` into row-major patch tokens, each a channel-major
/// flattened `K * p * p` vector.
pub fn patchify(t: &ClassFeatureTensor, patch: usize) -> Result<Tensor> {
    if t.height % patch != 0 || t.width % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} grid not divisible by patch {patch}",
            t.height, t.width
        )));
    }
    let (ph, pw) = (t.height / patch, t.width / patch);
    let dim = t.classes * patch * patch;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for pi in 0..ph {
        for pj in 0..pw {
            for k in 0..t.classes {
                for di in 0..patch {
                    for dj in 0..patch {
                        data.push(t.at(k, pi * patch + di, pj * patch + dj));
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![ph * pw, dim], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Tensor,
    classes: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ClassFeatureTensor> {
    let (ph, pw) = (height / patch, width / patch);
    let dim = classes * patch * patch;
    if tokens.shape() != [ph * pw, dim] {
        return Err(Error::ShapeMismatch(format!(
            "tokens {:?} do not match {}x{}x{} / patch {patch}",
            tokens.shape(),
            classes,
            height,
            width
        )));
    }
    let mut out = ClassFeatureTensor::zeros(classes, height, width);
    let mut cursor = tokens.data().iter();
    for pi in 0..ph {
        for pj in 0..pw {
            for k in 0..classes {
                for di in 0..patch {
                    for dj in 0..patch {
                        out.set(k, pi * patch + di, pj * patch + dj, *cursor.next().unwrap());
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    /// Per-head projection matrices `[embed, head_dim]`.
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Tensor,
    bo: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Transformer classifier with its configuration and parameters.
#[derive(Debug, Clone)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    patch_w: Tensor,
    patch_b: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<BlockParams>,
    ln_f_gain: Tensor,
    ln_f_bias: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

fn init(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap().with_grad()
}

impl ViTModel {
    /// Fresh model; parameters are drawn from the config seed, so equal
    /// configs give bit-identical models.
    pub fn new(config: ViTConfig, classes: usize, grid_height: usize, grid_width: usize) -> Result<Self> {
        config.validate(classes, grid_height, grid_width)?;
        let mut rng = stream_rng(config.seed, Stream::ModelInit(0));
        let d = config.embed_dim;
        let pd = config.patch_dim(classes);
        let tokens = config.tokens(grid_height, grid_width);
        let head_dim = d / config.num_heads;
        let hidden = d * config.mlp_ratio;

        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();

        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(vec![d], 1.0).with_grad(),
                ln1_bias: Tensor::zeros(vec![d]).with_grad(),
                wq: (0..config.num_heads)
                    .map(|_| init(vec![d, head_dim], xavier(d, head_dim), &mut rng))
                    .collect(),
                wk: (0..config.num_heads)
                    .map(|_| init(vec![d, head_dim], xavier(d, head_dim), &mut rng))
                    .collect(),
                wv: (0..config.num_heads)
                    .map(|_| init(vec![d, head_dim], xavier(d, head_dim), &mut rng))
                    .collect(),
                wo: init(vec![d, d], xavier(d, d), &mut rng),
                bo: Tensor::zeros(vec![d]).with_grad(),
                ln2_gain: Tensor::full(vec![d], 1.0).with_grad(),
                ln2_bias: Tensor::zeros(vec![d]).with_grad(),
                w1: init(vec![d, hidden], xavier(d, hidden), &mut rng),
                b1: Tensor::zeros(vec![hidden]).with_grad(),
                w2: init(vec![hidden, d], xavier(hidden, d), &mut rng),
                b2: Tensor::zeros(vec![d]).with_grad(),
            })
            .collect();

        Ok(Self {
            config,
            classes,
            grid_height,
            grid_width,
            patch_w: init(vec![pd, d], xavier(pd, d), &mut rng),
            patch_b: Tensor::zeros(vec![d]).with_grad(),
            cls_token: init(vec![1, d], 0.02, &mut rng),
            pos_embed: init(vec![tokens + 1, d], 0.02, &mut rng),
            blocks,
            ln_f_gain: Tensor::full(vec![d], 1.0).with_grad(),
            ln_f_bias: Tensor::zeros(vec![d]).with_grad(),
            head_w: init(vec![d, classes], xavier(d, classes), &mut rng),
            head_b: Tensor::zeros(vec![classes]).with_grad(),
        })
    }

    /// Token count including the class token.
    pub fn token_count(&self) -> usize {
        self.config.tokens(self.grid_height, self.grid_width) + 1
    }

    /// Parameters in a fixed, named order (checkpoint and optimizer order).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1_gain"), &b.ln1_gain));
            out.push((format!("block{i}.ln1_bias"), &b.ln1_bias));
            for (h, w) in b.wq.iter().enumerate() {
                out.push((format!("block{i}.head{h}.wq"), w));
            }
            for (h, w) in b.wk.iter().enumerate() {
                out.push((format!("block{i}.head{h}.wk"), w));
            }
            for (h, w) in b.wv.iter().enumerate() {
                out.push((format!("block{i}.head{h}.wv"), w));
            }
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.bo"), &b.bo));
            out.push((format!("block{i}.ln2_gain"), &b.ln2_gain));
            out.push((format!("block{i}.ln2_bias"), &b.ln2_bias));
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.b1"), &b.b1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.b2"), &b.b2));
        }
        out.push(("ln_f_gain".into(), &self.ln_f_gain));
        out.push(("ln_f_bias".into(), &self.ln_f_bias));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            for w in &mut b.wq {
                out.push(w);
            }
            for w in &mut b.wk {
                out.push(w);
            }
            for w in &mut b.wv {
                out.push(w);
            }
            out.push(&mut b.wo);
            out.push(&mut b.bo);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Builds the full forward pass on a tape; returns the `[1, K]` logits
    /// node and every parameter node in `named_params` order.
    fn forward_on_tape(&self, tape: &mut Tape, input: &ClassFeatureTensor) -> Result<(NodeId, Vec<NodeId>)> {
        if input.classes != self.classes
            || input.height != self.grid_height
            || input.width != self.grid_width
        {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{}x{} vs model {}x{}x{}",
                input.classes,
                input.height,
                input.width,
                self.classes,
                self.grid_height,
                self.grid_width
            )));
        }
        let cfg = &self.config;
        let mut param_ids = Vec::new();
        let leaf = |tape: &mut Tape, t: &Tensor, ids: &mut Vec<NodeId>| {
            let id = tape.leaf(t);
            ids.push(id);
            id
        };

        let patch_w = leaf(tape, &self.patch_w, &mut param_ids);
        let patch_b = leaf(tape, &self.patch_b, &mut param_ids);
        let cls_token = leaf(tape, &self.cls_token, &mut param_ids);
        let pos_embed = leaf(tape, &self.pos_embed, &mut param_ids);

        struct BlockIds {
            ln1_gain: NodeId,
            ln1_bias: NodeId,
            wq: Vec<NodeId>,
            wk: Vec<NodeId>,
            wv: Vec<NodeId>,
            wo: NodeId,
            bo: NodeId,
            ln2_gain: NodeId,
            ln2_bias: NodeId,
            w1: NodeId,
            b1: NodeId,
            w2: NodeId,
            b2: NodeId,
        }
        let mut block_ids = Vec::new();
        for b in &self.blocks {
            block_ids.push(BlockIds {
                ln1_gain: leaf(tape, &b.ln1_gain, &mut param_ids),
                ln1_bias: leaf(tape, &b.ln1_bias, &mut param_ids),
                wq: b.wq.iter().map(|w| leaf(tape, w, &mut param_ids)).collect(),
                wk: b.wk.iter().map(|w| leaf(tape, w, &mut param_ids)).collect(),
                wv: b.wv.iter().map(|w| leaf(tape, w, &mut param_ids)).collect(),
                wo: leaf(tape, &b.wo, &mut param_ids),
                bo: leaf(tape, &b.bo, &mut param_ids),
                ln2_gain: leaf(tape, &b.ln2_gain, &mut param_ids),
                ln2_bias: leaf(tape, &b.ln2_bias, &mut param_ids),
                w1: leaf(tape, &b.w1, &mut param_ids),
                b1: leaf(tape, &b.b1, &mut param_ids),
                w2: leaf(tape, &b.w2, &mut param_ids),
                b2: leaf(tape, &b.b2, &mut param_ids),
            });
        }
        let ln_f_gain = leaf(tape, &self.ln_f_gain, &mut param_ids);
        let ln_f_bias = leaf(tape, &self.ln_f_bias, &mut param_ids);
        let head_w = leaf(tape, &self.head_w, &mut param_ids);
        let head_b = leaf(tape, &self.head_b, &mut param_ids);

        // tokens -> embeddings -> [cls; tokens] + positions
        let patches = patchify(input, cfg.patch_size)?;
        let tokens_in = tape.constant(patches.shape().to_vec(), patches.data().to_vec());
        let embedded = tape.matmul(tokens_in, patch_w);
        let embedded = tape.add_row_bias(embedded, patch_b);
        let seq = tape.concat_rows(&[cls_token, embedded]);
        let mut x = tape.add(seq, pos_embed);

        let head_dim = cfg.embed_dim / cfg.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        const EPS: f64 = 1e-6;

        for ids in &block_ids {
            // attention sublayer (pre-norm)
            let normed = tape.layer_norm(x, ids.ln1_gain, ids.ln1_bias, EPS);
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let q = tape.matmul(normed, ids.wq[h]);
                let k = tape.matmul(normed, ids.wk[h]);
                let v = tape.matmul(normed, ids.wv[h]);
                let kt = tape.transpose(k);
                let scores = tape.matmul(q, kt);
                let scaled = tape.scale(scores, scale);
                let attn = tape.softmax(scaled, 1);
                heads.push(tape.matmul(attn, v));
            }
            let merged = tape.concat_cols(&heads);
            let projected = tape.matmul(merged, ids.wo);
            let projected = tape.add_row_bias(projected, ids.bo);
            x = tape.add(x, projected);

            // MLP sublayer (pre-norm)
            let normed = tape.layer_norm(x, ids.ln2_gain, ids.ln2_bias, EPS);
            let h1 = tape.matmul(normed, ids.w1);
            let h1 = tape.add_row_bias(h1, ids.b1);
            let act = match cfg.activation {
                Activation::Gelu => tape.gelu(h1),
                Activation::Relu => tape.relu(h1),
            };
            let h2 = tape.matmul(act, ids.w2);
            let h2 = tape.add_row_bias(h2, ids.b2);
            x = tape.add(x, h2);
        }

        let normed = tape.layer_norm(x, ln_f_gain, ln_f_bias, EPS);
        let cls = tape.select_row(normed, 0);
        let logits = tape.matmul(cls, head_w);
        let logits = tape.add_row_bias(logits, head_b);
        Ok((logits, param_ids))
    }

    /// Runs the model on one fused tensor; returns logits and softmax
    /// probabilities.
    pub fn forward(&self, input: &ClassFeatureTensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward_on_tape(&mut tape, input)?;
        let probs = tape.softmax(logits, 1);
        Ok((tape.value(logits).to_vec(), tape.value(probs).to_vec()))
    }

    /// Most probable class.
    pub fn predict(&self, input: &ClassFeatureTensor) -> Result<ClassId> {
        let (logits, _) = self.forward(input)?;
        Ok(crate::audio::argmax(&logits))
    }

    /// One-against-all reading of the multi-class output: positive iff the
    /// argmax equals the target class.
    pub fn classify(&self, input: &ClassFeatureTensor, target: ClassId) -> Result<(bool, Vec<f64>)> {
        let (_, probs) = self.forward(input)?;
        Ok((crate::audio::argmax(&probs) == target, probs))
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub stopped_epoch: usize,
}

/// One labeled training sample.
pub type Sample = (ClassFeatureTensor, ClassId);

/// Trains with cross-entropy + Adam. Stops at the epoch cap or after
/// `patience` epochs without validation-accuracy improvement. Deterministic
/// for a fixed config seed.
pub fn train(model: &mut ViTModel, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (_, label) in train_set.iter().chain(val_set) {
        if *label >= model.classes {
            return Err(Error::UnknownClass(format!("label {label}")));
        }
    }
    let cfg = model.config.clone();
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::EpochShuffle(0));

    let mut report = TrainReport {
        train_accuracy: Vec::new(),
        val_accuracy: Vec::new(),
        train_loss: Vec::new(),
        stopped_epoch: 0,
    };
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Vec<f64>>> = None;
            for &idx in batch {
                let (input, label) = &train_set[idx];
                let mut tape = Tape::new();
                let (logits, param_ids) = model.forward_on_tape(&mut tape, input)?;
                let loss = tape.cross_entropy(logits, &[*label]);
                let loss_val = tape.value(loss)[0];
                if !loss_val.is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                epoch_loss += loss_val;
                if crate::audio::argmax(tape.value(logits)) == *label {
                    correct += 1;
                }
                tape.backward(loss);
                let acc = grads.get_or_insert_with(|| {
                    param_ids.iter().map(|&id| vec![0.0; tape.value(id).len()]).collect()
                });
                for (buf, &id) in acc.iter_mut().zip(&param_ids) {
                    for (b, g) in buf.iter_mut().zip(tape.grad(id)) {
                        *b += g;
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for buf in &mut grads {
                for g in buf.iter_mut() {
                    *g *= inv;
                }
            }
            let mut params = model.params_mut();
            adam.step_refs(&mut params, &grads);
        }

        let train_acc = correct as f64 / train_set.len() as f64;
        let val_acc = if val_set.is_empty() {
            train_acc
        } else {
            accuracy(model, val_set)?
        };
        report.train_accuracy.push(train_acc);
        report.val_accuracy.push(val_acc);
        report.train_loss.push(epoch_loss / train_set.len() as f64);
        report.stopped_epoch = epoch + 1;

        if val_acc > best_val + 1e-12 {
            best_val = val_acc;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(report)
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(model: &ViTModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (input, label) in samples {
        if model.predict(input)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ViTConfig,
    classes: usize,
    grid_height: usize,
    grid_width: usize,
    params: Vec<String>,
}

/// Writes a checkpoint: u32-LE header length, JSON header (config plus
/// parameter names in order), then one FWT1 block per parameter.
pub fn save_checkpoint(model: &ViTModel, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let named = model.named_params();
    let header = CheckpointHeader {
        config: model.config.clone(),
        classes: model.classes,
        grid_height: model.grid_height,
        grid_width: model.grid_width,
        params: named.iter().map(|(n, _)| n.clone()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, tensor) in named {
        crate::dataset::write_fwt(&mut file, tensor)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Checkpoints quantize
/// parameters to f32.
pub fn load_checkpoint(path: &std::path::Path) -> Result<ViTModel> {
    use std::io::Read;
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_buf) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut model = ViTModel::new(
        header.config,
        header.classes,
        header.grid_height,
        header.grid_width,
    )?;
    {
        let expected: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        if expected != header.params {
            return Err(Error::DatasetFormat(
                "checkpoint parameter list does not match the model layout".into(),
            ));
        }
        let mut params = model.params_mut();
        for slot in params.iter_mut() {
            let tensor = crate::dataset::read_fwt(&mut file)?;
            if tensor.shape() != slot.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {:?} vs expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            let grad = slot.requires_grad();
            **slot = if grad { tensor.with_grad() } else { tensor };
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference_gradient;

    fn tiny_config(seed: u64) -> ViTConfig {
        ViTConfig {
            patch_size: 4,
            num_heads: 2,
            embed_dim: 8,
            depth: 1,
            mlp_ratio: 2,
            learning_rate: 1e-3,
            max_epochs: 10,
            patience: 5,
            batch_size: 4,
            seed,
            ..ViTConfig::default()
        }
    }

    fn random_input(classes: usize, h: usize, w: usize, seed: u64) -> ClassFeatureTensor {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::SceneGen(999));
        let mut t = ClassFeatureTensor::zeros(classes, h, w);
        for k in 0..classes {
            for i in 0..h {
                for j in 0..w {
                    t.set(k, i, j, rng.gen_range(0.0..1.0));
                }
            }
        }
        t
    }

    #[test]
    fn patchify_shapes_layer7() {
        let t = ClassFeatureTensor::zeros(3, 20, 20);
        let tokens = patchify(&t, 4).unwrap();
        assert_eq!(tokens.shape(), &[25, 48]);
    }

    #[test]
    fn patchify_constant_input_gives_identical_tokens() {
        let mut t = ClassFeatureTensor::zeros(3, 8, 8);
        for k in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    t.set(k, i, j, 0.7);
                }
            }
        }
        let tokens = patchify(&t, 4).unwrap();
        let first = &tokens.data()[..48];
        for row in 1..4 {
            assert_eq!(&tokens.data()[row * 48..(row + 1) * 48], first);
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let t = random_input(3, 12, 8, 1);
        let tokens = patchify(&t, 4).unwrap();
        let back = unpatchify(&tokens, 3, 12, 8, 4).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn patchify_rejects_indivisible_grid() {
        let t = ClassFeatureTensor::zeros(3, 10, 10);
        assert!(patchify(&t, 4).is_err());
    }

    #[test]
    fn token_count_for_presets() {
        let m = ViTModel::new(ViTConfig::default(), 3, 20, 20).unwrap();
        assert_eq!(m.token_count(), 26);
        let m40 = ViTModel::new(ViTConfig::default(), 3, 40, 40).unwrap();
        assert_eq!(m40.token_count(), 101);
    }

    #[test]
    fn forward_probabilities_on_simplex() {
        let model = ViTModel::new(tiny_config(3), 3, 8, 8).unwrap();
        let input = random_input(3, 8, 8, 2);
        let (logits, probs) = model.forward(&input).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn output_depends_on_class_slices() {
        // Swapping two class slices of the input must change the logits:
        // the decision is not constant in the audio tensor.
        let model = ViTModel::new(tiny_config(5), 3, 8, 8).unwrap();
        let input = random_input(3, 8, 8, 7);
        let mut swapped = input.clone();
        for i in 0..8 {
            for j in 0..8 {
                let a = input.at(0, i, j);
                let b = input.at(1, i, j);
                swapped.set(0, i, j, b);
                swapped.set(1, i, j, a);
            }
        }
        let (l1, _) = model.forward(&input).unwrap();
        let (l2, _) = model.forward(&swapped).unwrap();
        let diff: f64 = l1.iter().zip(&l2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "logits identical after slice swap");
    }

    #[test]
    fn classify_is_argmax_against_target() {
        let model = ViTModel::new(tiny_config(11), 3, 8, 8).unwrap();
        let input = random_input(3, 8, 8, 12);
        let pred = model.predict(&input).unwrap();
        for target in 0..3 {
            let (positive, _) = model.classify(&input, target).unwrap();
            assert_eq!(positive, pred == target);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Tiny assembly: embed 8, depth 1, 8x8 input. Perturb every
        // parameter tensor and compare against central differences on the
        // cross-entropy readout (norm-relative error < 1e-3).
        let model = ViTModel::new(tiny_config(21), 3, 8, 8).unwrap();
        let input = random_input(3, 8, 8, 22);
        let label = 1usize;

        let mut tape = Tape::new();
        let (logits, param_ids) = model.forward_on_tape(&mut tape, &input).unwrap();
        let loss = tape.cross_entropy(logits, &[label]);
        tape.backward(loss);

        let named = model.named_params();
        for (pi, (name, tensor)) in named.iter().enumerate() {
            let analytic = tape.grad(param_ids[pi]).to_vec();
            let numeric = central_difference_gradient(
                |x| {
                    let mut probe = model.clone();
                    {
                        let mut params = probe.params_mut();
                        params[pi].data_mut().copy_from_slice(x);
                    }
                    let mut t = Tape::new();
                    let (lg, _) = probe.forward_on_tape(&mut t, &input).unwrap();
                    let l = t.cross_entropy(lg, &[label]);
                    t.value(l)[0]
                },
                tensor.data(),
                1e-5,
            );
            let norm_a: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_d: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let rel = norm_d / norm_a.max(1e-8);
            assert!(rel < 1e-3, "{name}: relative gradient error {rel:.2e}");
        }
    }

    /// Linearly separable three-class toy set: class k lights up slice k.
    fn separable_set(n_per_class: usize, seed: u64) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::SceneGen(31));
        let mut out = Vec::new();
        for k in 0..3usize {
            for _ in 0..n_per_class {
                let mut t = ClassFeatureTensor::zeros(3, 8, 8);
                for s in 0..3 {
                    for i in 0..8 {
                        for j in 0..8 {
                            let base = if s == k { 0.9 } else { 0.1 };
                            t.set(s, i, j, base + rng.gen_range(-0.05..0.05));
                        }
                    }
                }
                out.push((t, k));
            }
        }
        out
    }

    #[test]
    fn training_learns_a_separable_set() {
        let mut cfg = tiny_config(41);
        cfg.learning_rate = 1e-3; // convergence path; default 1e-6 is exercised below
        cfg.max_epochs = 100;
        cfg.patience = 100;
        let mut model = ViTModel::new(cfg, 3, 8, 8).unwrap();
        let train_set = separable_set(12, 42);
        let val_set = separable_set(4, 43);
        let report = train(&mut model, &train_set, &val_set).unwrap();
        let final_acc = *report.train_accuracy.last().unwrap();
        assert!(
            final_acc >= 0.95,
            "train accuracy {final_acc} after {} epochs",
            report.stopped_epoch
        );
        // smoothed loss trend is non-increasing
        let loss = &report.train_loss;
        if loss.len() >= 20 {
            let head: f64 = loss[..10].iter().sum::<f64>() / 10.0;
            let tail: f64 = loss[loss.len() - 10..].iter().sum::<f64>() / 10.0;
            assert!(tail <= head, "loss trend increased: {head} -> {tail}");
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let run = || {
            let mut model = ViTModel::new(tiny_config(77), 3, 8, 8).unwrap();
            let train_set = separable_set(6, 5);
            let report = train(&mut model, &train_set, &[]).unwrap();
            (model, report)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        for ((_, a), (_, b)) in m1.named_params().iter().zip(m2.named_params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn default_learning_rate_path_trains_without_diverging() {
        let mut cfg = tiny_config(99);
        cfg.learning_rate = 1e-6; // reference default
        cfg.max_epochs = 3;
        let mut model = ViTModel::new(cfg, 3, 8, 8).unwrap();
        let set = separable_set(4, 9);
        let report = train(&mut model, &set, &[]).unwrap();
        assert_eq!(report.train_loss.len(), report.stopped_epoch);
        assert!(report.train_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn train_rejects_empty_and_bad_labels() {
        let mut model = ViTModel::new(tiny_config(1), 3, 8, 8).unwrap();
        assert!(matches!(train(&mut model, &[], &[]), Err(Error::EmptyDataset)));
        let bad = vec![(ClassFeatureTensor::zeros(3, 8, 8), 7usize)];
        assert!(matches!(
            train(&mut model, &bad, &[]),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_decisions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = ViTModel::new(tiny_config(55), 3, 8, 8).unwrap();
        let set = separable_set(4, 66);
        train(&mut model, &set, &[]).unwrap();
        // f32 quantization must not change any argmax decision here
        save_checkpoint(&model, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        for (input, _) in &set {
            assert_eq!(
                model.predict(input).unwrap(),
                restored.predict(input).unwrap()
            );
        }
    }

    #[test]
    fn config_validation() {
        let cfg = ViTConfig::default();
        assert!(cfg.validate(3, 20, 20).is_ok());
        assert!(cfg.validate(3, 10, 20).is_err()); // 10 % 4 != 0
        let bad = ViTConfig { embed_dim: 30, ..ViTConfig::default() };
        assert!(bad.validate(3, 20, 20).is_err()); // 30 % 4 != 0
    }
}
