//! Two-branch encoder, offset head and the Adam optimizer.
//!
//! Both branches share one architecture (affine, tanh, affine) but own their
//! weights. The offset head reads the concatenated unit embeddings of a query
//! and a reference and either regresses the normalized offset or scores a
//! 10x10 grid over the central area of the tile.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{l2_normalize, normalize_backward, Embedding, FloatMatrix};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, HybridBatch, HybridOutput, IouPairLabel, LossConfig, OffsetLabel, OffsetTarget, SemiPair};

/// Cells per axis of the classification grid.
pub const GRID_CELLS: usize = 10;
pub const NUM_OFFSET_CLASSES: usize = GRID_CELLS * GRID_CELLS;
/// Largest normalized offset inside the central area.
pub const CENTRAL_HALF_WIDTH: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major, `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut d = Self::zeros(dim, dim);
        for i in 0..dim {
            d.weights[i * dim + i] = 1.0;
        }
        d
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }
}

/// Affine layers with tanh between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Inputs seen by each layer during a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
}

/// Random `rows x cols` row-major matrix with orthonormal columns (or rows,
/// when wide), via Gram-Schmidt on Gaussian draws.
fn semi_orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..tall).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (k, b) in basis.iter().enumerate() {
        for (t, x) in b.iter().enumerate() {
            if rows >= cols {
                out[t * cols + k] = *x;
            } else {
                out[k * cols + t] = *x;
            }
        }
    }
    out
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer emits {} values, next expects {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, hidden.., out]` with Glorot initialization.
    pub fn glorot<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::new(sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect())
    }

    pub fn identity(dim: usize) -> Self {
        Self { layers: vec![Dense::identity(dim)] }
    }

    /// Two layers `n -> h -> d` whose linear part starts as a random
    /// semi-orthogonal map followed by its transpose, so the initial encoder
    /// is close to a coordinate projection and keeps input geometry.
    pub fn near_isometric<R: Rng>(n: usize, h: usize, d: usize, rng: &mut R) -> Self {
        let q = semi_orthogonal(h, n, rng);
        let mut first = Dense::zeros(n, h);
        first.weights.copy_from_slice(&q);
        let mut second = Dense::zeros(h, d);
        for i in 0..d.min(n) {
            for j in 0..h {
                second.weights[i * h + j] = q[j * n + i];
            }
        }
        Self { layers: vec![first, second] }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: x.len() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if i + 1 < self.layers.len() { z.into_iter().map(f64::tanh).collect() } else { z };
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient on the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &cache.inputs[li];
            let gl = &mut grads.layers[li];
            for (o, go) in g.iter().enumerate() {
                gl.bias[o] += go;
                let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, xi) in row.iter_mut().zip(x) {
                    *w += go * xi;
                }
            }
            let mut gx = vec![0.0; layer.inputs];
            for (o, go) in g.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gi, w) in gx.iter_mut().zip(row) {
                    *gi += go * w;
                }
            }
            if li > 0 {
                // x is tanh of the previous layer's pre-activation.
                for (gi, a) in gx.iter_mut().zip(x) {
                    *gi *= 1.0 - a * a;
                }
            }
            g = gx;
        }
        g
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters in [`Mlp::write_params`] order; returns how many were consumed.
    pub fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        if src.len() < self.num_params() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", src.len(), self.num_params())));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&src[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }
}

/// Forward pass then l2 normalization.
pub fn encode(branch: &Mlp, raw: &[f64]) -> Result<Embedding> {
    l2_normalize(&branch.forward(raw)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMode {
    None,
    Regression,
    Classification,
}

impl OffsetMode {
    pub fn outputs(self) -> usize {
        match self {
            OffsetMode::None => 0,
            OffsetMode::Regression => 2,
            OffsetMode::Classification => NUM_OFFSET_CLASSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetHead {
    pub mode: OffsetMode,
    pub mlp: Mlp,
}

fn head_input(ground: &Embedding, aerial: &Embedding) -> Vec<f64> {
    ground.values().iter().chain(aerial.values()).copied().collect()
}

/// Raw `[lat, lon]` output of a regression head, in units of the tile side.
pub fn predict_offset_regression(head: &OffsetHead, ground: &Embedding, aerial: &Embedding) -> Result<[f64; 2]> {
    if head.mode != OffsetMode::Regression {
        return Err(Error::InvalidConfig("head is not a regression head".into()));
    }
    let out = head.mlp.forward(&head_input(ground, aerial))?;
    Ok([out[0], out[1]])
}

/// Restricts a normalized offset to the central area.
pub fn clamp_offset(pred: [f64; 2]) -> [f64; 2] {
    pred.map(|v| v.clamp(-CENTRAL_HALF_WIDTH, CENTRAL_HALF_WIDTH))
}

/// Argmax over the grid logits; ties go to the lowest index.
pub fn predict_offset_classification(head: &OffsetHead, ground: &Embedding, aerial: &Embedding) -> Result<usize> {
    if head.mode != OffsetMode::Classification {
        return Err(Error::InvalidConfig("head is not a classification head".into()));
    }
    let logits = head.mlp.forward(&head_input(ground, aerial))?;
    Ok(argmax(&logits))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn grid_cell(v: f64) -> usize {
    let width = 2.0 * CENTRAL_HALF_WIDTH / GRID_CELLS as f64;
    (((v + CENTRAL_HALF_WIDTH) / width).floor().max(0.0) as usize).min(GRID_CELLS - 1)
}

/// Grid class of a normalized offset: `row * 10 + col`, rows counted north
/// from the southern edge of the central area, columns east from its western edge.
pub fn offset_class(label: &OffsetLabel) -> usize {
    grid_cell(label.lat_norm) * GRID_CELLS + grid_cell(label.lon_norm)
}

/// Center of a grid cell as a normalized offset.
pub fn class_center(class: usize) -> OffsetLabel {
    let width = 2.0 * CENTRAL_HALF_WIDTH / GRID_CELLS as f64;
    let center = |i: usize| -CENTRAL_HALF_WIDTH + (i as f64 + 0.5) * width;
    OffsetLabel { lat_norm: center(class / GRID_CELLS), lon_norm: center(class % GRID_CELLS) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update. A non-finite gradient rejects the whole
    /// step and leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters and {} gradients for optimizer over {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub head_hidden_dim: usize,
    pub offset_mode: OffsetMode,
    #[serde(default)]
    pub init: EncoderInit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInit {
    Glorot,
    /// Stand-in for a pretrained backbone: the untrained encoder already
    /// preserves the geometry of its inputs.
    #[default]
    NearIsometric,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 64,
            embed_dim: 32,
            head_hidden_dim: 64,
            offset_mode: OffsetMode::Regression,
            init: EncoderInit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub ground: Mlp,
    pub aerial: Mlp,
    pub head: Option<OffsetHead>,
}

/// Raw features and labels for one training step.
#[derive(Clone, Debug, Default)]
pub struct StepInputs {
    pub ground: Vec<Vec<f64>>,
    pub aerial: Vec<Vec<f64>>,
    /// `(query batch index, raw aerial features, label)`.
    pub semi: Vec<(usize, Vec<f64>, IouPairLabel)>,
    /// `(pair batch index, label)` for pairs that train the offset head.
    pub offsets: Vec<(usize, OffsetLabel)>,
    pub covers: BTreeSet<(usize, usize)>,
    pub semi_as_positive: bool,
}

impl Model {
    /// Both branches start from the same weights; the head is independent.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ground = match config.init {
            EncoderInit::Glorot => Mlp::glorot(&[config.input_dim, config.hidden_dim, config.embed_dim], &mut rng)?,
            EncoderInit::NearIsometric => {
                Mlp::near_isometric(config.input_dim, config.hidden_dim, config.embed_dim, &mut rng)
            }
        };
        let aerial = ground.clone();
        let head = match config.offset_mode {
            OffsetMode::None => None,
            mode => Some(OffsetHead {
                mode,
                mlp: Mlp::glorot(&[2 * config.embed_dim, config.head_hidden_dim, mode.outputs()], &mut rng)?,
            }),
        };
        Ok(Self { config, ground, aerial, head })
    }

    pub fn encode_ground(&self, raw: &[f64]) -> Result<Embedding> {
        encode(&self.ground, raw)
    }

    pub fn encode_aerial(&self, raw: &[f64]) -> Result<Embedding> {
        encode(&self.aerial, raw)
    }

    pub fn num_params(&self) -> usize {
        self.ground.num_params() + self.aerial.num_params() + self.head.as_ref().map_or(0, |h| h.mlp.num_params())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.ground.write_params(&mut out);
        self.aerial.write_params(&mut out);
        if let Some(h) = &self.head {
            h.mlp.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", src.len(), self.num_params())));
        }
        let mut at = self.ground.read_params(src)?;
        at += self.aerial.read_params(&src[at..])?;
        if let Some(h) = &mut self.head {
            h.mlp.read_params(&src[at..])?;
        }
        Ok(())
    }

    /// Hybrid loss of one step and its gradient with respect to [`Model::params`].
    /// Offset terms are skipped when the model has no head.
    pub fn step_gradient(&self, inputs: &StepInputs, loss: &LossConfig) -> Result<(HybridOutput, Vec<f64>)> {
        let n = inputs.ground.len();
        let run = |net: &Mlp, rows: &[&Vec<f64>]| -> Result<Vec<(Vec<f64>, MlpCache)>> {
            rows.iter().map(|r| net.forward_cached(r)).collect()
        };
        let ground = run(&self.ground, &inputs.ground.iter().collect::<Vec<_>>())?;
        let aerial = run(&self.aerial, &inputs.aerial.iter().collect::<Vec<_>>())?;
        let semi = run(&self.aerial, &inputs.semi.iter().map(|s| &s.1).collect::<Vec<_>>())?;

        let mut batch = HybridBatch {
            ground: ground.iter().map(|g| g.0.clone()).collect(),
            aerial: aerial.iter().map(|a| a.0.clone()).collect(),
            semi: inputs
                .semi
                .iter()
                .zip(&semi)
                .map(|((q, _, label), out)| SemiPair { query: *q, aerial: out.0.clone(), label: *label })
                .collect(),
            offsets: Vec::new(),
            covers: inputs.covers.clone(),
            semi_as_positive: inputs.semi_as_positive,
        };

        let mut head_runs = Vec::new();
        if let Some(head) = &self.head {
            for &(i, label) in &inputs.offsets {
                if i >= n {
                    return Err(Error::ShapeMismatch(format!("offset label for pair {i} of {n}")));
                }
                let x = head_input(&l2_normalize(&batch.ground[i])?, &l2_normalize(&batch.aerial[i])?);
                let (out, cache) = head.mlp.forward_cached(&x)?;
                batch.offsets.push(match head.mode {
                    OffsetMode::Classification => OffsetTarget::Classification { logits: out, class: offset_class(&label) },
                    _ => OffsetTarget::Regression { pred: [out[0], out[1]], truth: label },
                });
                head_runs.push((i, cache));
            }
        }

        let mut out = hybrid_loss(&batch, loss)?;

        let mut head_grads = self.head.as_ref().map(|h| h.mlp.zeros_like());
        if let (Some(head), Some(hg)) = (&self.head, &mut head_grads) {
            let d = self.config.embed_dim;
            for ((i, cache), g) in head_runs.iter().zip(&out.grad_offset) {
                let gx = head.mlp.backward(cache, g, hg);
                let gg = normalize_backward(&batch.ground[*i], &gx[..d]);
                let ga = normalize_backward(&batch.aerial[*i], &gx[d..]);
                for (acc, v) in out.grad_ground[*i].iter_mut().zip(gg) {
                    *acc += v;
                }
                for (acc, v) in out.grad_aerial[*i].iter_mut().zip(ga) {
                    *acc += v;
                }
            }
        }

        let mut g_ground = self.ground.zeros_like();
        for ((_, cache), g) in ground.iter().zip(&out.grad_ground) {
            self.ground.backward(cache, g, &mut g_ground);
        }
        let mut g_aerial = self.aerial.zeros_like();
        for ((_, cache), g) in aerial.iter().zip(&out.grad_aerial) {
            self.aerial.backward(cache, g, &mut g_aerial);
        }
        for ((_, cache), g) in semi.iter().zip(&out.grad_semi) {
            self.aerial.backward(cache, g, &mut g_aerial);
        }

        let mut flat = Vec::with_capacity(self.num_params());
        g_ground.write_params(&mut flat);
        g_aerial.write_params(&mut flat);
        if let Some(hg) = &head_grads {
            hg.write_params(&mut flat);
        }
        Ok((out, flat))
    }

    fn tensors(&self) -> Vec<(String, &Dense)> {
        let mut nets = vec![("ground", &self.ground), ("aerial", &self.aerial)];
        if let Some(h) = &self.head {
            nets.push(("head", &h.mlp));
        }
        nets.into_iter()
            .flat_map(|(prefix, mlp)| mlp.layers.iter().enumerate().map(move |(i, l)| (format!("{prefix}.{i}"), l)))
            .collect()
    }

    /// Writes `<stem>.json` (header) and `<stem>.vgem` (one weight block and
    /// one bias block per layer, in header order).
    pub fn save(&self, stem: &Path, step: u64, extra: serde_json::Value) -> Result<()> {
        let mut tensors = Vec::new();
        let mut w = BufWriter::new(File::create(stem.with_extension("vgem"))?);
        for (name, layer) in self.tensors() {
            let weights = FloatMatrix::new(
                layer.outputs,
                layer.inputs,
                layer.weights.iter().map(|&x| x as f32).collect(),
            )?;
            let bias = FloatMatrix::new(1, layer.outputs, layer.bias.iter().map(|&x| x as f32).collect())?;
            weights.write_to(&mut w)?;
            bias.write_to(&mut w)?;
            tensors.push(TensorHeader { name: format!("{name}.weight"), rows: layer.outputs, cols: layer.inputs });
            tensors.push(TensorHeader { name: format!("{name}.bias"), rows: 1, cols: layer.outputs });
        }
        w.flush()?;
        let header = CheckpointHeader { config: self.config, step, tensors, extra };
        serde_json::to_writer_pretty(BufWriter::new(File::create(stem.with_extension("json"))?), &header)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, CheckpointHeader)> {
        let header: CheckpointHeader = serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
        let mut model = Self::new(header.config, 0)?;
        let mut r = BufReader::new(File::open(stem.with_extension("vgem"))?);
        let mut flat = Vec::with_capacity(model.num_params());
        for t in &header.tensors {
            let block = read_block(&mut r)?;
            if block.rows() != t.rows || block.dim() != t.cols {
                return Err(Error::BadFormat(format!(
                    "tensor {} is {}x{}, header says {}x{}",
                    t.name,
                    block.rows(),
                    block.dim(),
                    t.rows,
                    t.cols
                )));
            }
            flat.extend(block.as_slice().iter().map(|&x| f64::from(x)));
        }
        model.set_params(&flat)?;
        Ok((model, header))
    }
}

fn read_block<R: Read>(r: &mut R) -> Result<FloatMatrix> {
    FloatMatrix::read_from(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorHeader>,
    #[serde(default)]
    pub extra: serde_json::Value,
}
