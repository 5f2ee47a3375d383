//! The bidirectional token transformer, its masked-rectangle training
//! objective and checkpoint I/O.
//!
//! Architecture: token + learned positional embeddings, `L` pre-LN blocks
//! (multi-head self-attention without any causal mask, GELU MLP), final
//! layer norm and a linear read-out to vocabulary logits.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::sample_training_rectangle;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{stream_rng, streams, SeededRng};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Float, Tensor};
use crate::tokenizer::TokenGrid;

const CHECKPOINT_MAGIC: &[u8; 4] = b"EDBT";
const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub p_rand: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers of width 64, 4 heads, 8x8 grid.
    pub fn toy(vocab: usize) -> Self {
        ModelConfig {
            vocab,
            seq_len: 64,
            grid_h: 8,
            grid_w: 8,
            layers: 4,
            width: 64,
            heads: 4,
            ff_mult: 2,
            p_rand: 0.9,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model config: width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.seq_len != self.grid_h * self.grid_w {
            return Err(Error::invalid(format!(
                "model config: sequence length {} != grid {}x{}",
                self.seq_len, self.grid_h, self.grid_w
            )));
        }
        if !(0.0..=1.0).contains(&self.p_rand) {
            return Err(Error::invalid(format!("model config: p_rand {} outside [0, 1]", self.p_rand)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter array, in declaration (and
    /// serialization) order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (n, l, w, f) = (self.vocab, self.seq_len, self.width, self.ff_mult * self.width);
        let mut out = vec![("tok_emb".to_string(), vec![n, w]), ("pos_emb".to_string(), vec![l, w])];
        for i in 0..self.layers {
            let p = |s: &str| format!("block{i}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![w]),
                (p("ln1.beta"), vec![w]),
                (p("attn.w_qkv"), vec![w, 3 * w]),
                (p("attn.b_qkv"), vec![3 * w]),
                (p("attn.w_out"), vec![w, w]),
                (p("attn.b_out"), vec![w]),
                (p("ln2.gamma"), vec![w]),
                (p("ln2.beta"), vec![w]),
                (p("mlp.w_in"), vec![w, f]),
                (p("mlp.b_in"), vec![f]),
                (p("mlp.w_out"), vec![f, w]),
                (p("mlp.b_out"), vec![w]),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), vec![w]),
            ("ln_f.beta".to_string(), vec![w]),
            ("head.w".to_string(), vec![w, n]),
            ("head.b".to_string(), vec![n]),
        ]);
        out
    }
}

const PER_LAYER: usize = 12;

/// All trainable arrays in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Float = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl ModelParams<f32> {
    /// Gaussian(0, 0.02) weights and embeddings, residual output projections
    /// scaled by `1/sqrt(2L)`, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = 1.0 / ((2 * cfg.layers) as f64).sqrt();
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("gamma") {
                    Tensor::ones(&shape)
                } else if name.contains(".b") || name.ends_with("beta") || name == "head.b" {
                    Tensor::zeros(&shape)
                } else {
                    let scale = if name.ends_with("w_out") { resid } else { 1.0 };
                    Tensor::from_fn(&shape, |_| (normal.sample(rng) * scale) as f32)
                }
            })
            .collect();
        Ok(ModelParams { tensors })
    }
}

impl<T: Float> ModelParams<T> {
    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes = cfg.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "model has {} parameter arrays, config expects {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if t.shape() != &shape[..] {
                return Err(Error::invalid(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Register every array on `tape` as a trainable leaf.
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Fused multi-head self-attention over `batch` sequences of length `seq`.
///
/// `qkv` is `[batch*seq, 3*width]` holding queries, keys and values side by
/// side; heads split each of them into contiguous `width/heads` slices. Every
/// position attends to every position.
pub fn attention<T: Float>(tape: &mut Tape<T>, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
    let v = tape.value(qkv);
    let (rows, cols) = v.dims2("attention")?;
    if rows != batch * seq || cols % (3 * heads) != 0 {
        return Err(Error::shape("attention", v.shape(), &[batch * seq, 3 * heads]));
    }
    let width = cols / 3;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let gather = move |src: &[T], b: usize, col: usize| -> Vec<T> {
        let mut out = Vec::with_capacity(seq * dh);
        for i in 0..seq {
            let start = (b * seq + i) * cols + col;
            out.extend_from_slice(&src[start..start + dh]);
        }
        out
    };

    let src = v.data();
    let mut probs = Vec::with_capacity(batch * heads * seq * seq);
    let mut out = vec![T::zero(); rows * width];
    for b in 0..batch {
        for h in 0..heads {
            let q = gather(src, b, h * dh);
            let k = gather(src, b, width + h * dh);
            let vv = gather(src, b, 2 * width + h * dh);
            let mut s = matmul_nt_kernel(&q, &k, seq, dh, seq);
            for row in s.chunks_mut(seq) {
                softmax_row(row, scale);
            }
            let o = matmul_kernel(&s, &vv, seq, seq, dh);
            for i in 0..seq {
                let dst = (b * seq + i) * width + h * dh;
                out[dst..dst + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
            probs.extend_from_slice(&s);
        }
    }
    let value = Tensor::new(&[rows, width], out)?;
    let scale_t = T::of_f64(scale);
    Ok(tape.custom(
        &[qkv],
        value,
        Box::new(move |g, ins, _, _| {
            let src = ins[0].data();
            let mut gq = vec![T::zero(); rows * cols];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    let q = gather(src, b, h * dh);
                    let k = gather(src, b, width + h * dh);
                    let vv = gather(src, b, 2 * width + h * dh);
                    let mut go = Vec::with_capacity(seq * dh);
                    for i in 0..seq {
                        let start = (b * seq + i) * width + h * dh;
                        go.extend_from_slice(&g[start..start + dh]);
                    }
                    let dv = matmul_tn_kernel(p, &go, seq, seq, dh);
                    let mut ds = matmul_nt_kernel(&go, &vv, seq, dh, seq);
                    for (drow, prow) in ds.chunks_mut(seq).zip(p.chunks(seq)) {
                        let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (d, &pv) in drow.iter_mut().zip(prow) {
                            *d = pv * (*d - dot) * scale_t;
                        }
                    }
                    let dq = matmul_kernel(&ds, &k, seq, seq, dh);
                    let dk = matmul_tn_kernel(&ds, &q, seq, seq, dh);
                    for i in 0..seq {
                        let base = (b * seq + i) * cols + h * dh;
                        let r = i * dh..(i + 1) * dh;
                        gq[base..base + dh].copy_from_slice(&dq[r.clone()]);
                        gq[base + width..base + width + dh].copy_from_slice(&dk[r.clone()]);
                        gq[base + 2 * width..base + 2 * width + dh].copy_from_slice(&dv[r]);
                    }
                }
            }
            vec![Some(gq)]
        }),
    ))
}

fn softmax_row<T: Float>(row: &mut [T], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64() * scale));
    let mut denom = 0f64;
    let mut e: Vec<f64> = Vec::with_capacity(row.len());
    for v in row.iter() {
        let x = (v.as_f64() * scale - max).exp();
        denom += x;
        e.push(x);
    }
    for (v, x) in row.iter_mut().zip(e) {
        *v = T::of_f64(x / denom);
    }
}

fn check_sequence(cfg: &ModelConfig, s: &[usize]) -> Result<()> {
    if s.len() != cfg.seq_len {
        return Err(Error::invalid(format!(
            "sequence length {} does not match model length {}",
            s.len(),
            cfg.seq_len
        )));
    }
    if let Some(&t) = s.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::invalid(format!("token {t} out of range for vocabulary {}", cfg.vocab)));
    }
    Ok(())
}

/// Record the forward pass of a batch; returns `[batch*l, N]` logits.
pub fn forward_tape<T: Float>(tape: &mut Tape<T>, cfg: &ModelConfig, p: &[Var], batch: &[&[usize]]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("forward on an empty batch"));
    }
    for s in batch {
        check_sequence(cfg, s)?;
    }
    let l = cfg.seq_len;
    let tokens: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..l).collect();
    let eps = T::of_f64(LN_EPS);

    let te = tape.embedding(p[0], &tokens)?;
    let pe = tape.embedding(p[1], &positions)?;
    let mut x = tape.add(te, pe)?;
    for layer in 0..cfg.layers {
        let w = &p[2 + layer * PER_LAYER..2 + (layer + 1) * PER_LAYER];
        let h = tape.layer_norm(x, w[0], w[1], eps)?;
        let qkv = tape.matmul(h, w[2])?;
        let qkv = tape.add_bias(qkv, w[3])?;
        let a = attention(tape, qkv, batch.len(), l, cfg.heads)?;
        let a = tape.matmul(a, w[4])?;
        let a = tape.add_bias(a, w[5])?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, w[6], w[7], eps)?;
        let f = tape.matmul(h, w[8])?;
        let f = tape.add_bias(f, w[9])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w[10])?;
        let f = tape.add_bias(f, w[11])?;
        x = tape.add(x, f)?;
    }
    let tail = 2 + cfg.layers * PER_LAYER;
    let h = tape.layer_norm(x, p[tail], p[tail + 1], eps)?;
    let logits = tape.matmul(h, p[tail + 2])?;
    tape.add_bias(logits, p[tail + 3])
}

/// One training example after corruption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbedSequence {
    /// Input tokens with the active positions possibly replaced.
    pub tokens: Vec<usize>,
    /// The clean sequence; the loss reads it only at `active`.
    pub targets: Vec<usize>,
    /// Positions that contribute to the loss.
    pub active: Vec<usize>,
}

/// Each position in `phi` is independently redrawn uniformly from the
/// vocabulary with probability `p_rand`, otherwise kept. There is no mask
/// token.
pub fn perturb(s: &[usize], phi: &[usize], p_rand: f32, vocab: usize, rng: &mut impl Rng) -> PerturbedSequence {
    let mut tokens = s.to_vec();
    for &i in phi {
        if rng.gen::<f32>() < p_rand {
            tokens[i] = rng.gen_range(0..vocab);
        }
    }
    PerturbedSequence {
        tokens,
        targets: s.to_vec(),
        active: phi.to_vec(),
    }
}

/// Mean cross-entropy over all active positions of a batch of corrupted
/// sequences.
pub fn masked_token_loss<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &[Var],
    batch: &[PerturbedSequence],
) -> Result<Var> {
    let inputs: Vec<&[usize]> = batch.iter().map(|b| &b.tokens[..]).collect();
    let logits = forward_tape(tape, cfg, p, &inputs)?;
    let l = cfg.seq_len;
    let targets: Vec<usize> = batch.iter().flat_map(|b| b.targets.iter().copied()).collect();
    let active: Vec<usize> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.active.iter().map(move |&p| i * l + p))
        .collect();
    tape.cross_entropy(logits, &targets, &active)
}

/// Draw one training rectangle per sequence and corrupt it.
pub fn perturb_batch(cfg: &ModelConfig, batch: &[&[usize]], rng: &mut impl Rng) -> Result<Vec<PerturbedSequence>> {
    batch
        .iter()
        .map(|s| {
            let rect = sample_training_rectangle(cfg.grid_h, cfg.grid_w, rng)?;
            Ok(perturb(s, &rect.positions(cfg.grid_w), cfg.p_rand, cfg.vocab, rng))
        })
        .collect()
}

/// A configured transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Fresh initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config, &mut stream_rng(config.seed, streams::MODEL_INIT))?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    /// `[l, N]` logits for one sequence.
    pub fn forward(&self, s: &[usize]) -> Result<Tensor> {
        self.forward_batch(&[s])
    }

    /// `[B*l, N]` logits.
    pub fn forward_batch(&self, batch: &[&[usize]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.on_tape(&mut tape, false);
        let out = forward_tape(&mut tape, &self.config, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Row-major `[l, N]` softmax of the logits, in `f64`.
    pub fn probabilities(&self, s: &[usize]) -> Result<Vec<f64>> {
        let logits = self.forward(s)?;
        let mut out = Vec::with_capacity(logits.len());
        for i in 0..self.config.seq_len {
            out.extend(softmax_f64(logits.row(i)));
        }
        Ok(out)
    }

    /// `p^i(. | s)`.
    pub fn conditional_distribution(&self, s: &[usize], i: usize) -> Result<Vec<f64>> {
        if i >= self.config.seq_len {
            return Err(Error::invalid(format!(
                "position {i} out of range for sequence length {}",
                self.config.seq_len
            )));
        }
        let logits = self.forward(s)?;
        Ok(softmax_f64(logits.row(i)))
    }

    /// Masked cross-entropy of `batch` without building gradients.
    pub fn loss(&self, batch: &[PerturbedSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.on_tape(&mut tape, false);
        let loss = masked_token_loss(&mut tape, &self.config, &vars, batch)?;
        Ok(tape.value(loss).data()[0] as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 4 * self.params.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            c.vocab as u32,
            c.seq_len as u32,
            c.grid_h as u32,
            c.grid_w as u32,
            c.layers as u32,
            c.width as u32,
            c.heads as u32,
            c.ff_mult as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.p_rand.to_le_bytes());
        out.extend_from_slice(&(c.seed as u32).to_le_bytes());
        out.extend_from_slice(&((c.seed >> 32) as u32).to_le_bytes());
        for t in &self.params.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut words = bytes
            .get(4..52)
            .ok_or_else(|| Error::format("checkpoint truncated inside header"))?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let mut next = || words.next().expect("header is 12 words");
        let version = next();
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut u = || next() as usize;
        let (vocab, seq_len, grid_h, grid_w, layers, width, heads, ff_mult) = (u(), u(), u(), u(), u(), u(), u(), u());
        let p_rand = f32::from_bits(next());
        let seed = next() as u64 | ((next() as u64) << 32);
        let config = ModelConfig {
            vocab,
            seq_len,
            grid_h,
            grid_w,
            layers,
            width,
            heads,
            ff_mult,
            p_rand,
            seed,
        };
        config.validate().map_err(|e| Error::format(format!("invalid checkpoint header: {e}")))?;
        let shapes = config.param_shapes();
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let body = &bytes[52..];
        if body.len() != total * 4 {
            return Err(Error::format(format!(
                "checkpoint body has {} bytes, config requires {}",
                body.len(),
                total * 4
            )));
        }
        let mut floats = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let tensors = shapes
            .iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                Tensor::new(shape, floats.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(config, ModelParams { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

pub fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::load(path)
}

/// Corrupt, forward, backward and one Adam update on `batch`. Returns the
/// pre-update loss.
pub fn training_step(
    model: &mut Model,
    batch: &[&[usize]],
    state: &mut AdamState,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<f32> {
    let perturbed = perturb_batch(&model.config, batch, rng)?;
    let mut tape = Tape::new();
    let vars = model.params.on_tape(&mut tape, true);
    let loss = masked_token_loss(&mut tape, &model.config, &vars, &perturbed)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", state.step)));
    }
    tape.backward(loss)?;
    let zeros: Vec<Vec<f32>> = model.params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let grads: Vec<&[f32]> = vars
        .iter()
        .zip(&zeros)
        .map(|(&v, z)| tape.grad(v).unwrap_or(z))
        .collect();
    let mut params: Vec<&mut Tensor> = model.params.tensors.iter_mut().collect();
    adam_step(&mut params, &grads, state, adam)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Linear learning-rate ramp over the first `warmup` steps.
    pub warmup: usize,
    /// Cosine decay of the learning rate to zero at `steps`.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            warmup: 0,
            cosine_decay: false,
            seed: 0,
        }
    }
}

/// Owns the optimizer state and the training random stream.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    state: AdamState,
    rng: SeededRng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let state = AdamState::new(&model.params.tensors.iter().collect::<Vec<_>>());
        Trainer {
            model,
            config,
            state,
            rng: stream_rng(config.seed, streams::TRAINING),
        }
    }

    pub fn steps_done(&self) -> u64 {
        self.state.step
    }

    /// One step on a minibatch drawn uniformly with replacement from `data`.
    pub fn step(&mut self, data: &[TokenGrid]) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::invalid("training on an empty dataset"));
        }
        let picks: Vec<usize> = (0..self.config.batch_size.max(1))
            .map(|_| self.rng.gen_range(0..data.len()))
            .collect();
        let batch: Vec<&[usize]> = picks.iter().map(|&i| data[i].tokens()).collect();
        let mut adam = self.config.adam;
        let done = self.state.step as usize;
        adam.lr *= self.lr_factor(done);

        training_step(&mut self.model, &batch, &mut self.state, &adam, &mut self.rng)
    }

    /// Multiplier on the base learning rate at step `done` (0-based).
    pub fn lr_factor(&self, done: usize) -> f32 {
        let c = &self.config;
        if done < c.warmup {
            return (done + 1) as f32 / c.warmup as f32;
        }
        if c.cosine_decay && c.steps > c.warmup {
            let t = (done - c.warmup) as f64 / (c.steps - c.warmup) as f64;
            return (0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())) as f32;
        }
        1.0
    }

    /// Run `config.steps` steps, reporting `(step, loss)` after each.
    pub fn run(&mut self, data: &[TokenGrid], mut on_step: impl FnMut(usize, f32)) -> Result<()> {
        for step in 0..self.config.steps {
            let loss = self.step(data)?;
            on_step(step, loss);
        }
        Ok(())
    }
}

/// Held-out masked-token loss: one seeded rectangle and corruption per grid, mean
/// over all corrupted positions.
pub fn held_out_loss(model: &Model, data: &[TokenGrid], seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, streams::EVAL);
    let seqs: Vec<&[usize]> = data.iter().map(|g| g.tokens()).collect();
    let perturbed = perturb_batch(&model.config, &seqs, &mut rng)?;
    let mut total = 0.0;
    let mut count = 0;
    for chunk in perturbed.chunks(16) {
        let n: usize = chunk.iter().map(|p| p.active.len()).sum();
        total += model.loss(chunk)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 7,
            seq_len: 6,
            grid_h: 2,
            grid_w: 3,
            layers: 1,
            width: 8,
            heads: 2,
            ff_mult: 2,
            p_rand: 0.9,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy(64).validate().is_ok());
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { seq_len: 5, ..tiny() }.validate().is_err());
        assert!(ModelConfig { p_rand: 1.5, ..tiny() }.validate().is_err());
    }

    #[test]
    fn forward_shape_and_errors() {
        let m = Model::new(tiny()).unwrap();
        let out = m.forward(&[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(out.shape(), &[6, 7]);
        assert!(m.forward(&[0, 1, 2]).is_err());
        assert!(m.forward(&[0, 1, 2, 3, 4, 7]).is_err());
        assert!(m.conditional_distribution(&[0; 6], 6).is_err());
    }

    #[test]
    fn perturb_edges() {
        let mut rng = stream_rng(0, 0);
        let s: Vec<usize> = (0..10).collect();
        let p = perturb(&s, &[1, 2, 3], 0.0, 10, &mut rng);
        assert_eq!(p.tokens, s);
        let p = perturb(&s, &[1, 2, 3], 1.0, 10, &mut rng);
        assert!(p.tokens.iter().enumerate().all(|(i, &t)| [1, 2, 3].contains(&i) || t == i));
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let m = Model::new(tiny()).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"EDBT");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Model::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Model::from_bytes(&bytes[..30]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Model::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn fresh_loss_near_uniform() {
        let cfg = ModelConfig::toy(64);
        let m = Model::new(cfg).unwrap();
        let data: Vec<TokenGrid> = (0..8)
            .map(|k| TokenGrid::new(8, 8, (0..64).map(|i| (i * 7 + k) % 64).collect()).unwrap())
            .collect();
        let loss = held_out_loss(&m, &data, 1).unwrap();
        let ln_n = (64f64).ln();
        assert!((loss - ln_n).abs() < 0.1 * ln_n, "{loss}");
    }

    #[test]
    fn learning_rate_schedule() {
        let model = Model::new(ModelConfig::toy(16)).unwrap();
        let flat = Trainer::new(model.clone(), TrainConfig { steps: 10, ..TrainConfig::default() });
        assert!((0..10).all(|s| flat.lr_factor(s) == 1.0));
        let cos = Trainer::new(model, TrainConfig { steps: 10, warmup: 2, cosine_decay: true, ..TrainConfig::default() });
        assert_eq!((cos.lr_factor(0), cos.lr_factor(1), cos.lr_factor(2)), (0.5, 1.0, 1.0));
        assert!((cos.lr_factor(6) - 0.5).abs() < 1e-6);
        assert!(cos.lr_factor(9) < cos.lr_factor(8));
    }
}
