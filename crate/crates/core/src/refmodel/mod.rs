//! A small decoder-only transformer that exposes every layer's residual
//! stream output.
//!
//! Pre-norm blocks: `x += attn(norm(x))`, `x += mlp(norm(x))`, learned
//! positional embeddings, GELU MLP with hidden width `4 * d_model`. The
//! output head is `W_u · norm_final(h_L)`, the same projection the logit lens
//! applies to intermediate layers. Weights are stored as `f32`; all compute
//! runs in `f64`.

mod tokenizer;
mod train;
mod weights;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use tokenizer::{Tokenizer, BOS, EOS, N_SPECIAL, PAD, UNK};
pub use train::{train, TrainExample, TrainOptions, TrainReport};
pub use weights::{load_weights, save_weights, tokenizer_sidecar_path};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weight file format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Layer,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Rms => "rms",
            NormKind::Layer => "layer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub norm_kind: NormKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale reference configuration.
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            vocab_size: 512,
            max_context: 128,
            norm_kind: NormKind::Rms,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers < 2 {
            return fail(format!("n_layers must be >= 2, got {}", self.n_layers));
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return fail("d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < N_SPECIAL {
            return fail(format!("vocab_size must be >= {N_SPECIAL}"));
        }
        if self.max_context == 0 {
            return fail("max_context must be positive".into());
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Gain (and bias for LayerNorm) of one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormParams {
    pub kind: NormKind,
    pub gain: Array1<f64>,
    pub bias: Option<Array1<f64>>,
}

impl NormParams {
    fn identity(kind: NormKind, d: usize) -> Self {
        Self {
            kind,
            gain: Array1::ones(d),
            bias: (kind == NormKind::Layer).then(|| Array1::zeros(d)),
        }
    }

    pub fn apply_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let d = x.len() as f64;
        let mut y = match self.kind {
            NormKind::Rms => {
                let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
                let inv = 1.0 / (ms + NORM_EPS).sqrt();
                x.mapv(|v| v * inv)
            }
            NormKind::Layer => {
                let mean = x.sum() / d;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                x.mapv(|v| (v - mean) * inv)
            }
        };
        y *= &self.gain;
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn apply_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
            dst.assign(&self.apply_vec(src));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams {
    pub attn_norm: NormParams,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: NormParams,
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
}

/// Compute-precision parameters. Matrices are stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub tok_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
    pub unembed: Array2<f64>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax over the causal prefix (columns `0..=row`), in place.
pub(crate) fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row
            .slice(s![..=i])
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl Params {
    fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.d_ff();
        let std = 0.02;
        // residual projections scaled down with depth
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut normal = |rows: usize, cols: usize, sd: f64| {
            let dist = Normal::new(0.0, sd).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng) as f32 as f64)
        };
        let tok_embed = normal(config.vocab_size, d, std);
        let pos_embed = normal(config.max_context, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: NormParams::identity(config.norm_kind, d),
                wq: normal(d, d, std),
                wk: normal(d, d, std),
                wv: normal(d, d, std),
                wo: normal(d, d, resid_std),
                mlp_norm: NormParams::identity(config.norm_kind, d),
                w_up: normal(ff, d, std),
                b_up: Array1::zeros(ff),
                w_down: normal(d, ff, resid_std),
                b_down: Array1::zeros(d),
            })
            .collect();
        let unembed = normal(config.vocab_size, d, std);
        Self {
            tok_embed,
            pos_embed,
            layers,
            final_norm: NormParams::identity(config.norm_kind, d),
            unembed,
        }
    }

    /// Named tensors in canonical order, as `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        fn m(name: String, a: &Array2<f64>) -> (String, Vec<usize>, Vec<f64>) {
            (name, a.shape().to_vec(), a.iter().copied().collect())
        }
        fn v(name: String, a: &Array1<f64>) -> (String, Vec<usize>, Vec<f64>) {
            (name, vec![a.len()], a.to_vec())
        }
        fn norm(out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, prefix: &str, n: &NormParams) {
            out.push(v(format!("{prefix}.gain"), &n.gain));
            if let Some(b) = &n.bias {
                out.push(v(format!("{prefix}.bias"), b));
            }
        }
        let mut out = vec![
            m("tok_embed".into(), &self.tok_embed),
            m("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            norm(&mut out, &format!("layers.{i}.attn_norm"), &l.attn_norm);
            out.push(m(format!("layers.{i}.wq"), &l.wq));
            out.push(m(format!("layers.{i}.wk"), &l.wk));
            out.push(m(format!("layers.{i}.wv"), &l.wv));
            out.push(m(format!("layers.{i}.wo"), &l.wo));
            norm(&mut out, &format!("layers.{i}.mlp_norm"), &l.mlp_norm);
            out.push(m(format!("layers.{i}.w_up"), &l.w_up));
            out.push(v(format!("layers.{i}.b_up"), &l.b_up));
            out.push(m(format!("layers.{i}.w_down"), &l.w_down));
            out.push(v(format!("layers.{i}.b_down"), &l.b_down));
        }
        norm(&mut out, "final_norm", &self.final_norm);
        out.push(m("unembed".into(), &self.unembed));
        out
    }

    /// Expected `(name, shape)` list for a config, matching [`Params::tensors`].
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let ff = config.d_ff();
        let layer_norm = config.norm_kind == NormKind::Layer;
        let mut out = vec![
            ("tok_embed".to_string(), vec![config.vocab_size, d]),
            ("pos_embed".to_string(), vec![config.max_context, d]),
        ];
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: String| {
            out.push((format!("{prefix}.gain"), vec![d]));
            if layer_norm {
                out.push((format!("{prefix}.bias"), vec![d]));
            }
        };
        for i in 0..config.n_layers {
            norm(&mut out, format!("layers.{i}.attn_norm"));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{i}.{w}"), vec![d, d]));
            }
            norm(&mut out, format!("layers.{i}.mlp_norm"));
            out.push((format!("layers.{i}.w_up"), vec![ff, d]));
            out.push((format!("layers.{i}.b_up"), vec![ff]));
            out.push((format!("layers.{i}.w_down"), vec![d, ff]));
            out.push((format!("layers.{i}.b_down"), vec![d]));
        }
        norm(&mut out, "final_norm".into());
        out.push(("unembed".to_string(), vec![config.vocab_size, d]));
        out
    }

    /// Inverse of [`Params::tensors`]. `tensors` must follow
    /// [`Params::layout`] for `config`; the caller checks that.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Vec<f64>>) -> Self {
        let layout = Self::layout(config);
        let mut it = layout.into_iter().zip(tensors);
        let mut mat = || {
            let ((_, shape), data) = it.next().expect("layout length checked");
            Array2::from_shape_vec((shape[0], shape.get(1).copied().unwrap_or(1)), data)
                .expect("shape checked")
        };
        let vec = |a: Array2<f64>| a.into_iter().collect::<Array1<f64>>();
        let layer_norm = config.norm_kind == NormKind::Layer;
        let norm = |mat: &mut dyn FnMut() -> Array2<f64>| NormParams {
            kind: config.norm_kind,
            gain: vec(mat()),
            bias: layer_norm.then(|| vec(mat())),
        };
        let tok_embed = mat();
        let pos_embed = mat();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: norm(&mut mat),
                wq: mat(),
                wk: mat(),
                wv: mat(),
                wo: mat(),
                mlp_norm: norm(&mut mat),
                w_up: mat(),
                b_up: vec(mat()),
                w_down: mat(),
                b_down: vec(mat()),
            })
            .collect();
        let final_norm = norm(&mut mat);
        let unembed = mat();
        Self {
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HiddenStates {
    layers: Vec<Array2<f64>>,
}

impl HiddenStates {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_positions(&self) -> usize {
        self.layers.first().map_or(0, |l| l.nrows())
    }

    /// Output of layer `layer` (1-based) at every position.
    pub fn layer(&self, layer: usize) -> Option<&Array2<f64>> {
        layer.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Output of layer `layer` (1-based) at `position`.
    pub fn at(&self, layer: usize, position: usize) -> Option<ArrayView1<'_, f64>> {
        self.layer(layer)
            .filter(|m| position < m.nrows())
            .map(|m| m.row(position))
    }

    /// Output of `layer` at the final position.
    pub fn last(&self, layer: usize) -> Option<ArrayView1<'_, f64>> {
        self.at(layer, self.n_positions().checked_sub(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: Params,
}

impl ModelBundle {
    /// Deterministic initialization from `config.seed` with the basic ASCII
    /// tokenizer.
    pub fn init_seeded(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tokenizer = Tokenizer::basic(config.vocab_size)?;
        Self::init_with_tokenizer(config, tokenizer)
    }

    pub fn init_with_tokenizer(
        config: ModelConfig,
        tokenizer: Tokenizer,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "tokenizer has {} entries but vocab_size is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let params = Params::init(&config);
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, tokenizer: Tokenizer, params: Params) -> Self {
        Self {
            config,
            tokenizer,
            params,
        }
    }

    /// Names of all weight tensors in canonical order.
    pub fn tensor_names(&self) -> Vec<String> {
        Params::layout(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Replaces one tensor's values (row-major). Used to build hand-rigged
    /// models for tests and experiments.
    pub fn set_tensor(&mut self, name: &str, values: &[f32]) -> Result<(), ModelError> {
        let mut tensors = self.params.tensors();
        let slot = tensors
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| ModelError::Shape(format!("no tensor named {name}")))?;
        if slot.2.len() != values.len() {
            return Err(ModelError::Shape(format!(
                "tensor {name} has {} values, got {}",
                slot.2.len(),
                values.len()
            )));
        }
        slot.2 = values.iter().map(|&v| v as f64).collect();
        let data = tensors.into_iter().map(|(_, _, v)| v).collect();
        self.params = Params::from_tensors(&self.config, data);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub(crate) fn params(&self) -> &Params {
        &self.params
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// SHA-256 over the canonical weight payload, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, _, values) in self.params.tensors() {
            hasher.update(name.as_bytes());
            for v in values {
                hasher.update((v as f32).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_context {
            return Err(ModelError::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Output head applied to one residual vector: `W_u · norm_final(h)`.
    pub fn head_logits(&self, h: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        if h.len() != self.config.d_model {
            return Err(ModelError::Shape(format!(
                "hidden vector has width {}, model width is {}",
                h.len(),
                self.config.d_model
            )));
        }
        let normed = self.params.final_norm.apply_vec(h);
        Ok(self.params.unembed.dot(&normed))
    }

    /// Runs the full causal forward pass. Returns every layer's output and
    /// the next-token logits at the last position.
    pub fn forward(&self, tokens: &[u32]) -> Result<(HiddenStates, Array1<f64>), ModelError> {
        self.check_tokens(tokens)?;
        let p = &self.params;
        let t = tokens.len();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::<f64>::zeros((t, d));
        for (pos, (&tok, mut row)) in tokens.iter().zip(x.rows_mut()).enumerate() {
            row.assign(&p.tok_embed.row(tok as usize));
            row += &p.pos_embed.row(pos);
        }

        let mut outputs = Vec::with_capacity(self.config.n_layers);
        for layer in &p.layers {
            let a = layer.attn_norm.apply_rows(&x);
            let q = a.dot(&layer.wq.t());
            let k = a.dot(&layer.wk.t());
            let v = a.dot(&layer.wv.t());
            let mut heads = Array2::<f64>::zeros((t, d));
            for h in 0..self.config.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                causal_softmax(&mut scores);
                heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            }
            x += &heads.dot(&layer.wo.t());

            let m = layer.mlp_norm.apply_rows(&x);
            let mut u = m.dot(&layer.w_up.t());
            u += &layer.b_up;
            u.mapv_inplace(gelu);
            let mut down = u.dot(&layer.w_down.t());
            down += &layer.b_down;
            x += &down;
            outputs.push(x.clone());
        }

        let hidden = HiddenStates { layers: outputs };
        let last = hidden
            .last(self.config.n_layers)
            .expect("non-empty sequence");
        let logits = self.head_logits(last)?;
        Ok((hidden, logits))
    }

    /// Greedy continuation of `prompt`, at most `max_new` tokens, stopping
    /// before `eos`. The stop token itself is not returned.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>, ModelError> {
        self.greedy_decode_until(prompt, max_new, &[EOS])
    }

    /// Like [`greedy_decode`](Self::greedy_decode) with an explicit stop set.
    pub fn greedy_decode_until(
        &self,
        prompt: &[u32],
        max_new: usize,
        stop: &[u32],
    ) -> Result<Vec<u32>, ModelError> {
        self.check_room(prompt, max_new)?;
        let mut context = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let (_, logits) = self.forward(&context)?;
            let next = argmax(logits.view());
            if stop.contains(&next) {
                break;
            }
            out.push(next);
            context.push(next);
        }
        Ok(out)
    }

    pub(crate) fn check_room(&self, prompt: &[u32], max_new: usize) -> Result<(), ModelError> {
        self.check_tokens(prompt)?;
        // the last generated token never needs to be fed back
        let needed = prompt.len() + max_new.saturating_sub(1);
        if needed > self.config.max_context {
            return Err(ModelError::ContextOverflow {
                len: needed,
                max: self.config.max_context,
            });
        }
        Ok(())
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> u32 {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best as u32
}

/// Softmax in `f64` with max subtraction.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}
