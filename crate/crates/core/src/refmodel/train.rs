//! Next-token cross-entropy trainer for the reference model.
//!
//! Full backpropagation through every block, Adam updates, and gradient
//! clipping. Master weights are kept in `f64` during training and rounded to
//! `f32` when the bundle is rebuilt. Training is deterministic for a fixed
//! seed.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    causal_softmax, gelu, gelu_grad, LayerParams, ModelBundle, ModelError, NormKind, NormParams,
    Params, NORM_EPS,
};

/// One training sequence. The loss covers predictions of
/// `tokens[loss_start..]`, each from the logits at the previous position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_start: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate at the end of training, as a fraction of the initial
    /// rate (linear decay).
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            final_lr_fraction: 0.1,
            batch_size: 8,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean per-token loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl NormParams {
    fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            gain: Array1::zeros(self.gain.len()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.gain.as_slice().expect("contiguous")];
        if let Some(b) = &self.bias {
            v.push(b.as_slice().expect("contiguous"));
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.gain.as_slice_mut().expect("contiguous")];
        if let Some(b) = &mut self.bias {
            v.push(b.as_slice_mut().expect("contiguous"));
        }
        v
    }
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            attn_norm: self.attn_norm.zeros_like(),
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
            mlp_norm: self.mlp_norm.zeros_like(),
            w_up: Array2::zeros(self.w_up.raw_dim()),
            b_up: Array1::zeros(self.b_up.len()),
            w_down: Array2::zeros(self.w_down.raw_dim()),
            b_down: Array1::zeros(self.b_down.len()),
        }
    }
}

impl Params {
    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            tok_embed: Array2::zeros(self.tok_embed.raw_dim()),
            pos_embed: Array2::zeros(self.pos_embed.raw_dim()),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            final_norm: self.final_norm.zeros_like(),
            unembed: Array2::zeros(self.unembed.raw_dim()),
        }
    }

    /// Every parameter buffer, in [`Params::tensors`] order.
    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.tok_embed.as_slice().expect("contiguous"),
            self.pos_embed.as_slice().expect("contiguous"),
        ];
        for l in &self.layers {
            v.extend(l.attn_norm.slices());
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                v.push(m.as_slice().expect("contiguous"));
            }
            v.extend(l.mlp_norm.slices());
            v.push(l.w_up.as_slice().expect("contiguous"));
            v.push(l.b_up.as_slice().expect("contiguous"));
            v.push(l.w_down.as_slice().expect("contiguous"));
            v.push(l.b_down.as_slice().expect("contiguous"));
        }
        v.extend(self.final_norm.slices());
        v.push(self.unembed.as_slice().expect("contiguous"));
        v
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.tok_embed.as_slice_mut().expect("contiguous"),
            self.pos_embed.as_slice_mut().expect("contiguous"),
        ];
        for l in &mut self.layers {
            v.extend(l.attn_norm.slices_mut());
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                v.push(m.as_slice_mut().expect("contiguous"));
            }
            v.extend(l.mlp_norm.slices_mut());
            v.push(l.w_up.as_slice_mut().expect("contiguous"));
            v.push(l.b_up.as_slice_mut().expect("contiguous"));
            v.push(l.w_down.as_slice_mut().expect("contiguous"));
            v.push(l.b_down.as_slice_mut().expect("contiguous"));
        }
        v.extend(self.final_norm.slices_mut());
        v.push(self.unembed.as_slice_mut().expect("contiguous"));
        v
    }
}

/// Per-row statistics needed to backpropagate through a norm.
struct NormCache {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

fn norm_forward(p: &NormParams, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut inv = Array1::zeros(t);
    for (i, row) in x.rows().into_iter().enumerate() {
        let (mean, var) = match p.kind {
            NormKind::Rms => (0.0, row.iter().map(|v| v * v).sum::<f64>() / d as f64),
            NormKind::Layer => {
                let mean = row.sum() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                (mean, var)
            }
        };
        let r = 1.0 / (var + NORM_EPS).sqrt();
        inv[i] = r;
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * r));
    }
    let mut y = &xhat * &p.gain;
    if let Some(b) = &p.bias {
        y += b;
    }
    (y, NormCache { xhat, inv })
}

fn norm_backward(
    p: &NormParams,
    cache: &NormCache,
    dy: &Array2<f64>,
    grad: &mut NormParams,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    if let Some(b) = &mut grad.bias {
        *b += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &p.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let proj = g.dot(&xh) / d;
        let centre = match p.kind {
            NormKind::Rms => 0.0,
            NormKind::Layer => g.sum() / d,
        };
        let r = cache.inv[i];
        for j in 0..g.len() {
            dx[[i, j]] = r * (g[j] - centre - xh[j] * proj);
        }
    }
    dx
}

struct LayerCache {
    attn_norm: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
    mlp_norm: NormCache,
    m: Array2<f64>,
    u_pre: Array2<f64>,
    u_act: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    normed_final: Array2<f64>,
}

fn forward_cached(p: &Params, n_heads: usize, tokens: &[u32]) -> (Array2<f64>, ForwardCache) {
    let t = tokens.len();
    let d = p.tok_embed.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = Array2::<f64>::zeros((t, d));
    for (pos, (&tok, mut row)) in tokens.iter().zip(x.rows_mut()).enumerate() {
        row.assign(&p.tok_embed.row(tok as usize));
        row += &p.pos_embed.row(pos);
    }
    let mut caches = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (a, attn_norm) = norm_forward(&layer.attn_norm, &x);
        let q = a.dot(&layer.wq.t());
        let k = a.dot(&layer.wk.t());
        let v = a.dot(&layer.wv.t());
        let mut heads = Array2::<f64>::zeros((t, d));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            causal_softmax(&mut scores);
            heads.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        x += &heads.dot(&layer.wo.t());
        let (m, mlp_norm) = norm_forward(&layer.mlp_norm, &x);
        let mut u_pre = m.dot(&layer.w_up.t());
        u_pre += &layer.b_up;
        let u_act = u_pre.mapv(gelu);
        let mut down = u_act.dot(&layer.w_down.t());
        down += &layer.b_down;
        x += &down;
        caches.push(LayerCache {
            attn_norm,
            a,
            q,
            k,
            v,
            probs,
            heads,
            mlp_norm,
            m,
            u_pre,
            u_act,
        });
    }
    let (normed_final, final_norm) = norm_forward(&p.final_norm, &x);
    (
        x,
        ForwardCache {
            layers: caches,
            final_norm,
            normed_final,
        },
    )
}

fn log_softmax_row(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z.mapv(|v| v - lse)
}

/// Summed cross-entropy of one example, and its gradient accumulated into
/// `grad` after scaling by `weight`.
pub(crate) fn loss_and_grad(
    p: &Params,
    n_heads: usize,
    example: &TrainExample,
    weight: f64,
    grad: &mut Params,
) -> (f64, usize) {
    let tokens = &example.tokens;
    let t = tokens.len();
    let start = example.loss_start.max(1);
    if start >= t {
        return (0.0, 0);
    }
    let d = p.tok_embed.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (_, cache) = forward_cached(p, n_heads, tokens);

    // head: rows start-1 .. t-1 predict tokens start .. t
    let rows = cache
        .normed_final
        .slice(s![start - 1..t - 1, ..])
        .to_owned();
    let logits = rows.dot(&p.unembed.t());
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, target) in tokens[start..].iter().enumerate() {
        let logp = log_softmax_row(logits.row(r));
        loss -= logp[*target as usize];
        let mut drow = logp.mapv(f64::exp);
        drow[*target as usize] -= 1.0;
        dlogits.row_mut(r).assign(&(drow * weight));
    }
    grad.unembed += &dlogits.t().dot(&rows);
    let mut dnormed = Array2::<f64>::zeros((t, d));
    dnormed
        .slice_mut(s![start - 1..t - 1, ..])
        .assign(&dlogits.dot(&p.unembed));
    let mut dx = norm_backward(
        &p.final_norm,
        &cache.final_norm,
        &dnormed,
        &mut grad.final_norm,
    );

    for (li, (layer, c)) in p.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grad.layers[li];
        // MLP
        g.w_down += &dx.t().dot(&c.u_act);
        g.b_down += &dx.sum_axis(Axis(0));
        let mut du = dx.dot(&layer.w_down);
        du.zip_mut_with(&c.u_pre, |dv, &u| *dv *= gelu_grad(u));
        g.w_up += &du.t().dot(&c.m);
        g.b_up += &du.sum_axis(Axis(0));
        let dm = du.dot(&layer.w_up);
        dx += &norm_backward(&layer.mlp_norm, &c.mlp_norm, &dm, &mut g.mlp_norm);

        // attention
        g.wo += &dx.t().dot(&c.heads);
        let dheads = dx.dot(&layer.wo);
        let mut dq = Array2::<f64>::zeros((t, d));
        let mut dk = Array2::<f64>::zeros((t, d));
        let mut dv = Array2::<f64>::zeros((t, d));
        for (h, probs) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_out = dheads.slice(cols);
            dv.slice_mut(cols).assign(&probs.t().dot(&d_out));
            let dp = d_out.dot(&c.v.slice(cols).t());
            let mut ds = probs * &dp;
            let row_dot = ds.sum_axis(Axis(1));
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let pr = probs.row(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v -= pr[j] * row_dot[i];
                }
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        g.wq += &dq.t().dot(&c.a);
        g.wk += &dk.t().dot(&c.a);
        g.wv += &dv.t().dot(&c.a);
        let da = dq.dot(&layer.wq) + dk.dot(&layer.wk) + dv.dot(&layer.wv);
        dx += &norm_backward(&layer.attn_norm, &c.attn_norm, &da, &mut g.attn_norm);
    }

    for (pos, (&tok, row)) in tokens.iter().zip(dx.rows()).enumerate() {
        let mut e = grad.tok_embed.row_mut(tok as usize);
        e += &row;
        let mut pe = grad.pos_embed.row_mut(pos);
        pe += &row;
    }
    (loss, t - start)
}

fn round_to_f32(p: &mut Params) {
    for s in p.slices_mut() {
        for v in s {
            *v = *v as f32 as f64;
        }
    }
}

/// Trains a copy of `bundle` on `examples` and returns the updated bundle.
pub fn train(
    bundle: &ModelBundle,
    examples: &[TrainExample],
    options: &TrainOptions,
) -> Result<(ModelBundle, TrainReport), ModelError> {
    for ex in examples {
        bundle.check_tokens(&ex.tokens)?;
    }
    let n_heads = bundle.config().n_heads;
    let mut params = bundle.params().clone();
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let batch = options.batch_size.max(1);
    let steps_per_epoch = examples.len().div_ceil(batch);
    let total_steps = (steps_per_epoch * options.epochs).max(1);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0usize;

    for epoch in 0..options.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(batch) {
            let n_tokens: usize = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    ex.tokens.len().saturating_sub(ex.loss_start.max(1))
                })
                .sum();
            if n_tokens == 0 {
                continue;
            }
            let weight = 1.0 / n_tokens as f64;
            let mut grad = params.zeros_like();
            for &i in chunk {
                let (loss, _) = loss_and_grad(&params, n_heads, &examples[i], weight, &mut grad);
                epoch_loss += loss;
            }
            epoch_tokens += n_tokens;

            let norm = grad
                .slices()
                .iter()
                .flat_map(|s| s.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            let clip = if norm > options.grad_clip {
                options.grad_clip / norm
            } else {
                1.0
            };
            step += 1;
            let progress = (step - 1) as f64 / total_steps as f64;
            let lr = options.learning_rate * (1.0 - (1.0 - options.final_lr_fraction) * progress);
            let bc1 = 1.0 - beta1_pow(beta1, step);
            let bc2 = 1.0 - beta1_pow(beta2, step);
            for ((p, g), (ms, vs)) in params
                .slices_mut()
                .into_iter()
                .zip(grad.slices())
                .zip(m.slices_mut().into_iter().zip(v.slices_mut()))
            {
                for i in 0..p.len() {
                    let gi = g[i] * clip;
                    ms[i] = beta1 * ms[i] + (1.0 - beta1) * gi;
                    vs[i] = beta2 * vs[i] + (1.0 - beta2) * gi * gi;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        report
            .epoch_losses
            .push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    report.steps = step;
    round_to_f32(&mut params);
    Ok((
        ModelBundle::from_parts(bundle.config().clone(), bundle.tokenizer().clone(), params),
        report,
    ))
}

fn beta1_pow(beta: f64, step: usize) -> f64 {
    beta.powi(step as i32)
}
