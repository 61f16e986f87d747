//! Forward evaluation and reverse-mode gradients for the encoder. One
//! sequence at a time; batching is a loop at the call site with gradient
//! accumulation, which keeps memory flat and lets padded positions be
//! dropped before any arithmetic happens.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Head, Linear, ModelParams};
use super::{ModelError, Scalar};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;
const LN_EPS: f64 = 1e-12;

pub fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    one / (one + (-x).exp())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<F>();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of_f64(SQRT_2_OVER_PI);
    let a = F::of_f64(GELU_COEFF);
    let half = F::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of_f64(SQRT_2_OVER_PI);
    let a = F::of_f64(GELU_COEFF);
    let half = F::of_f64(0.5);
    let three = F::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

struct LnCache<F> {
    x_hat: Array2<F>,
    inv_std: Array1<F>,
}

fn layer_norm<F: Scalar>(x: &Array2<F>, gamma: &Array1<F>, beta: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let d = F::of_f64(x.ncols() as f64);
    let eps = F::of_f64(LN_EPS);
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in x_hat.rows_mut().into_iter().enumerate() {
        let mean = row.iter().copied().sum::<F>() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).sum::<F>() / d;
        let istd = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * istd);
        inv_std[i] = istd;
    }
    let out = &x_hat * gamma + beta;
    (out, LnCache { x_hat, inv_std })
}

fn layer_norm_bwd<F: Scalar>(
    cache: &LnCache<F>,
    gamma: &Array1<F>,
    dy: &Array2<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    *dgamma += &(dy * &cache.x_hat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let d = F::of_f64(dy.ncols() as f64);
    let dx_hat = dy * gamma;
    let mut dx = dx_hat.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let dxh = dx_hat.row(i);
        let xh = cache.x_hat.row(i);
        let mean_dxh = dxh.iter().copied().sum::<F>() / d;
        let mean_dxh_xh = dxh
            .iter()
            .zip(xh.iter())
            .map(|(a, b)| *a * *b)
            .sum::<F>()
            / d;
        for (j, v) in row.iter_mut().enumerate() {
            *v = cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn linear_fwd<F: Scalar>(l: &Linear<F>, x: &Array2<F>) -> Array2<F> {
    x.dot(&l.w) + &l.b
}

fn linear_bwd<F: Scalar>(
    l: &Linear<F>,
    x: &Array2<F>,
    dy: &Array2<F>,
    grad: &mut Linear<F>,
) -> Array2<F> {
    grad.w += &x.t().dot(dy);
    grad.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

struct LayerCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    attn_mask: Option<Array2<F>>,
    ln1: LnCache<F>,
    ff_input: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
    ff_mask: Option<Array2<F>>,
    ln2: LnCache<F>,
}

enum HeadCache<F> {
    Generator {
        pre: Array2<F>,
        ln: LnCache<F>,
        z: Array2<F>,
    },
    Discriminator {
        tok_pre: Array2<F>,
        tok_act: Array2<F>,
        seq_pre: Array1<F>,
        seq_tanh: Array1<F>,
    },
}

#[derive(Debug, Clone)]
pub enum HeadOutput<F> {
    /// Per-position vocabulary logits, `[len, vocab]`.
    Generator { logits: Array2<F> },
    /// Per-position replaced logits plus one pooled sequence logit.
    Discriminator { token_logits: Array1<F>, seq_logit: F },
}

/// Upstream gradients on the head outputs.
pub enum HeadGrads<F> {
    Generator { d_logits: Array2<F> },
    Discriminator { d_token_logits: Array1<F>, d_seq_logit: F },
}

pub struct Forward<F> {
    pub head: HeadOutput<F>,
    pub hidden: Array2<F>,
    ids: Vec<usize>,
    emb_mask: Option<Array2<F>>,
    emb_ln: LnCache<F>,
    proj_input: Array2<F>,
    layers: Vec<LayerCache<F>>,
    head_cache: HeadCache<F>,
}

fn dropout_mask<F: Scalar>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Array2<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::of_f64(1.0 / (1.0 - p));
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    }))
}

fn apply_mask<F: Scalar>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x = &*x * m;
    }
}

/// Runs the encoder and head over one token id sequence, keeping every
/// intermediate needed by [`backward`]. Pass an RNG to enable dropout;
/// `None` evaluates deterministically.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    ids: &[u32],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<F>, ModelError> {
    let config = &params.config;
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > config.max_position {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max: config.max_position,
        });
    }
    for &id in ids {
        if id as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
    }
    let len = ids.len();
    let e = config.embedding_size;
    let heads = config.num_attention_heads;
    let head_dim = config.head_dim();
    let scale = F::of_f64(1.0 / (head_dim as f64).sqrt());
    let p = config.dropout;

    let mut emb = Array2::zeros((len, e));
    for (pos, &id) in ids.iter().enumerate() {
        let row = &params.token_embeddings.row(id as usize)
            + &params.position_embeddings.row(pos);
        emb.row_mut(pos).assign(&row);
    }
    let (mut normed, emb_ln) = layer_norm(&emb, &params.emb_ln.gamma, &params.emb_ln.beta);
    let emb_mask = dropout_mask((len, e), p, rng.as_deref_mut());
    apply_mask(&mut normed, &emb_mask);
    let proj_input = normed.clone();
    let mut hidden = match &params.emb_proj {
        Some(proj) => linear_fwd(proj, &normed),
        None => normed.clone(),
    };

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for (layer_index, layer) in params.layers.iter().enumerate() {
        let input = hidden.clone();
        let q = linear_fwd(&layer.wq, &input);
        let k = linear_fwd(&layer.wk, &input);
        let v = linear_fwd(&layer.wv, &input);
        let mut ctx = Array2::zeros((len, q.ncols()));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let scores = qh.dot(&kh.t()).mapv(|x| x * scale);
            let ph = softmax_rows(&scores);
            ctx.slice_mut(s![.., cols]).assign(&ph.dot(&vh));
            probs.push(ph);
        }
        let mut attn_out = linear_fwd(&layer.wo, &ctx);
        let attn_mask = dropout_mask(attn_out.dim(), p, rng.as_deref_mut());
        apply_mask(&mut attn_out, &attn_mask);
        let (after_attn, ln1) =
            layer_norm(&(&input + &attn_out), &layer.ln1.gamma, &layer.ln1.beta);
        let ff_input = after_attn.clone();
        let ff_pre = linear_fwd(&layer.ff1, &ff_input);
        let ff_act = ff_pre.mapv(gelu);
        let mut ff_out = linear_fwd(&layer.ff2, &ff_act);
        let ff_mask = dropout_mask(ff_out.dim(), p, rng.as_deref_mut());
        apply_mask(&mut ff_out, &ff_mask);
        let (out, ln2) = layer_norm(&(&ff_input + &ff_out), &layer.ln2.gamma, &layer.ln2.beta);
        if !out.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite { layer: layer_index });
        }
        hidden = out;
        layer_caches.push(LayerCache {
            input,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln1,
            ff_input,
            ff_pre,
            ff_act,
            ff_mask,
            ln2,
        });
    }

    let (head, head_cache) = match &params.head {
        Head::Generator { proj, ln, out_bias } => {
            let pre = linear_fwd(proj, &hidden);
            let (z, ln_cache) = layer_norm(&pre.mapv(gelu), &ln.gamma, &ln.beta);
            let logits = z.dot(&params.token_embeddings.t()) + out_bias;
            (
                HeadOutput::Generator { logits },
                HeadCache::Generator { pre, ln: ln_cache, z },
            )
        }
        Head::Discriminator {
            tok_dense,
            tok_out,
            seq_dense,
            seq_out,
        } => {
            let tok_pre = linear_fwd(tok_dense, &hidden);
            let tok_act = tok_pre.mapv(gelu);
            let token_logits = linear_fwd(tok_out, &tok_act).column(0).to_owned();
            let cls = hidden.row(0).to_owned();
            let seq_pre = seq_dense.w.t().dot(&cls) + &seq_dense.b;
            let seq_tanh = seq_pre.mapv(F::tanh);
            let seq_logit = seq_out.w.column(0).dot(&seq_tanh) + seq_out.b[0];
            (
                HeadOutput::Discriminator {
                    token_logits,
                    seq_logit,
                },
                HeadCache::Discriminator {
                    tok_pre,
                    tok_act,
                    seq_pre,
                    seq_tanh,
                },
            )
        }
    };

    Ok(Forward {
        head,
        hidden,
        ids: ids.iter().map(|&i| i as usize).collect(),
        emb_mask,
        emb_ln,
        proj_input,
        layers: layer_caches,
        head_cache,
    })
}

/// Accumulates parameter gradients for one sequence into `grad`. The
/// upstream gradients are taken with respect to the raw head outputs
/// (logits), so any loss is applied outside.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    fwd: &Forward<F>,
    head_grads: &HeadGrads<F>,
    grad: &mut ModelParams<F>,
) {
    let config = &params.config;
    let heads = config.num_attention_heads;
    let head_dim = config.head_dim();
    let scale = F::of_f64(1.0 / (head_dim as f64).sqrt());
    let len = fwd.ids.len();

    let mut d_hidden: Array2<F> = match (&params.head, &fwd.head_cache, head_grads) {
        (
            Head::Generator { proj, ln, .. },
            HeadCache::Generator { pre, ln: ln_cache, z },
            HeadGrads::Generator { d_logits },
        ) => {
            let Head::Generator {
                proj: g_proj,
                ln: g_ln,
                out_bias: g_bias,
            } = &mut grad.head
            else {
                unreachable!()
            };
            *g_bias += &d_logits.sum_axis(Axis(0));
            grad.token_embeddings += &d_logits.t().dot(z);
            let dz = d_logits.dot(&params.token_embeddings);
            let d_act = layer_norm_bwd(ln_cache, &ln.gamma, &dz, &mut g_ln.gamma, &mut g_ln.beta);
            let d_pre = &d_act * &pre.mapv(gelu_grad);
            linear_bwd(proj, &fwd.hidden, &d_pre, g_proj)
        }
        (
            Head::Discriminator {
                tok_dense,
                tok_out,
                seq_dense,
                seq_out,
            },
            HeadCache::Discriminator {
                tok_pre,
                tok_act,
                seq_pre,
                seq_tanh,
            },
            HeadGrads::Discriminator {
                d_token_logits,
                d_seq_logit,
            },
        ) => {
            let Head::Discriminator {
                tok_dense: g_tok_dense,
                tok_out: g_tok_out,
                seq_dense: g_seq_dense,
                seq_out: g_seq_out,
            } = &mut grad.head
            else {
                unreachable!()
            };
            let d_tok_logits =
                Array2::from_shape_fn((len, 1), |(i, _)| d_token_logits[i]);
            let d_tok_act = linear_bwd(tok_out, tok_act, &d_tok_logits, g_tok_out);
            let d_tok_pre = &d_tok_act * &tok_pre.mapv(gelu_grad);
            let mut d_hidden = linear_bwd(tok_dense, &fwd.hidden, &d_tok_pre, g_tok_dense);

            let d = *d_seq_logit;
            g_seq_out.b[0] += d;
            for (j, g) in g_seq_out.w.column_mut(0).iter_mut().enumerate() {
                *g += d * seq_tanh[j];
            }
            let d_tanh = seq_out.w.column(0).mapv(|w| w * d);
            let d_seq_pre = &d_tanh * &seq_pre.mapv(|x| {
                let t = x.tanh();
                F::one() - t * t
            });
            g_seq_dense.b += &d_seq_pre;
            let cls = fwd.hidden.row(0);
            for (i, &c) in cls.iter().enumerate() {
                for (j, &g) in d_seq_pre.iter().enumerate() {
                    g_seq_dense.w[[i, j]] += c * g;
                }
            }
            let d_cls = seq_dense.w.dot(&d_seq_pre);
            let mut row = d_hidden.row_mut(0);
            row += &d_cls;
            d_hidden
        }
        _ => unreachable!("head shape mismatch"),
    };

    for ((layer, cache), g_layer) in params
        .layers
        .iter()
        .zip(&fwd.layers)
        .zip(&mut grad.layers)
        .rev()
    {
        let d_resid2 = layer_norm_bwd(
            &cache.ln2,
            &layer.ln2.gamma,
            &d_hidden,
            &mut g_layer.ln2.gamma,
            &mut g_layer.ln2.beta,
        );
        let mut d_ff_out = d_resid2.clone();
        apply_mask(&mut d_ff_out, &cache.ff_mask);
        let d_ff_act = linear_bwd(&layer.ff2, &cache.ff_act, &d_ff_out, &mut g_layer.ff2);
        let d_ff_pre = &d_ff_act * &cache.ff_pre.mapv(gelu_grad);
        let d_ff_input = linear_bwd(&layer.ff1, &cache.ff_input, &d_ff_pre, &mut g_layer.ff1);
        let d_after_attn = &d_resid2 + &d_ff_input;

        let d_resid1 = layer_norm_bwd(
            &cache.ln1,
            &layer.ln1.gamma,
            &d_after_attn,
            &mut g_layer.ln1.gamma,
            &mut g_layer.ln1.beta,
        );
        let mut d_attn_out = d_resid1.clone();
        apply_mask(&mut d_attn_out, &cache.attn_mask);
        let d_ctx = linear_bwd(&layer.wo, &cache.ctx, &d_attn_out, &mut g_layer.wo);

        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let ph = &cache.probs[h];
            let d_ctx_h = d_ctx.slice(s![.., cols.clone()]);
            dv.slice_mut(s![.., cols.clone()])
                .assign(&ph.t().dot(&d_ctx_h));
            let d_probs = d_ctx_h.dot(&vh.t());
            let mut d_scores = Array2::zeros(d_probs.dim());
            for i in 0..len {
                let p_row = ph.row(i);
                let dp_row = d_probs.row(i);
                let dot = p_row
                    .iter()
                    .zip(dp_row.iter())
                    .map(|(a, b)| *a * *b)
                    .sum::<F>();
                for j in 0..len {
                    d_scores[[i, j]] = p_row[j] * (dp_row[j] - dot) * scale;
                }
            }
            dq.slice_mut(s![.., cols.clone()])
                .assign(&d_scores.dot(&kh));
            dk.slice_mut(s![.., cols]).assign(&d_scores.t().dot(&qh));
        }
        let mut d_input = d_resid1;
        d_input += &linear_bwd(&layer.wq, &cache.input, &dq, &mut g_layer.wq);
        d_input += &linear_bwd(&layer.wk, &cache.input, &dk, &mut g_layer.wk);
        d_input += &linear_bwd(&layer.wv, &cache.input, &dv, &mut g_layer.wv);
        d_hidden = d_input;
    }

    let mut d_normed = match (&params.emb_proj, &mut grad.emb_proj) {
        (Some(proj), Some(g_proj)) => linear_bwd(proj, &fwd.proj_input, &d_hidden, g_proj),
        (None, None) => d_hidden,
        _ => unreachable!("projection shape mismatch"),
    };
    apply_mask(&mut d_normed, &fwd.emb_mask);
    let d_emb = layer_norm_bwd(
        &fwd.emb_ln,
        &params.emb_ln.gamma,
        &d_normed,
        &mut grad.emb_ln.gamma,
        &mut grad.emb_ln.beta,
    );
    for (pos, &id) in fwd.ids.iter().enumerate() {
        let row = d_emb.row(pos);
        let mut tok = grad.token_embeddings.row_mut(id);
        tok += &row;
        let mut p = grad.position_embeddings.row_mut(pos);
        p += &row;
    }
}

#[cfg(test)]
mod tests {
    use super::super::config::{ModelConfig, Role, SizePreset};
    use super::super::params::{init_params, TensorMut, TensorRef};
    use super::*;

    fn loss_of<FHead: Fn(&HeadOutput<f64>) -> f64>(
        params: &ModelParams<f64>,
        ids: &[u32],
        head_loss: &FHead,
    ) -> f64 {
        let fwd = forward(params, ids, None).unwrap();
        head_loss(&fwd.head)
    }

    fn grad_check<FHead, FGrad>(role: Role, head_loss: FHead, head_grad: FGrad)
    where
        FHead: Fn(&HeadOutput<f64>) -> f64,
        FGrad: Fn(&HeadOutput<f64>) -> HeadGrads<f64>,
    {
        let mut config = ModelConfig::preset(SizePreset::Miniature, role, 23, 12);
        config.dropout = 0.0;
        let params = init_params::<f64>(&config, 11);
        let ids: Vec<u32> = vec![3, 7, 1, 20, 5, 0, 14, 9];
        let fwd = forward(&params, &ids, None).unwrap();
        let mut grad = ModelParams::<f64>::zeros(&config);
        backward(&params, &fwd, &head_grad(&fwd.head), &mut grad);

        let mut tensor_shapes: Vec<(String, usize)> = Vec::new();
        params.visit(&mut |name, t| {
            let n = match t {
                TensorRef::One(a) => a.len(),
                TensorRef::Two(a) => a.len(),
            };
            tensor_shapes.push((name.to_string(), n));
        });

        let step = 1e-5;
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move |m: usize| {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as usize % m
        };
        let mut checked = 0usize;
        for (tname, n) in &tensor_shapes {
            for _ in 0..3 {
                let flat_idx = next(*n);
                let analytic = read_flat(&grad, tname, flat_idx);
                let mut plus = params.clone();
                bump_flat(&mut plus, tname, flat_idx, step);
                let mut minus = params.clone();
                bump_flat(&mut minus, tname, flat_idx, -step);
                let numeric =
                    (loss_of(&plus, &ids, &head_loss) - loss_of(&minus, &ids, &head_loss))
                        / (2.0 * step);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "{tname}[{flat_idx}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }

    fn read_flat(params: &ModelParams<f64>, tensor: &str, idx: usize) -> f64 {
        let mut out = f64::NAN;
        params.visit(&mut |name, t| {
            if name == tensor {
                out = match t {
                    TensorRef::One(a) => a[idx],
                    TensorRef::Two(a) => *a.iter().nth(idx).unwrap(),
                };
            }
        });
        out
    }

    fn bump_flat(params: &mut ModelParams<f64>, tensor: &str, idx: usize, delta: f64) {
        params.visit_mut(&mut |name, t| {
            if name == tensor {
                match t {
                    TensorMut::One(a) => a[idx] += delta,
                    TensorMut::Two(a) => *a.iter_mut().nth(idx).unwrap() += delta,
                }
            }
        });
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        grad_check(
            Role::Generator,
            |head| {
                let HeadOutput::Generator { logits } = head else {
                    panic!()
                };
                // Mean cross-entropy against a fixed target per position.
                let probs = softmax_rows(logits);
                let t = logits.nrows();
                -(0..t).map(|i| probs[[i, (i * 5) % logits.ncols()]].ln()).sum::<f64>() / t as f64
            },
            |head| {
                let HeadOutput::Generator { logits } = head else {
                    panic!()
                };
                let mut d = softmax_rows(logits);
                let t = logits.nrows();
                for i in 0..t {
                    d[[i, (i * 5) % logits.ncols()]] -= 1.0;
                }
                d.mapv_inplace(|x| x / t as f64);
                HeadGrads::Generator { d_logits: d }
            },
        );
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        grad_check(
            Role::Discriminator,
            |head| {
                let HeadOutput::Discriminator {
                    token_logits,
                    seq_logit,
                } = head
                else {
                    panic!()
                };
                // Mean token BCE (alternating labels) plus sequence BCE
                // against label 1.
                let t = token_logits.len() as f64;
                let tok = token_logits
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let y = (i % 2) as f64;
                        let p = sigmoid(l);
                        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                    })
                    .sum::<f64>()
                    / t;
                tok - sigmoid(*seq_logit).ln()
            },
            |head| {
                let HeadOutput::Discriminator {
                    token_logits,
                    seq_logit,
                } = head
                else {
                    panic!()
                };
                let t = token_logits.len() as f64;
                let d_tok = Array1::from_shape_fn(token_logits.len(), |i| {
                    (sigmoid(token_logits[i]) - (i % 2) as f64) / t
                });
                HeadGrads::Discriminator {
                    d_token_logits: d_tok,
                    d_seq_logit: sigmoid(*seq_logit) - 1.0,
                }
            },
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, 10, 4);
        let params = init_params::<f32>(&config, 1);
        assert!(matches!(
            forward(&params, &[], None),
            Err(ModelError::EmptySequence)
        ));
        assert!(matches!(
            forward(&params, &[1, 2, 3, 4, 5], None),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(
            forward(&params, &[10], None),
            Err(ModelError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_zero_matches_eval() {
        use rand::SeedableRng;
        let mut config = ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, 15, 8);
        config.dropout = 0.0;
        let params = init_params::<f32>(&config, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = forward(&params, &[1, 4, 2], Some(&mut rng)).unwrap();
        let b = forward(&params, &[1, 4, 2], None).unwrap();
        match (&a.head, &b.head) {
            (
                HeadOutput::Discriminator { token_logits: ta, seq_logit: sa },
                HeadOutput::Discriminator { token_logits: tb, seq_logit: sb },
            ) => {
                assert_eq!(ta, tb);
                assert_eq!(sa, sb);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn trimmed_padding_is_a_prefix_invariant() {
        // Hidden states for a prefix do not depend on what would follow,
        // because callers strip padding before calling forward. Check the
        // weaker direct property: same ids give same outputs.
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Generator, 30, 16);
        let params = init_params::<f64>(&config, 5);
        let a = forward(&params, &[3, 1, 4, 1, 5], None).unwrap();
        let b = forward(&params, &[3, 1, 4, 1, 5], None).unwrap();
        let (HeadOutput::Generator { logits: la }, HeadOutput::Generator { logits: lb }) =
            (&a.head, &b.head)
        else {
            panic!()
        };
        assert_eq!(la, lb);
    }
}
