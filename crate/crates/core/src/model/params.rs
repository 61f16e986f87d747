//! Learned weight tensors and the canonical tensor traversal used by the
//! optimizer, the checkpoint writer and the gradient checker.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Role};
use super::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[in, out]`; applied as `y = x . w + b`.
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub ln1: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
    pub ln2: LayerNorm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<F> {
    Generator {
        /// hidden -> embedding projection feeding the tied output matrix.
        proj: Linear<F>,
        ln: LayerNorm<F>,
        /// Output bias over the vocabulary; weights are the token embeddings.
        out_bias: Array1<F>,
    },
    Discriminator {
        tok_dense: Linear<F>,
        tok_out: Linear<F>,
        seq_dense: Linear<F>,
        seq_out: Linear<F>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub token_embeddings: Array2<F>,
    pub position_embeddings: Array2<F>,
    pub emb_ln: LayerNorm<F>,
    pub emb_proj: Option<Linear<F>>,
    pub layers: Vec<EncoderLayer<F>>,
    pub head: Head<F>,
}

pub enum TensorRef<'a, F> {
    One(&'a Array1<F>),
    Two(&'a Array2<F>),
}

pub enum TensorMut<'a, F> {
    One(&'a mut Array1<F>),
    Two(&'a mut Array2<F>),
}

impl<F: Scalar> Linear<F> {
    fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }
}

impl<F: Scalar> LayerNorm<F> {
    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

impl<F: Scalar> ModelParams<F> {
    /// All-zero parameters with shapes derived from the config; also the
    /// shape of a gradient accumulator.
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.embedding_size;
        let h = config.hidden_size;
        let layers = (0..config.num_hidden_layers)
            .map(|_| EncoderLayer {
                wq: Linear::zeros(h, h),
                wk: Linear::zeros(h, h),
                wv: Linear::zeros(h, h),
                wo: Linear::zeros(h, h),
                ln1: LayerNorm::zeros(h),
                ff1: Linear::zeros(h, config.intermediate_size),
                ff2: Linear::zeros(config.intermediate_size, h),
                ln2: LayerNorm::zeros(h),
            })
            .collect();
        let head = match config.role {
            Role::Generator => Head::Generator {
                proj: Linear::zeros(h, e),
                ln: LayerNorm::zeros(e),
                out_bias: Array1::zeros(config.vocab_size),
            },
            Role::Discriminator => Head::Discriminator {
                tok_dense: Linear::zeros(h, h),
                tok_out: Linear::zeros(h, 1),
                seq_dense: Linear::zeros(h, h),
                seq_out: Linear::zeros(h, 1),
            },
        };
        ModelParams {
            config: config.clone(),
            token_embeddings: Array2::zeros((config.vocab_size, e)),
            position_embeddings: Array2::zeros((config.max_position, e)),
            emb_ln: LayerNorm::zeros(e),
            emb_proj: (e != h).then(|| Linear::zeros(e, h)),
            layers,
            head,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            n += match t {
                TensorRef::One(a) => a.len(),
                TensorRef::Two(a) => a.len(),
            }
        });
        n
    }

    /// Visits every tensor in a fixed canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, TensorRef<'_, F>)) {
        f("token_embeddings", TensorRef::Two(&self.token_embeddings));
        f("position_embeddings", TensorRef::Two(&self.position_embeddings));
        f("emb_ln.gamma", TensorRef::One(&self.emb_ln.gamma));
        f("emb_ln.beta", TensorRef::One(&self.emb_ln.beta));
        if let Some(p) = &self.emb_proj {
            f("emb_proj.w", TensorRef::Two(&p.w));
            f("emb_proj.b", TensorRef::One(&p.b));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let lin = |name: &str, l: &Linear<F>, f: &mut dyn FnMut(&str, TensorRef<'_, F>)| {
                f(&format!("layer{i}.{name}.w"), TensorRef::Two(&l.w));
                f(&format!("layer{i}.{name}.b"), TensorRef::One(&l.b));
            };
            lin("wq", &layer.wq, f);
            lin("wk", &layer.wk, f);
            lin("wv", &layer.wv, f);
            lin("wo", &layer.wo, f);
            f(&format!("layer{i}.ln1.gamma"), TensorRef::One(&layer.ln1.gamma));
            f(&format!("layer{i}.ln1.beta"), TensorRef::One(&layer.ln1.beta));
            lin("ff1", &layer.ff1, f);
            lin("ff2", &layer.ff2, f);
            f(&format!("layer{i}.ln2.gamma"), TensorRef::One(&layer.ln2.gamma));
            f(&format!("layer{i}.ln2.beta"), TensorRef::One(&layer.ln2.beta));
        }
        match &self.head {
            Head::Generator { proj, ln, out_bias } => {
                f("head.proj.w", TensorRef::Two(&proj.w));
                f("head.proj.b", TensorRef::One(&proj.b));
                f("head.ln.gamma", TensorRef::One(&ln.gamma));
                f("head.ln.beta", TensorRef::One(&ln.beta));
                f("head.out_bias", TensorRef::One(out_bias));
            }
            Head::Discriminator {
                tok_dense,
                tok_out,
                seq_dense,
                seq_out,
            } => {
                f("head.tok_dense.w", TensorRef::Two(&tok_dense.w));
                f("head.tok_dense.b", TensorRef::One(&tok_dense.b));
                f("head.tok_out.w", TensorRef::Two(&tok_out.w));
                f("head.tok_out.b", TensorRef::One(&tok_out.b));
                f("head.seq_dense.w", TensorRef::Two(&seq_dense.w));
                f("head.seq_dense.b", TensorRef::One(&seq_dense.b));
                f("head.seq_out.w", TensorRef::Two(&seq_out.w));
                f("head.seq_out.b", TensorRef::One(&seq_out.b));
            }
        }
    }

    /// Mutable traversal, same canonical order as [`visit`](Self::visit).
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorMut<'_, F>)) {
        f("token_embeddings", TensorMut::Two(&mut self.token_embeddings));
        f("position_embeddings", TensorMut::Two(&mut self.position_embeddings));
        f("emb_ln.gamma", TensorMut::One(&mut self.emb_ln.gamma));
        f("emb_ln.beta", TensorMut::One(&mut self.emb_ln.beta));
        if let Some(p) = &mut self.emb_proj {
            f("emb_proj.w", TensorMut::Two(&mut p.w));
            f("emb_proj.b", TensorMut::One(&mut p.b));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let lin =
                |name: &str, l: &mut Linear<F>, f: &mut dyn FnMut(&str, TensorMut<'_, F>)| {
                    f(&format!("layer{i}.{name}.w"), TensorMut::Two(&mut l.w));
                    f(&format!("layer{i}.{name}.b"), TensorMut::One(&mut l.b));
                };
            lin("wq", &mut layer.wq, f);
            lin("wk", &mut layer.wk, f);
            lin("wv", &mut layer.wv, f);
            lin("wo", &mut layer.wo, f);
            f(&format!("layer{i}.ln1.gamma"), TensorMut::One(&mut layer.ln1.gamma));
            f(&format!("layer{i}.ln1.beta"), TensorMut::One(&mut layer.ln1.beta));
            lin("ff1", &mut layer.ff1, f);
            lin("ff2", &mut layer.ff2, f);
            f(&format!("layer{i}.ln2.gamma"), TensorMut::One(&mut layer.ln2.gamma));
            f(&format!("layer{i}.ln2.beta"), TensorMut::One(&mut layer.ln2.beta));
        }
        match &mut self.head {
            Head::Generator { proj, ln, out_bias } => {
                f("head.proj.w", TensorMut::Two(&mut proj.w));
                f("head.proj.b", TensorMut::One(&mut proj.b));
                f("head.ln.gamma", TensorMut::One(&mut ln.gamma));
                f("head.ln.beta", TensorMut::One(&mut ln.beta));
                f("head.out_bias", TensorMut::One(out_bias));
            }
            Head::Discriminator {
                tok_dense,
                tok_out,
                seq_dense,
                seq_out,
            } => {
                f("head.tok_dense.w", TensorMut::Two(&mut tok_dense.w));
                f("head.tok_dense.b", TensorMut::One(&mut tok_dense.b));
                f("head.tok_out.w", TensorMut::Two(&mut tok_out.w));
                f("head.tok_out.b", TensorMut::One(&mut tok_out.b));
                f("head.seq_dense.w", TensorMut::Two(&mut seq_dense.w));
                f("head.seq_dense.b", TensorMut::One(&mut seq_dense.b));
                f("head.seq_out.w", TensorMut::Two(&mut seq_out.w));
                f("head.seq_out.b", TensorMut::One(&mut seq_out.b));
            }
        }
    }

    /// Elementwise `self += other * scale`; shapes must match.
    pub fn add_scaled(&mut self, other: &ModelParams<F>, scale: F) {
        let mut flat: Vec<F> = Vec::new();
        other.visit(&mut |_, t| match t {
            TensorRef::One(a) => flat.extend(a.iter().copied()),
            TensorRef::Two(a) => flat.extend(a.iter().copied()),
        });
        let mut idx = 0usize;
        self.visit_mut(&mut |_, t| match t {
            TensorMut::One(a) => {
                for x in a.iter_mut() {
                    *x = *x + flat[idx] * scale;
                    idx += 1;
                }
            }
            TensorMut::Two(a) => {
                for x in a.iter_mut() {
                    *x = *x + flat[idx] * scale;
                    idx += 1;
                }
            }
        });
    }

    /// Converts the scalar type elementwise via `f64`.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut target = ModelParams::<G>::zeros(&self.config);
        let mut flat: Vec<f64> = Vec::new();
        self.visit(&mut |_, t| match t {
            TensorRef::One(a) => flat.extend(a.iter().map(|x| x.as_f64())),
            TensorRef::Two(a) => flat.extend(a.iter().map(|x| x.as_f64())),
        });
        let mut idx = 0usize;
        target.visit_mut(&mut |_, t| match t {
            TensorMut::One(a) => {
                for x in a.iter_mut() {
                    *x = G::of_f64(flat[idx]);
                    idx += 1;
                }
            }
            TensorMut::Two(a) => {
                for x in a.iter_mut() {
                    *x = G::of_f64(flat[idx]);
                    idx += 1;
                }
            }
        });
        target
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| match t {
            TensorRef::One(a) => ok &= a.iter().all(|x| x.is_finite()),
            TensorRef::Two(a) => ok &= a.iter().all(|x| x.is_finite()),
        });
        ok
    }
}

/// Truncated-normal initialization (std 0.02, resampled beyond two
/// standard deviations); biases zero, normalization scales one.
/// Deterministic given the seed.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> ModelParams<F> {
    let mut params = ModelParams::<F>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    let mut sample = move || loop {
        let x = normal.sample(&mut rng);
        if x.abs() <= 0.04 {
            return F::of_f64(x);
        }
    };
    params.visit_mut(&mut |name, t| {
        let is_weight = !name.ends_with(".b")
            && !name.ends_with("gamma")
            && !name.ends_with("beta")
            && !name.ends_with("out_bias");
        match t {
            TensorMut::One(a) => {
                if name.ends_with("gamma") {
                    a.fill(F::one());
                } else if is_weight {
                    for x in a.iter_mut() {
                        *x = sample();
                    }
                }
            }
            TensorMut::Two(a) => {
                if is_weight {
                    for x in a.iter_mut() {
                        *x = sample();
                    }
                }
            }
        }
    });
    params
}

#[cfg(test)]
mod tests {
    use super::super::config::SizePreset;
    use super::*;

    #[test]
    fn init_deterministic() {
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, 100, 32);
        let a: ModelParams<f32> = init_params(&config, 7);
        let b: ModelParams<f32> = init_params(&config, 7);
        assert_eq!(a, b);
        let c: ModelParams<f32> = init_params(&config, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_config_arithmetic() {
        for role in [Role::Discriminator, Role::Generator] {
            let config = ModelConfig::preset(SizePreset::Miniature, role, 120, 32);
            let params: ModelParams<f64> = ModelParams::zeros(&config);
            assert_eq!(params.param_count(), config.param_count());
        }
    }

    #[test]
    fn visit_orders_agree() {
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Generator, 50, 16);
        let mut params: ModelParams<f32> = init_params(&config, 3);
        let mut names_a = Vec::new();
        params.visit(&mut |n, _| names_a.push(n.to_string()));
        let mut names_b = Vec::new();
        params.visit_mut(&mut |n, _| names_b.push(n.to_string()));
        assert_eq!(names_a, names_b);
    }
}
