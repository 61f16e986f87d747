//! Training phases: replaced-token-detection pretraining of the
//! generator/discriminator pair, focal-loss fine-tuning of the sequence
//! classifier on an imbalanced benign/obfuscated dataset, and the
//! correction pass that retrains on analyst-labeled detections. Also owns
//! dataset assembly, the decoupled-weight-decay optimizer and the
//! loss-peak diagnostics.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, ExecutionLog, Label};
use crate::model::{
    backward, forward, sigmoid, softmax_rows, Forward, HeadGrads, HeadOutput, ModelError,
    ModelParams, Role, TensorMut, TensorRef,
};
use crate::normalizer::normalize;
use crate::obfugen::ObfuscatedSample;
use crate::tokenizer::{encode, TokenizerModel};

const FOCAL_EPS: f64 = 1e-12;
const SPIKE_WINDOW: usize = 50;
const SPIKE_FACTOR: f64 = 5.0;
const RATIO_CAP: f64 = 30.0;
const MARKER_DENSITY_THRESHOLD: f64 = 0.05;
const RARE_TECHNIQUE_THRESHOLD: usize = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(
        "imbalance ratio {requested} exceeds the {cap}:1 stability cap; pass the override to proceed"
    )]
    RatioTooHigh { requested: f64, cap: f64 },
    #[error("no positive samples available for correction")]
    NoPositives,
    #[error("generator/discriminator pair mismatch: {0}")]
    BadPair(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive moment estimation with decoupled weight decay. Normalization
/// scales/offsets and biases are excluded from decay.
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<(usize, bool)>,
    t: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

fn tensor_decays(name: &str) -> bool {
    !name.ends_with(".b")
        && !name.ends_with("gamma")
        && !name.ends_with("beta")
        && !name.ends_with("out_bias")
}

impl AdamW {
    pub fn new(shape_of: &ModelParams<f32>, learning_rate: f64, weight_decay: f64) -> Self {
        let mut total = 0;
        let mut decay = Vec::new();
        shape_of.visit(&mut |name, t| {
            let n = match t {
                TensorRef::One(a) => a.len(),
                TensorRef::Two(a) => a.len(),
            };
            total += n;
            decay.push((n, tensor_decays(name)));
        });
        AdamW {
            m: vec![0.0; total],
            v: vec![0.0; total],
            decay,
            t: 0,
            learning_rate,
            weight_decay,
        }
    }

    /// One update with the per-step learning-rate multiplier applied.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr_scale: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let lr = self.learning_rate * lr_scale;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);

        let mut g_flat: Vec<f32> = Vec::with_capacity(self.m.len());
        grads.visit(&mut |_, t| match t {
            TensorRef::One(a) => g_flat.extend(a.iter()),
            TensorRef::Two(a) => g_flat.extend(a.iter()),
        });

        let mut decay_flat = self.decay.iter();
        let mut region = decay_flat.next().copied();
        let mut region_left = region.map(|(n, _)| n).unwrap_or(0);
        let mut idx = 0usize;
        let m = &mut self.m;
        let v = &mut self.v;
        params.visit_mut(&mut |_, t| {
            let mut each = |x: &mut f32| {
                while region_left == 0 {
                    region = decay_flat.next().copied();
                    region_left = region.map(|(n, _)| n).unwrap_or(0);
                }
                let decays = region.map(|(_, d)| d).unwrap_or(false);
                let g = g_flat[idx] as f64;
                let m_new = B1 * m[idx] as f64 + (1.0 - B1) * g;
                let v_new = B2 * v[idx] as f64 + (1.0 - B2) * g * g;
                m[idx] = m_new as f32;
                v[idx] = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let mut update = m_hat / (v_hat.sqrt() + EPS);
                if decays {
                    update += self.weight_decay * *x as f64;
                }
                *x = (*x as f64 - lr * update) as f32;
                idx += 1;
                region_left -= 1;
            };
            match t {
                TensorMut::One(a) => a.iter_mut().for_each(&mut each),
                TensorMut::Two(a) => a.iter_mut().for_each(&mut each),
            }
        });
    }
}

/// Linear warmup over the leading fraction of steps, then the base rate.
pub fn lr_multiplier(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_fraction).ceil() as usize).max(1);
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Corruption

/// One corrupted sequence ready for the discriminator, plus the generator
/// forward pass it came from (so the caller can backpropagate through it).
pub struct Corruption {
    pub masked_ids: Vec<u32>,
    pub corrupted_ids: Vec<u32>,
    pub masked_positions: Vec<usize>,
    /// Per position: true iff the generator sample differs from the
    /// original token. A correct sample counts as original.
    pub replaced: Vec<bool>,
    pub gen_forward: Forward<f32>,
}

/// Masks a fraction of non-special positions, samples replacements from
/// the generator's output distribution and labels each position as
/// original or replaced. Returns `None` when no position is maskable.
pub fn mask_and_corrupt(
    ids: &[u32],
    generator: &ModelParams<f32>,
    specials: &[u32],
    mask_fraction: f64,
    mask_id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Corruption>, ModelError> {
    let eligible: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| !specials.contains(id))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Ok(None);
    }
    let n_mask = ((eligible.len() as f64 * mask_fraction).round() as usize)
        .max(1)
        .min(eligible.len());
    let mut positions = eligible;
    positions.shuffle(rng);
    positions.truncate(n_mask);
    positions.sort_unstable();

    let mut masked_ids = ids.to_vec();
    for &p in &positions {
        masked_ids[p] = mask_id;
    }
    let gen_forward = forward(generator, &masked_ids, Some(rng))?;
    let HeadOutput::Generator { logits } = &gen_forward.head else {
        return Err(ModelError::NonFinite { layer: usize::MAX });
    };
    let mut corrupted_ids = ids.to_vec();
    let mut replaced = vec![false; ids.len()];
    for &p in &positions {
        let row = logits.row(p);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&l| ((l - max) as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut sampled = exps.len() - 1;
        for (tok, &e) in exps.iter().enumerate() {
            if draw < e {
                sampled = tok;
                break;
            }
            draw -= e;
        }
        corrupted_ids[p] = sampled as u32;
        replaced[p] = sampled as u32 != ids[p];
    }
    Ok(Some(Corruption {
        masked_ids,
        corrupted_ids,
        masked_positions: positions,
        replaced,
        gen_forward,
    }))
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub mask_fraction: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the discriminator loss in the joint objective.
    pub lambda: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            mask_fraction: 0.15,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            batch_size: 32,
            steps: 0,
            lambda: 50.0,
            warmup_fraction: 0.06,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub generator: ModelParams<f32>,
    pub discriminator: ModelParams<f32>,
    pub metrics: Vec<StepMetric>,
    pub skipped_short: usize,
}

/// Joint replaced-token-detection pretraining. The generator fills masked
/// positions; the discriminator labels every token of the corrupted
/// sequence as original or replaced. Token and position embeddings are
/// shared between the two models whenever their embedding sizes match.
pub fn pretrain(
    mut generator: ModelParams<f32>,
    mut discriminator: ModelParams<f32>,
    corpus: &[Vec<u32>],
    specials: &[u32],
    mask_id: u32,
    spec: &PretrainSpec,
) -> Result<PretrainOutcome, TrainError> {
    if generator.config.role != Role::Generator || discriminator.config.role != Role::Discriminator
    {
        return Err(TrainError::BadPair("roles are swapped or equal".into()));
    }
    if generator.config.vocab_size != discriminator.config.vocab_size
        || generator.config.max_position != discriminator.config.max_position
    {
        return Err(TrainError::BadPair(
            "vocab or position sizes differ".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let shared = generator.config.embedding_size == discriminator.config.embedding_size;
    if shared {
        discriminator.token_embeddings = generator.token_embeddings.clone();
        discriminator.position_embeddings = generator.position_embeddings.clone();
    }

    let mut opt_gen = AdamW::new(&generator, spec.learning_rate, spec.weight_decay);
    let mut opt_disc = AdamW::new(&discriminator, spec.learning_rate, spec.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut metrics = Vec::with_capacity(spec.steps);
    let mut skipped_short = 0usize;

    for step in 0..spec.steps {
        let mut gen_grad = ModelParams::<f32>::zeros(&generator.config);
        let mut disc_grad = ModelParams::<f32>::zeros(&discriminator.config);
        let mut gen_loss_sum = 0.0f64;
        let mut disc_loss_sum = 0.0f64;
        let mut masked_total = 0usize;
        let mut position_total = 0usize;
        let mut batch: Vec<(Vec<u32>, Corruption)> = Vec::with_capacity(spec.batch_size);
        while batch.len() < spec.batch_size {
            let ids = &corpus[order[cursor]];
            cursor += 1;
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            match mask_and_corrupt(ids, &generator, specials, spec.mask_fraction, mask_id, &mut rng)
                .map_err(|e| match e {
                    ModelError::NonFinite { .. } => TrainError::Divergence { step },
                    other => TrainError::Model(other),
                })? {
                Some(c) => batch.push((ids.clone(), c)),
                None => skipped_short += 1,
            }
        }
        for (_, c) in &batch {
            masked_total += c.masked_positions.len();
            position_total += c.corrupted_ids.len();
        }

        for (ids, corruption) in &batch {
            let HeadOutput::Generator { logits } = &corruption.gen_forward.head else {
                unreachable!()
            };
            let probs = softmax_rows(logits);
            let mut d_logits = Array2::<f32>::zeros(logits.dim());
            for &p in &corruption.masked_positions {
                let target = ids[p] as usize;
                let prob = probs[[p, target]].max(1e-30);
                gen_loss_sum += -(prob as f64).ln();
                let mut row = d_logits.row_mut(p);
                row.assign(&probs.row(p));
                row[target] -= 1.0;
                row.mapv_inplace(|x| x / masked_total as f32);
            }
            backward(
                &generator,
                &corruption.gen_forward,
                &HeadGrads::Generator { d_logits },
                &mut gen_grad,
            );

            let disc_fwd = forward(&discriminator, &corruption.corrupted_ids, Some(&mut rng))
                .map_err(|e| match e {
                    ModelError::NonFinite { .. } => TrainError::Divergence { step },
                    other => TrainError::Model(other),
                })?;
            let HeadOutput::Discriminator { token_logits, .. } = &disc_fwd.head else {
                unreachable!()
            };
            let mut d_token = Array1::<f32>::zeros(token_logits.len());
            for (pos, &logit) in token_logits.iter().enumerate() {
                let y = if corruption.replaced[pos] { 1.0f64 } else { 0.0 };
                let p = sigmoid(logit as f64).clamp(1e-12, 1.0 - 1e-12);
                disc_loss_sum += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                d_token[pos] = ((p - y) * spec.lambda / position_total as f64) as f32;
            }
            backward(
                &discriminator,
                &disc_fwd,
                &HeadGrads::Discriminator {
                    d_token_logits: d_token,
                    d_seq_logit: 0.0,
                },
                &mut disc_grad,
            );
        }

        let gen_loss = gen_loss_sum / masked_total.max(1) as f64;
        let disc_loss = disc_loss_sum / position_total.max(1) as f64;
        let loss = gen_loss + spec.lambda * disc_loss;
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        let lr_scale = lr_multiplier(step, spec.steps, spec.warmup_fraction);

        if shared {
            gen_grad.token_embeddings += &disc_grad.token_embeddings;
            gen_grad.position_embeddings += &disc_grad.position_embeddings;
            disc_grad.token_embeddings.fill(0.0);
            disc_grad.position_embeddings.fill(0.0);
        }
        opt_gen.step(&mut generator, &gen_grad, lr_scale);
        opt_disc.step(&mut discriminator, &disc_grad, lr_scale);
        if shared {
            discriminator
                .token_embeddings
                .assign(&generator.token_embeddings);
            discriminator
                .position_embeddings
                .assign(&generator.position_embeddings);
        }

        metrics.push(StepMetric {
            step,
            loss,
            gen_loss,
            disc_loss,
            lr: spec.learning_rate * lr_scale,
        });
    }

    Ok(PretrainOutcome {
        generator,
        discriminator,
        metrics,
        skipped_short,
    })
}

/// Per-token replaced/original AUC of a discriminator over freshly
/// corrupted held-out sequences. Rank statistic, ties split.
pub fn disc_token_auc(
    discriminator: &ModelParams<f32>,
    generator: &ModelParams<f32>,
    corpus: &[Vec<u32>],
    specials: &[u32],
    mask_fraction: f64,
    mask_id: u32,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for ids in corpus {
        let Some(c) = mask_and_corrupt(ids, generator, specials, mask_fraction, mask_id, &mut rng)?
        else {
            continue;
        };
        let fwd = forward(discriminator, &c.corrupted_ids, None)?;
        let HeadOutput::Discriminator { token_logits, .. } = &fwd.head else {
            unreachable!()
        };
        for (pos, &logit) in token_logits.iter().enumerate() {
            if specials.contains(&c.corrupted_ids[pos]) && !c.replaced[pos] {
                continue;
            }
            scored.push((logit as f64, c.replaced[pos]));
        }
    }
    let positives = scored.iter().filter(|(_, y)| *y).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(0.5);
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum = 0.0f64;
    let mut i = 0usize;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &scored[i..j] {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

// ---------------------------------------------------------------------------
// Focal loss

/// FL(p_t) = -(1 - p_t)^gamma * ln(p_t), with p_t clamped to at least
/// 1e-12. Gamma 0 recovers plain cross-entropy.
pub fn focal_loss(p_t: f64, gamma: f64) -> f64 {
    let p = p_t.clamp(FOCAL_EPS, 1.0);
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Derivative of the focal loss with respect to the raw sequence logit,
/// for probability `p = sigmoid(logit)` and binary label `y`.
fn focal_logit_grad(p: f64, y: f64, gamma: f64) -> f64 {
    let p_t = (y * p + (1.0 - y) * (1.0 - p)).clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let d_pt = gamma * (1.0 - p_t).powf(gamma - 1.0) * p_t.ln() - (1.0 - p_t).powf(gamma) / p_t;
    let sign = 2.0 * y - 1.0;
    d_pt * sign * p * (1.0 - p)
}

// ---------------------------------------------------------------------------
// Fine-tuning dataset

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSample {
    pub raw: String,
    pub source_id: String,
    pub label: Label,
    pub technique: Option<String>,
    /// The pre-obfuscation command, when known. Used by the loss-peak
    /// taxonomy to spot samples labeled obfuscated but left unchanged.
    pub original: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSpec {
    pub gamma: f64,
    pub imbalance_ratio: f64,
    pub allow_high_ratio: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            gamma: 2.0,
            imbalance_ratio: 10.0,
            allow_high_ratio: false,
            learning_rate: 1e-4,
            epochs: 3,
            batch_size: 32,
            max_len: 64,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneDataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub warnings: Vec<String>,
}

impl FinetuneDataset {
    pub fn achieved_ratio(&self) -> f64 {
        let all = self.train.iter().chain(&self.test);
        let (mut benign, mut obf) = (0usize, 0usize);
        for s in all {
            match s.label {
                Label::Benign => benign += 1,
                Label::Obfuscated => obf += 1,
            }
        }
        benign as f64 / obf.max(1) as f64
    }
}

fn sample_to_labeled(s: &ObfuscatedSample, source_id: String) -> LabeledSample {
    LabeledSample {
        raw: s.obfuscated.clone(),
        source_id,
        label: Label::Obfuscated,
        technique: Some(s.technique.name().to_string()),
        original: Some(s.original.clone()),
    }
}

/// Assembles the imbalanced fine-tuning dataset from the three pools,
/// enforcing the target benign:obfuscated ratio, then splits a quarter
/// off as the test set with technique stratification preserved.
pub fn build_finetune_dataset(
    benign: &[ExecutionLog],
    artificial: &[ObfuscatedSample],
    real: &[ObfuscatedSample],
    spec: &FinetuneSpec,
    seed: u64,
) -> Result<FinetuneDataset, TrainError> {
    if spec.imbalance_ratio > RATIO_CAP && !spec.allow_high_ratio {
        return Err(TrainError::RatioTooHigh {
            requested: spec.imbalance_ratio,
            cap: RATIO_CAP,
        });
    }
    if benign.is_empty() || (artificial.is_empty() && real.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }
    let mut warnings = Vec::new();
    if real.is_empty() {
        warnings.push("real-world pool empty; using artificial samples only".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obf_budget = artificial.len() + real.len();
    let benign_possible = (benign.len() as f64 / spec.imbalance_ratio).floor() as usize;
    if obf_budget > benign_possible {
        warnings.push(format!(
            "benign pool supports only {benign_possible} obfuscated samples at ratio {}; trimming",
            spec.imbalance_ratio
        ));
        obf_budget = benign_possible.max(1);
    }
    let artificial_take = obf_budget.min(
        ((artificial.len() as f64 / (artificial.len() + real.len()) as f64) * obf_budget as f64)
            .round() as usize,
    );
    let real_take = (obf_budget - artificial_take).min(real.len());

    let mut pick = |pool: &[ObfuscatedSample], n: usize, tag: &str| -> Vec<LabeledSample> {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.iter()
            .enumerate()
            .map(|(k, &i)| sample_to_labeled(&pool[i], format!("{tag}-{k}")))
            .collect()
    };
    let mut samples: Vec<LabeledSample> = Vec::new();
    samples.extend(pick(artificial, artificial_take, "art"));
    samples.extend(pick(real, real_take, "real"));
    let obf_total = samples.len();

    let benign_n = ((obf_total as f64) * spec.imbalance_ratio).round() as usize;
    let mut bidx: Vec<usize> = (0..benign.len()).collect();
    bidx.shuffle(&mut rng);
    bidx.truncate(benign_n.min(benign.len()));
    for (k, &i) in bidx.iter().enumerate() {
        samples.push(LabeledSample {
            raw: benign[i].raw.clone(),
            source_id: format!("benign-{k}"),
            label: Label::Benign,
            technique: None,
            original: None,
        });
    }

    // Stratified quarter split: group by label and technique so every
    // technique appears in both partitions when it has enough samples.
    // Per-label test totals are a quarter exactly; technique strata get
    // their share by largest remainder, so small strata still contribute.
    let mut groups: HashMap<(Label, Option<String>), Vec<LabeledSample>> = HashMap::new();
    for s in samples {
        groups
            .entry((s.label, s.technique.clone()))
            .or_default()
            .push(s);
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [Label::Benign, Label::Obfuscated] {
        let label_keys: Vec<_> = keys.iter().filter(|(l, _)| *l == label).cloned().collect();
        let label_total: usize = label_keys.iter().map(|k| groups[k].len()).sum();
        let mut quotas: Vec<(usize, f64)> = label_keys
            .iter()
            .map(|k| {
                let exact = groups[k].len() as f64 / 4.0;
                (exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut assigned: usize = quotas.iter().map(|(n, _)| n).sum();
        let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
        by_remainder.sort_by(|&a, &b| quotas[b].1.partial_cmp(&quotas[a].1).unwrap());
        for &i in &by_remainder {
            if assigned >= label_total / 4 {
                break;
            }
            if quotas[i].0 < groups[&label_keys[i]].len() {
                quotas[i].0 += 1;
                assigned += 1;
            }
        }
        for (key, (test_n, _)) in label_keys.iter().zip(quotas) {
            let mut members = groups.remove(key).unwrap();
            members.shuffle(&mut rng);
            for (i, s) in members.into_iter().enumerate() {
                if i < test_n {
                    test.push(s);
                } else {
                    train.push(s);
                }
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(FinetuneDataset {
        train,
        test,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub benign: ClassMetrics,
    pub obfuscated: ClassMetrics,
    pub mean_train_loss: f64,
}

pub struct FinetuneOutcome {
    pub params: ModelParams<f32>,
    pub epoch_metrics: Vec<EpochMetrics>,
    /// Mean loss per batch, across all epochs in order.
    pub loss_trace: Vec<f64>,
    /// Train-set indices making up each batch, parallel to `loss_trace`.
    pub batch_members: Vec<Vec<usize>>,
}

/// Normalizes and encodes one command for the classifier.
pub fn encode_command(tokenizer: &TokenizerModel, raw: &str, max_len: usize) -> Vec<u32> {
    encode(tokenizer, &normalize(raw).text, max_len).ids
}

fn seq_probability(params: &ModelParams<f32>, ids: &[u32]) -> Result<f64, ModelError> {
    let fwd = forward(params, ids, None)?;
    let HeadOutput::Discriminator { seq_logit, .. } = fwd.head else {
        unreachable!()
    };
    Ok(sigmoid(seq_logit as f64))
}

fn eval_split(
    params: &ModelParams<f32>,
    encoded: &[(Vec<u32>, bool)],
) -> Result<(ClassMetrics, ClassMetrics), ModelError> {
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (ids, label) in encoded {
        let p = seq_probability(params, ids)?;
        match (p >= 0.5, *label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let safe = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let obfuscated = ClassMetrics {
        precision: safe(tp, tp + fp),
        recall: safe(tp, tp + fne),
        support: tp + fne,
    };
    let benign = ClassMetrics {
        precision: safe(tn, tn + fne),
        recall: safe(tn, tn + fp),
        support: tn + fp,
    };
    Ok((benign, obfuscated))
}

/// Trains the sequence head (and backbone) with focal loss. Returns the
/// trained parameters, per-epoch test metrics and the per-batch loss
/// trace for peak analysis.
pub fn finetune(
    mut params: ModelParams<f32>,
    tokenizer: &TokenizerModel,
    dataset: &FinetuneDataset,
    spec: &FinetuneSpec,
) -> Result<FinetuneOutcome, TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encode_all = |samples: &[LabeledSample]| -> Vec<(Vec<u32>, bool)> {
        samples
            .iter()
            .map(|s| {
                (
                    encode_command(tokenizer, &s.raw, spec.max_len),
                    s.label == Label::Obfuscated,
                )
            })
            .collect()
    };
    let train_enc = encode_all(&dataset.train);
    let test_enc = encode_all(&dataset.test);

    let mut opt = AdamW::new(&params, spec.learning_rate, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut loss_trace = Vec::new();
    let mut batch_members = Vec::new();
    let mut epoch_metrics = Vec::new();
    let batches_per_epoch = train_enc.len().div_ceil(spec.batch_size);
    let total_steps = batches_per_epoch * spec.epochs;
    let mut step = 0usize;

    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0f64;
        for chunk in order.chunks(spec.batch_size) {
            let mut grad = ModelParams::<f32>::zeros(&params.config);
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                let (ids, label) = &train_enc[i];
                // A non-finite activation means the weights themselves
                // blew up, which is divergence rather than bad input.
                let fwd = forward(&params, ids, Some(&mut rng)).map_err(|e| match e {
                    ModelError::NonFinite { .. } => TrainError::Divergence { step },
                    other => TrainError::Model(other),
                })?;
                let HeadOutput::Discriminator { seq_logit, .. } = fwd.head else {
                    unreachable!()
                };
                let y = if *label { 1.0f64 } else { 0.0 };
                let p = sigmoid(seq_logit as f64);
                let p_t = y * p + (1.0 - y) * (1.0 - p);
                batch_loss += focal_loss(p_t, spec.gamma);
                let d_seq = (focal_logit_grad(p, y, spec.gamma) / chunk.len() as f64) as f32;
                backward(
                    &params,
                    &fwd,
                    &HeadGrads::Discriminator {
                        d_token_logits: Array1::zeros(ids.len()),
                        d_seq_logit: d_seq,
                    },
                    &mut grad,
                );
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            let lr_scale = lr_multiplier(step, total_steps, 0.06);
            opt.step(&mut params, &grad, lr_scale);
            loss_trace.push(batch_loss);
            batch_members.push(chunk.to_vec());
            epoch_loss_sum += batch_loss;
            step += 1;
        }
        let (benign, obfuscated) = eval_split(&params, &test_enc)?;
        epoch_metrics.push(EpochMetrics {
            epoch,
            benign,
            obfuscated,
            mean_train_loss: epoch_loss_sum / batches_per_epoch as f64,
        });
    }

    Ok(FinetuneOutcome {
        params,
        epoch_metrics,
        loss_trace,
        batch_members,
    })
}

/// Counts loss spikes: batches whose loss exceeds `SPIKE_FACTOR` times
/// the median of the trailing `SPIKE_WINDOW` batches.
pub fn count_spikes(trace: &[f64]) -> usize {
    spike_indices(trace).len()
}

fn spike_indices(trace: &[f64]) -> Vec<usize> {
    let mut spikes = Vec::new();
    for i in 1..trace.len() {
        let start = i.saturating_sub(SPIKE_WINDOW);
        let mut window: Vec<f64> = trace[start..i].to_vec();
        window.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = window[window.len() / 2];
        if median > 0.0 && trace[i] > SPIKE_FACTOR * median {
            spikes.push(i);
        }
    }
    spikes
}

// ---------------------------------------------------------------------------
// Correction stage

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDetection {
    pub raw: String,
    pub source_id: String,
    pub category: Category,
}

pub struct CorrectionOutcome {
    pub params: ModelParams<f32>,
    pub changed: bool,
    pub positives: usize,
    pub supplemented: usize,
    pub negatives: usize,
    /// Techniques of the supplemented positives, for auditing recall impact.
    pub supplement_techniques: Vec<String>,
    pub warnings: Vec<String>,
}

/// Retrains the classifier on analyst-labeled detections. Obfuscated but
/// benign samples are relabeled negative together with non-obfuscated
/// ones; positives are supplemented from the fine-tuning obfuscated pool
/// until the negative:positive ratio reaches the imbalance target.
pub fn correct_stage(
    params: ModelParams<f32>,
    tokenizer: &TokenizerModel,
    labeled: &[LabeledDetection],
    supplement_pool: &[LabeledSample],
    spec: &FinetuneSpec,
) -> Result<CorrectionOutcome, TrainError> {
    if labeled.is_empty() {
        return Ok(CorrectionOutcome {
            params,
            changed: false,
            positives: 0,
            supplemented: 0,
            negatives: 0,
            supplement_techniques: Vec::new(),
            warnings: vec!["no labeled detections; classifier unchanged".to_string()],
        });
    }
    let mut train: Vec<LabeledSample> = Vec::new();
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for (i, d) in labeled.iter().enumerate() {
        let positive = d.category == Category::ObfuscatedMalicious;
        if positive {
            positives += 1;
        } else {
            negatives += 1;
        }
        train.push(LabeledSample {
            raw: d.raw.clone(),
            source_id: format!("labeled-{i}"),
            label: if positive {
                Label::Obfuscated
            } else {
                Label::Benign
            },
            technique: None,
            original: None,
        });
    }
    let supplement_pool: Vec<&LabeledSample> = supplement_pool
        .iter()
        .filter(|s| s.label == Label::Obfuscated)
        .collect();
    if positives == 0 && supplement_pool.is_empty() {
        return Err(TrainError::NoPositives);
    }

    let needed = ((negatives as f64 / spec.imbalance_ratio).ceil() as usize).saturating_sub(positives);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool_idx: Vec<usize> = (0..supplement_pool.len()).collect();
    pool_idx.shuffle(&mut rng);
    let supplemented = needed.min(supplement_pool.len());
    let mut warnings = Vec::new();
    if supplemented < needed {
        warnings.push(format!(
            "supplement pool exhausted: wanted {needed}, took {supplemented}"
        ));
    }
    let mut supplement_techniques = Vec::new();
    for &i in pool_idx.iter().take(supplemented) {
        if let Some(t) = supplement_pool[i].technique.clone() {
            supplement_techniques.push(t);
        }
        train.push(supplement_pool[i].clone());
    }
    if !train.iter().any(|s| s.label == Label::Obfuscated) {
        return Err(TrainError::NoPositives);
    }

    let dataset = FinetuneDataset {
        train,
        test: Vec::new(),
        warnings: Vec::new(),
    };
    let outcome = finetune(params, tokenizer, &dataset, spec)?;
    Ok(CorrectionOutcome {
        params: outcome.params,
        changed: true,
        positives,
        supplemented,
        negatives,
        supplement_techniques,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Loss-peak diagnostics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakTag {
    /// Labeled obfuscated yet byte-identical to its original command.
    LabeledObfuscatedIdentical,
    /// Benign but dense in escape characters typical of obfuscation.
    BenignWithObfuscationMarkers,
    /// Technique with very few training samples.
    RareTechnique,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeakSample {
    pub batch: usize,
    pub batch_loss: f64,
    pub source_id: String,
    pub raw: String,
    pub tags: Vec<PeakTag>,
}

fn marker_density(raw: &str) -> f64 {
    if raw.is_empty() {
        return 0.0;
    }
    let markers = raw
        .chars()
        .filter(|c| matches!(c, '^' | '`' | '\r' | '\t' | '\u{b}' | '\u{c}'))
        .count();
    markers as f64 / raw.chars().count() as f64
}

/// Finds batches whose loss spiked, then tags every sample of those
/// batches with the confusion taxonomy: mislabeled-identical samples,
/// benign commands that look obfuscated, and rare techniques. Ranked by
/// batch loss, highest first.
pub fn loss_peak_report(
    trace: &[f64],
    batch_members: &[Vec<usize>],
    train: &[LabeledSample],
) -> Vec<PeakSample> {
    let mut technique_counts: HashMap<&str, usize> = HashMap::new();
    for s in train {
        if let Some(t) = &s.technique {
            *technique_counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut report = Vec::new();
    for batch in spike_indices(trace) {
        let Some(members) = batch_members.get(batch) else {
            continue;
        };
        for &i in members {
            let s = &train[i];
            let mut tags = Vec::new();
            if s.label == Label::Obfuscated && s.original.as_deref() == Some(s.raw.as_str()) {
                tags.push(PeakTag::LabeledObfuscatedIdentical);
            }
            if s.label == Label::Benign && marker_density(&s.raw) > MARKER_DENSITY_THRESHOLD {
                tags.push(PeakTag::BenignWithObfuscationMarkers);
            }
            if let Some(t) = &s.technique {
                if technique_counts.get(t.as_str()).copied().unwrap_or(0)
                    < RARE_TECHNIQUE_THRESHOLD
                {
                    tags.push(PeakTag::RareTechnique);
                }
            }
            report.push(PeakSample {
                batch,
                batch_loss: trace[batch],
                source_id: s.source_id.clone(),
                raw: s.raw.clone(),
                tags,
            });
        }
    }
    report.sort_by(|a, b| b.batch_loss.partial_cmp(&a.batch_loss).unwrap());
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, SizePreset};

    fn specials() -> Vec<u32> {
        vec![0, 3, 4]
    }

    #[test]
    fn focal_matches_cross_entropy_at_gamma_zero() {
        assert!((focal_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        for i in 1..=1000 {
            let p = i as f64 / 1000.0;
            assert!((focal_loss(p, 0.0) - (-p.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_known_value_and_bounds() {
        assert!((focal_loss(0.9, 2.0) - 1.05361e-3).abs() < 1e-8);
        assert_eq!(focal_loss(1.0, 0.0), 0.0);
        assert_eq!(focal_loss(1.0, 3.0), 0.0);
        let mut prev = f64::INFINITY;
        for i in 1..=1000 {
            let p = i as f64 / 1000.0;
            let fl = focal_loss(p, 2.0);
            assert!(fl <= -p.ln() + 1e-15, "FL exceeds CE at {p}");
            assert!(fl <= prev, "FL not decreasing at {p}");
            prev = fl;
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        for &(logit, y, gamma) in &[(0.3f64, 1.0, 2.0), (-1.2, 0.0, 2.0), (0.8, 1.0, 0.0)] {
            let f = |l: f64| {
                let p = sigmoid(l);
                let p_t = y * p + (1.0 - y) * (1.0 - p);
                focal_loss(p_t, gamma)
            };
            let h = 1e-6;
            let numeric = (f(logit + h) - f(logit - h)) / (2.0 * h);
            let analytic = focal_logit_grad(sigmoid(logit), y, gamma);
            assert!(
                (numeric - analytic).abs() < 1e-6,
                "logit {logit} y {y} gamma {gamma}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn corruption_flags_only_masked_positions() {
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Generator, 60, 24);
        let generator = init_params::<f32>(&config, 1);
        let ids: Vec<u32> = (0..20).map(|i| 5 + (i % 40) as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = mask_and_corrupt(&ids, &generator, &specials(), 0.15, 2, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(c.masked_positions.len(), 3);
        for (pos, flag) in c.replaced.iter().enumerate() {
            if *flag {
                assert!(c.masked_positions.contains(&pos));
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let c2 = mask_and_corrupt(&ids, &generator, &specials(), 0.15, 2, &mut rng2)
            .unwrap()
            .unwrap();
        assert_eq!(c.corrupted_ids, c2.corrupted_ids);
        assert_eq!(c.replaced, c2.replaced);
    }

    #[test]
    fn uniform_generator_replacement_rate() {
        // An all-zero generator emits a uniform distribution, so each
        // sample matches the original with probability 1/V.
        let vocab = 97usize;
        let mut config = ModelConfig::preset(SizePreset::Miniature, Role::Generator, vocab, 32);
        config.dropout = 0.0;
        let generator = ModelParams::<f32>::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut masked = 0usize;
        let mut flagged = 0usize;
        while masked < 10_000 {
            let ids: Vec<u32> = (0..24).map(|_| rng.gen_range(5..vocab as u32)).collect();
            let c = mask_and_corrupt(&ids, &generator, &specials(), 0.5, 2, &mut rng)
                .unwrap()
                .unwrap();
            for &p in &c.masked_positions {
                masked += 1;
                if c.replaced[p] {
                    flagged += 1;
                }
            }
        }
        let expected = 1.0 - 1.0 / vocab as f64;
        let sigma = (expected * (1.0 - expected) / masked as f64).sqrt();
        let rate = flagged as f64 / masked as f64;
        assert!(
            (rate - expected).abs() < 3.0 * sigma,
            "rate {rate} expected {expected} sigma {sigma}"
        );
    }

    #[test]
    fn zero_step_pretrain_returns_initial_params() {
        let gen_config = ModelConfig::preset(SizePreset::Miniature, Role::Generator, 50, 16);
        let disc_config = ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, 50, 16);
        let generator = init_params::<f32>(&gen_config, 1);
        let discriminator = init_params::<f32>(&disc_config, 2);
        let corpus = vec![vec![3, 10, 11, 12, 4]];
        let spec = PretrainSpec {
            steps: 0,
            ..PretrainSpec::default()
        };
        let out = pretrain(
            generator.clone(),
            discriminator.clone(),
            &corpus,
            &specials(),
            2,
            &spec,
        )
        .unwrap();
        assert_eq!(out.generator, generator);
        assert_eq!(out.discriminator, discriminator);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn pretrain_rejects_mismatched_pair() {
        let disc_config = ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, 50, 16);
        let d1 = init_params::<f32>(&disc_config, 1);
        let d2 = init_params::<f32>(&disc_config, 2);
        let corpus = vec![vec![3, 10, 4]];
        let err = pretrain(d1, d2, &corpus, &specials(), 2, &PretrainSpec::default());
        assert!(matches!(err, Err(TrainError::BadPair(_))));
    }

    fn training_fixture() -> (Vec<ExecutionLog>, Vec<ObfuscatedSample>) {
        use crate::obfugen::{generate_dataset, uniform_weights};
        let benign = crate::synth::synth_corpus(11, 400);
        let report = generate_dataset(&benign, &uniform_weights(), 40, 12).unwrap();
        (benign, report.samples)
    }

    #[test]
    fn dataset_ratio_and_split() {
        let (benign, obf) = training_fixture();
        let spec = FinetuneSpec::default();
        let ds = build_finetune_dataset(&benign, &obf, &[], &spec, 5).unwrap();
        let ratio = ds.achieved_ratio();
        assert!((ratio - 10.0).abs() <= 0.5, "ratio {ratio}");
        let total = ds.train.len() + ds.test.len();
        assert!(ds.test.len() >= total / 5 && ds.test.len() <= total / 3);
        // Same seed reproduces the split exactly.
        let ds2 = build_finetune_dataset(&benign, &obf, &[], &spec, 5).unwrap();
        assert_eq!(
            ds.train.iter().map(|s| &s.raw).collect::<Vec<_>>(),
            ds2.train.iter().map(|s| &s.raw).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dataset_rejects_unstable_ratio() {
        let (benign, obf) = training_fixture();
        let spec = FinetuneSpec {
            imbalance_ratio: 35.0,
            ..FinetuneSpec::default()
        };
        assert!(matches!(
            build_finetune_dataset(&benign, &obf, &[], &spec, 5),
            Err(TrainError::RatioTooHigh { .. })
        ));
        let spec = FinetuneSpec {
            imbalance_ratio: 35.0,
            allow_high_ratio: true,
            ..FinetuneSpec::default()
        };
        assert!(build_finetune_dataset(&benign, &obf, &[], &spec, 5).is_ok());
    }

    #[test]
    fn dataset_requires_obfuscated_pool() {
        let (benign, _) = training_fixture();
        assert!(matches!(
            build_finetune_dataset(&benign, &[], &[], &FinetuneSpec::default(), 5),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn spike_counter() {
        let flat = vec![1.0; 100];
        assert_eq!(count_spikes(&flat), 0);
        let mut with_spike = flat.clone();
        with_spike[60] = 9.0;
        assert_eq!(count_spikes(&with_spike), 1);
        assert_eq!(spike_indices(&with_spike), vec![60]);
    }

    #[test]
    fn peak_report_tags_planted_samples() {
        let train = vec![
            LabeledSample {
                raw: "ping 127.0.0.1".to_string(),
                source_id: "s0".to_string(),
                label: Label::Obfuscated,
                technique: Some("case_mixing".to_string()),
                original: Some("ping 127.0.0.1".to_string()),
            },
            LabeledSample {
                raw: "mocha ^^^--recursive^^^ --timeout 5000".to_string(),
                source_id: "s1".to_string(),
                label: Label::Benign,
                technique: None,
                original: None,
            },
            LabeledSample {
                raw: "whoami".to_string(),
                source_id: "s2".to_string(),
                label: Label::Benign,
                technique: None,
                original: None,
            },
        ];
        let mut trace = vec![1.0; 30];
        trace.push(20.0);
        let mut batch_members = vec![vec![2]; 30];
        batch_members.push(vec![0, 1]);
        let report = loss_peak_report(&trace, &batch_members, &train);
        assert_eq!(report.len(), 2);
        let by_id = |id: &str| report.iter().find(|p| p.source_id == id).unwrap();
        assert!(by_id("s0")
            .tags
            .contains(&PeakTag::LabeledObfuscatedIdentical));
        assert!(by_id("s0").tags.contains(&PeakTag::RareTechnique));
        assert!(by_id("s1")
            .tags
            .contains(&PeakTag::BenignWithObfuscationMarkers));
    }

    #[test]
    fn correction_requires_positives_and_is_noop_when_empty() {
        let tokenizer = tiny_tokenizer();
        let config =
            ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, tokenizer.vocab_size(), 32);
        let params = init_params::<f32>(&config, 9);
        let out = correct_stage(params.clone(), &tokenizer, &[], &[], &FinetuneSpec::default())
            .unwrap();
        assert!(!out.changed);
        assert_eq!(out.params, params);

        let labeled = vec![LabeledDetection {
            raw: "dir C:\\data".to_string(),
            source_id: "d0".to_string(),
            category: Category::NonObfuscated,
        }];
        assert!(matches!(
            correct_stage(params, &tokenizer, &labeled, &[], &FinetuneSpec::default()),
            Err(TrainError::NoPositives)
        ));
    }

    #[test]
    fn correction_reaches_target_ratio() {
        let tokenizer = tiny_tokenizer();
        let config =
            ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, tokenizer.vocab_size(), 48);
        let params = init_params::<f32>(&config, 9);
        let labeled: Vec<LabeledDetection> = (0..38)
            .map(|i| LabeledDetection {
                raw: format!("cmd.exe /c d^i^r C:\\p{i}"),
                source_id: format!("pos-{i}"),
                category: Category::ObfuscatedMalicious,
            })
            .chain((0..731).map(|i| LabeledDetection {
                raw: format!("cmd.exe /c dir C:\\q{i}"),
                source_id: format!("neg-{i}"),
                category: if i % 2 == 0 {
                    Category::ObfuscatedBenign
                } else {
                    Category::NonObfuscated
                },
            }))
            .collect();
        let pool: Vec<LabeledSample> = (0..100)
            .map(|i| LabeledSample {
                raw: format!("cmd.exe /c c^o^p^y a{i} b{i}"),
                source_id: format!("pool-{i}"),
                label: Label::Obfuscated,
                technique: Some("caret_insertion".to_string()),
                original: None,
            })
            .collect();
        let spec = FinetuneSpec {
            epochs: 1,
            max_len: 24,
            ..FinetuneSpec::default()
        };
        let out = correct_stage(params, &tokenizer, &labeled, &pool, &spec).unwrap();
        assert!(out.changed);
        let pos_total = out.positives + out.supplemented;
        let ratio = out.negatives as f64 / pos_total as f64;
        assert!((ratio - 10.0).abs() / 10.0 <= 0.05, "ratio {ratio}");
    }

    fn tiny_tokenizer() -> TokenizerModel {
        let corpus: Vec<String> = crate::synth::synth_corpus(21, 60)
            .into_iter()
            .map(|l| normalize(&l.raw).text)
            .collect();
        crate::tokenizer::train(corpus.iter(), 300, 1).unwrap()
    }

    #[test]
    fn finetune_is_deterministic() {
        let tokenizer = tiny_tokenizer();
        let config =
            ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, tokenizer.vocab_size(), 32);
        let params = init_params::<f32>(&config, 4);
        let train: Vec<LabeledSample> = (0..24)
            .map(|i| LabeledSample {
                raw: if i % 11 == 0 {
                    format!("cmd.exe /c d^i^r C:\\t{i}")
                } else {
                    format!("cmd.exe /c dir C:\\t{i}")
                },
                source_id: format!("t{i}"),
                label: if i % 11 == 0 {
                    Label::Obfuscated
                } else {
                    Label::Benign
                },
                technique: None,
                original: None,
            })
            .collect();
        let dataset = FinetuneDataset {
            train,
            test: Vec::new(),
            warnings: Vec::new(),
        };
        let spec = FinetuneSpec {
            epochs: 1,
            max_len: 24,
            ..FinetuneSpec::default()
        };
        let a = finetune(params.clone(), &tokenizer, &dataset, &spec).unwrap();
        let b = finetune(params, &tokenizer, &dataset, &spec).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.params, b.params);
    }
}
