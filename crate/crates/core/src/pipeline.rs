//! End-to-end run orchestration: normalize, train the tokenizer, pretrain
//! the generator/discriminator pair, assemble the imbalanced dataset,
//! fine-tune, then evaluate with a threshold sweep. Every stage writes an
//! artifact into the run directory together with a hash of its inputs, so
//! an interrupted or partially deleted run resumes from the last artifact
//! that still matches.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{read_jsonl, CorpusError, ExecutionLog};
use crate::detector::{evaluate, Classifier, DetectorError, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{
    init_params, load_checkpoint, save_checkpoint, CheckpointError, ModelConfig, Precision, Role,
    SizePreset,
};
use crate::obfugen::{generate_dataset, ObfugenError, Technique};
use crate::normalizer::normalize;
use crate::synth::synth_corpus;
use crate::tokenizer::{encode, train, TokenizerError, TokenizerModel};
use crate::trainer::{
    build_finetune_dataset, finetune, pretrain, FinetuneDataset, FinetuneSpec, PretrainSpec,
    TrainError,
};

/// Techniques withheld from the artificial pool and used as the
/// real-world stand-in instead.
pub const HELD_OUT_TECHNIQUES: [Technique; 2] =
    [Technique::WhitespaceInsertion, Technique::CaseMixing];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("unknown model preset {0:?}")]
    UnknownPreset(String),
    #[error("pipeline io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Obfugen(#[from] ObfugenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("artifact parse: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Benign corpus JSONL; when absent a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synth_n: usize,
    pub seed: u64,
    pub preset: String,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Artificial obfuscated samples to generate.
    pub obf_count: usize,
    /// Real-world stand-in samples (held-out techniques).
    pub real_count: usize,
    pub pretrain: PretrainSpec,
    pub finetune: FinetuneSpec,
    pub threshold: f64,
    pub sweep_thresholds: Vec<f64>,
    pub precision: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("run"),
            corpus: None,
            synth_n: 4000,
            seed: 42,
            preset: "small".to_string(),
            vocab_size: 1000,
            max_len: 48,
            obf_count: 380,
            real_count: 20,
            pretrain: PretrainSpec {
                steps: 300,
                ..PretrainSpec::default()
            },
            finetune: FinetuneSpec::default(),
            threshold: DEFAULT_THRESHOLD,
            sweep_thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            precision: "bits32".to_string(),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
pub struct PipelineReport {
    pub stages_run: Vec<String>,
    pub stages_skipped: Vec<String>,
    pub eval: EvalReport,
    pub out_dir: PathBuf,
}

fn hash_bytes(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
        hasher.update([0u8]);
    }
    format!("{:x}", hasher.finalize())
}

struct StageRunner {
    dir: PathBuf,
    manifest: Manifest,
    run: Vec<String>,
    skipped: Vec<String>,
}

impl StageRunner {
    fn new(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let manifest = if path.exists() {
            serde_json::from_str(&fs::read_to_string(&path)?)?
        } else {
            Manifest::default()
        };
        Ok(StageRunner {
            dir: dir.to_path_buf(),
            manifest,
            run: Vec::new(),
            skipped: Vec::new(),
        })
    }

    /// Runs a stage unless its artifact exists and was built from inputs
    /// with the same hash. A stale artifact is rebuilt, never reused.
    fn stage(
        &mut self,
        name: &str,
        artifact: &str,
        input_hash: &str,
        build: impl FnOnce(&Path) -> Result<(), PipelineError>,
    ) -> Result<PathBuf, PipelineError> {
        let path = self.dir.join(artifact);
        let fresh = path.exists() && self.manifest.stages.get(name) == Some(&input_hash.to_string());
        if fresh {
            self.skipped.push(name.to_string());
            return Ok(path);
        }
        build(&path).map_err(|e| PipelineError::Stage {
            stage: name.to_string(),
            message: e.to_string(),
        })?;
        self.manifest
            .stages
            .insert(name.to_string(), input_hash.to_string());
        fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        self.run.push(name.to_string());
        Ok(path)
    }
}

fn load_benign(config: &RunConfig) -> Result<Vec<ExecutionLog>, PipelineError> {
    match &config.corpus {
        Some(path) => {
            let file = fs::File::open(path)?;
            Ok(read_jsonl(BufReader::new(file))?
                .iter()
                .map(|r| r.to_log())
                .collect())
        }
        None => Ok(synth_corpus(config.seed, config.synth_n)),
    }
}

pub fn parse_preset(name: &str) -> Option<SizePreset> {
    SizePreset::from_name(name)
}

/// Executes every stage in order, reusing artifacts whose recorded input
/// hashes still match. Returns the final evaluation report.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineReport, PipelineError> {
    let preset =
        parse_preset(&config.preset).ok_or_else(|| PipelineError::UnknownPreset(config.preset.clone()))?;
    let mut runner = StageRunner::new(&config.out_dir)?;
    let benign = load_benign(config)?;
    let raw_joined = benign
        .iter()
        .map(|l| l.raw.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let config_json = serde_json::to_string(config)?;

    // normalize
    let normalize_hash = hash_bytes(&[raw_joined.as_bytes()]);
    let normalized_path = runner.stage("normalize", "normalized.txt", &normalize_hash, |path| {
        let lines: Vec<String> = benign.iter().map(|l| normalize(&l.raw).text).collect();
        fs::write(path, lines.join("\n"))?;
        Ok(())
    })?;
    let normalized: Vec<String> = fs::read_to_string(&normalized_path)?
        .lines()
        .map(str::to_string)
        .collect();

    // tokenizer
    let tokenizer_hash_input = hash_bytes(&[
        fs::read(&normalized_path)?.as_slice(),
        config.vocab_size.to_string().as_bytes(),
    ]);
    let tokenizer_path = runner.stage("train-tokenizer", "tokenizer.json", &tokenizer_hash_input, |path| {
        let model = train(normalized.iter(), config.vocab_size, 1)?;
        fs::write(path, model.to_json())?;
        Ok(())
    })?;
    let tokenizer = TokenizerModel::from_json(&fs::read_to_string(&tokenizer_path)?)?;
    let tok_hash = tokenizer.content_hash();

    // pretrain
    let pretrain_hash = hash_bytes(&[
        fs::read(&tokenizer_path)?.as_slice(),
        serde_json::to_string(&config.pretrain)?.as_bytes(),
        config.preset.as_bytes(),
        config.max_len.to_string().as_bytes(),
    ]);
    let pretrain_path = runner.stage("pretrain", "pretrained.ckpt", &pretrain_hash, |path| {
        let encoded: Vec<Vec<u32>> = normalized
            .iter()
            .map(|t| encode(&tokenizer, t, config.max_len).ids)
            .collect();
        let gen_config = ModelConfig::preset(
            preset,
            Role::Generator,
            tokenizer.vocab_size(),
            config.max_len,
        );
        let disc_config = ModelConfig::preset(
            preset,
            Role::Discriminator,
            tokenizer.vocab_size(),
            config.max_len,
        );
        let generator = init_params::<f32>(&gen_config, config.seed);
        let discriminator = init_params::<f32>(&disc_config, config.seed.wrapping_add(1));
        let specials = [
            tokenizer.special.pad,
            tokenizer.special.cls,
            tokenizer.special.sep,
        ];
        let out = pretrain(
            generator,
            discriminator,
            &encoded,
            &specials,
            tokenizer.special.mask,
            &config.pretrain,
        )?;
        save_checkpoint(path, &out.discriminator, Precision::Single, &tok_hash)?;
        let metrics = out
            .metrics
            .iter()
            .map(|m| serde_json::to_string(m).unwrap())
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(path.with_file_name("pretrain_metrics.jsonl"), metrics)?;
        Ok(())
    })?;

    // build-dataset
    let dataset_hash = hash_bytes(&[
        normalize_hash.as_bytes(),
        serde_json::to_string(&config.finetune)?.as_bytes(),
        config.obf_count.to_string().as_bytes(),
        config.real_count.to_string().as_bytes(),
        config.seed.to_string().as_bytes(),
    ]);
    let dataset_path = runner.stage("build-dataset", "dataset.json", &dataset_hash, |path| {
        let artificial_weights: Vec<(Technique, f64)> = Technique::ALL
            .iter()
            .copied()
            .filter(|t| !HELD_OUT_TECHNIQUES.contains(t))
            .map(|t| (t, 1.0))
            .collect();
        let real_weights: Vec<(Technique, f64)> = HELD_OUT_TECHNIQUES
            .iter()
            .map(|&t| (t, 1.0))
            .collect();
        let artificial =
            generate_dataset(&benign, &artificial_weights, config.obf_count, config.seed)?;
        let real = generate_dataset(
            &benign,
            &real_weights,
            config.real_count,
            config.seed.wrapping_add(7),
        )?;
        let dataset = build_finetune_dataset(
            &benign,
            &artificial.samples,
            &real.samples,
            &config.finetune,
            config.seed,
        )?;
        fs::write(path, serde_json::to_string(&dataset)?)?;
        Ok(())
    })?;
    let dataset: FinetuneDataset = serde_json::from_str(&fs::read_to_string(&dataset_path)?)?;

    // finetune
    let finetune_hash = hash_bytes(&[
        fs::read(&pretrain_path)?.as_slice(),
        fs::read(&dataset_path)?.as_slice(),
        serde_json::to_string(&config.finetune)?.as_bytes(),
    ]);
    let finetuned_path = runner.stage("finetune", "finetuned.ckpt", &finetune_hash, |path| {
        let checkpoint = load_checkpoint::<f32>(&pretrain_path)?;
        if checkpoint.tokenizer_hash != tok_hash {
            return Err(PipelineError::Stage {
                stage: "finetune".to_string(),
                message: "pretrained checkpoint was built with a different tokenizer".to_string(),
            });
        }
        let out = finetune(checkpoint.params, &tokenizer, &dataset, &config.finetune)?;
        save_checkpoint(path, &out.params, Precision::Single, &tok_hash)?;
        fs::write(
            path.with_file_name("finetune_metrics.json"),
            serde_json::to_string_pretty(&out.epoch_metrics)?,
        )?;
        fs::write(
            path.with_file_name("loss_trace.json"),
            serde_json::to_string(&out.loss_trace)?,
        )?;
        Ok(())
    })?;

    // evaluate + sweep
    let eval_hash = hash_bytes(&[
        fs::read(&finetuned_path)?.as_slice(),
        fs::read(&dataset_path)?.as_slice(),
        serde_json::to_string(&config.sweep_thresholds)?.as_bytes(),
        config.threshold.to_string().as_bytes(),
    ]);
    let eval_path = runner.stage("evaluate", "eval.json", &eval_hash, |path| {
        let checkpoint = load_checkpoint::<f32>(&finetuned_path)?;
        let classifier = Classifier::new(tokenizer.clone(), checkpoint.params, config.max_len);
        let report = evaluate(
            &classifier,
            &dataset.test,
            config.threshold,
            &config.sweep_thresholds,
        )?;
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
        let mut csv = String::from("threshold,precision,detections\n");
        for row in &report.sweep {
            csv.push_str(&format!(
                "{},{},{}\n",
                row.threshold, row.precision, row.detections
            ));
        }
        fs::write(path.with_file_name("sweep.csv"), csv)?;
        Ok(())
    })?;
    let eval: EvalReport = serde_json::from_str(&fs::read_to_string(&eval_path)?)?;

    fs::write(config.out_dir.join("config.json"), config_json)?;
    Ok(PipelineReport {
        stages_run: runner.run,
        stages_skipped: runner.skipped,
        eval,
        out_dir: config.out_dir.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        RunConfig {
            out_dir: dir.to_path_buf(),
            synth_n: 120,
            preset: "miniature".to_string(),
            vocab_size: 300,
            max_len: 32,
            obf_count: 20,
            real_count: 4,
            pretrain: PretrainSpec {
                steps: 2,
                batch_size: 4,
                ..PretrainSpec::default()
            },
            finetune: FinetuneSpec {
                epochs: 1,
                max_len: 32,
                ..FinetuneSpec::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn pipeline_runs_resumes_and_rebuilds_deleted_stage() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());

        let first = run_pipeline(&config).unwrap();
        assert_eq!(
            first.stages_run,
            [
                "normalize",
                "train-tokenizer",
                "pretrain",
                "build-dataset",
                "finetune",
                "evaluate"
            ]
        );
        assert!(first.stages_skipped.is_empty());
        assert!(first.eval.total > 0);

        // Unchanged inputs: everything is reused.
        let second = run_pipeline(&config).unwrap();
        assert!(second.stages_run.is_empty());
        assert_eq!(second.stages_skipped.len(), 6);

        // Deleting the fine-tune artifact resumes from the pretrain
        // checkpoint without retraining the tokenizer. Training is
        // deterministic, so the rebuilt checkpoint is byte-identical and
        // the evaluation artifact stays valid.
        fs::remove_file(dir.path().join("finetuned.ckpt")).unwrap();
        let third = run_pipeline(&config).unwrap();
        assert_eq!(third.stages_run, ["finetune"]);
        assert!(third
            .stages_skipped
            .contains(&"train-tokenizer".to_string()));
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.preset = "gigantic".to_string();
        assert!(matches!(
            run_pipeline(&config),
            Err(PipelineError::UnknownPreset(_))
        ));
    }
}
