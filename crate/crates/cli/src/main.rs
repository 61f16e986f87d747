//! Single entry point for the obfuscation-detection pipeline: corpus
//! management, tokenizer training, model training, and the evaluation and
//! triage tooling, plus an end-to-end run driver. Stages run sequentially
//! and every subcommand is a thin wrapper over the library crate.

use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use obfuscan_core::corpus::{read_jsonl, write_jsonl, CorpusRecord, ExecutionLog};
use obfuscan_core::detector::{
    bench, evaluate, score_stream, triage_export, triage_import, Classifier, EvalReport,
    DEFAULT_THRESHOLD, REVIEW_FLOOR,
};
use obfuscan_core::model::{
    init_params, load_checkpoint, save_checkpoint, ModelConfig, Precision, Role, SizePreset,
};
use obfuscan_core::normalizer::normalize;
use obfuscan_core::obfugen::{
    apply, classify_shell, derive_seed, generate_dataset, split_binary_and_args, uniform_weights,
    ObfuscatedSample, Technique,
};
use obfuscan_core::pipeline::{run_pipeline, PipelineError, RunConfig};
use obfuscan_core::synth::synth_corpus;
use obfuscan_core::tokenizer::{
    char_baseline, compression_report, train as train_tokenizer, TokenizerModel,
};
use obfuscan_core::trainer::{
    build_finetune_dataset, correct_stage, encode_command, finetune, loss_peak_report, pretrain,
    FinetuneDataset, FinetuneSpec, PretrainSpec, TrainError,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        let code = match e {
            PipelineError::Train(TrainError::Divergence { .. }) => EXIT_DIVERGENCE,
            _ if message.contains("training diverged") => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        CliError { code, message }
    }
}

macro_rules! from_data_error {
    ($($ty:path),+ $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::data(e.to_string())
            }
        }
    )+};
}

from_data_error!(
    obfuscan_core::corpus::CorpusError,
    obfuscan_core::tokenizer::TokenizerError,
    obfuscan_core::obfugen::ObfugenError,
    obfuscan_core::model::CheckpointError,
    obfuscan_core::model::ModelError,
    obfuscan_core::detector::DetectorError,
);

#[derive(Parser)]
#[command(name = "obfuscan", version, about = "Obfuscated command-line detection pipeline")]
struct Cli {
    /// Run configuration JSON (used by run-pipeline, overridable per flag).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of any seeded subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for interface stability; stages execute single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Inference precision: bits16, bits32, or bits64.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct IoArgs {
    /// Input path; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output path; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite raw command lines into normalized form (JSONL to JSONL).
    Normalize(IoArgs),
    /// Train the subword tokenizer on a normalized corpus.
    TrainTokenizer {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 1)]
        min_frequency: u64,
    },
    /// Encode text (normalize, then tokenize) and print token ids.
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        /// Command line to encode; lines from --input or stdin when omitted.
        text: Option<String>,
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 256)]
        max_len: usize,
    },
    /// Total token counts per tokenizer over a corpus, with an optional
    /// character-level baseline row.
    CompressionReport {
        #[arg(long, required = true, num_args = 1..)]
        tokenizer: Vec<PathBuf>,
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        char_baseline: bool,
    },
    /// Generate obfuscated samples from a benign corpus.
    GenObfuscate {
        #[command(flatten)]
        io: IoArgs,
        /// Restrict to these techniques; full catalog when omitted.
        #[arg(long)]
        technique: Vec<String>,
        /// Fixed intensity in [0,1]; per-sample draw when omitted.
        #[arg(long)]
        intensity: Option<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Assemble the imbalanced fine-tuning dataset with its test split.
    BuildDataset {
        #[arg(long)]
        benign: PathBuf,
        #[arg(long)]
        artificial: PathBuf,
        /// Real-world stand-in samples (held-out techniques).
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        ratio: f64,
        #[arg(long)]
        allow_high_ratio: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Replaced-token-detection pretraining of the generator and
    /// discriminator pair.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value = "small")]
        preset: String,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fine-tune a pretrained discriminator into the binary classifier.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Retrain on analyst-labeled detections (stage-2 correction).
    Correct {
        #[command(flatten)]
        model: ModelArgs,
        /// Labeled triage JSONL (output of triage-import or hand-edited
        /// triage-export).
        #[arg(long)]
        labeled: PathBuf,
        /// Fine-tuning dataset supplying supplementary positives.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        ratio: f64,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rank loss spikes and tag their batch members.
    LossPeaks {
        /// loss_trace.json from a fine-tuning run directory.
        #[arg(long)]
        trace: PathBuf,
        /// batch_members.json from the same run directory.
        #[arg(long)]
        batches: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Score logs and emit detection decisions.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Exact-count evaluation on the dataset test split.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        sweep: Vec<f64>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Threshold sweep as CSV.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        thresholds: Vec<f64>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Score logs and export those above the review floor for labeling.
    TriageExport {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = REVIEW_FLOOR)]
        floor: f64,
    },
    /// Validate a filled-in triage file and emit labeled detections.
    TriageImport(IoArgs),
    /// Throughput and decision agreement across precision modes.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_delimiter = ',', default_value = "bits16,bits32")]
        modes: Vec<String>,
    },
    /// Generate the deterministic benign fixture corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Run every stage end to end, resuming from existing artifacts.
    RunPipeline {
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn read_input(path: Option<&Path>) -> Result<String, CliError> {
    match path {
        Some(p) => Ok(fs::read_to_string(p)?),
        None => {
            let mut buf = String::new();
            io::stdin().read_to_string(&mut buf)?;
            Ok(buf)
        }
    }
}

fn write_output(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, content)?,
        None => io::stdout().write_all(content.as_bytes())?,
    }
    Ok(())
}

fn read_records(path: Option<&Path>) -> Result<Vec<CorpusRecord>, CliError> {
    let content = read_input(path)?;
    Ok(read_jsonl(BufReader::new(content.as_bytes()))?)
}

fn read_logs(path: Option<&Path>) -> Result<Vec<ExecutionLog>, CliError> {
    Ok(read_records(path)?.iter().map(|r| r.to_log()).collect())
}

fn read_samples(path: &Path) -> Result<Vec<ObfuscatedSample>, CliError> {
    let mut out = Vec::new();
    for (idx, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            CliError::data(format!("{}:{}: {e}", path.display(), idx + 1))
        })?);
    }
    Ok(out)
}

fn load_tokenizer(path: &Path) -> Result<TokenizerModel, CliError> {
    Ok(TokenizerModel::from_json(&fs::read_to_string(path)?)?)
}

fn load_classifier(model: &ModelArgs) -> Result<Classifier, CliError> {
    let tokenizer = load_tokenizer(&model.tokenizer)?;
    let checkpoint = load_checkpoint::<f32>(&model.checkpoint)?;
    if checkpoint.tokenizer_hash != tokenizer.content_hash() {
        return Err(CliError::data(
            "checkpoint was trained with a different tokenizer",
        ));
    }
    Ok(Classifier::new(tokenizer, checkpoint.params, model.max_len))
}

fn load_dataset(path: &Path) -> Result<FinetuneDataset, CliError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn parse_techniques(names: &[String]) -> Result<Vec<Technique>, CliError> {
    names
        .iter()
        .map(|n| {
            Technique::from_name(n)
                .ok_or_else(|| CliError::usage(format!("unknown technique {n:?}")))
        })
        .collect()
}

fn parse_precision(name: &str) -> Result<Precision, CliError> {
    Precision::from_name(name)
        .ok_or_else(|| CliError::usage(format!("unknown precision {name:?} (bits16, bits32, bits64)")))
}

fn eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "threshold {}  total {}\n", report.threshold, report.total
    ));
    out.push_str("class       precision  recall    support\n");
    for (name, class) in [("benign", &report.benign), ("obfuscated", &report.obfuscated)] {
        out.push_str(&format!(
            "{name:<12}{:<11.4}{:<10.4}{}\n",
            class.precision, class.recall, class.support
        ));
    }
    if !report.per_technique_recall.is_empty() {
        out.push_str("technique recall:\n");
        for (t, r) in &report.per_technique_recall {
            out.push_str(&format!("  {t:<28}{r:.4}\n"));
        }
    }
    out
}

fn sweep_csv(report: &EvalReport) -> String {
    let mut csv = String::from("threshold,precision,detections\n");
    for row in &report.sweep {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.threshold, row.precision, row.detections
        ));
    }
    csv
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed_override = cli.seed;
    let pick_seed = |local: u64| seed_override.unwrap_or(local);
    match cli.command {
        Command::Normalize(io_args) => {
            let mut records = read_records(io_args.input.as_deref())?;
            for r in &mut records {
                r.raw = normalize(&r.raw).text;
            }
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &records)?;
            write_output(io_args.output.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::TrainTokenizer {
            io: io_args,
            vocab_size,
            min_frequency,
        } => {
            let records = read_records(io_args.input.as_deref())?;
            let corpus: Vec<String> =
                records.iter().map(|r| normalize(&r.raw).text).collect();
            let model = train_tokenizer(corpus.iter(), vocab_size, min_frequency)?;
            write_output(io_args.output.as_deref(), &model.to_json())
        }
        Command::Encode {
            tokenizer,
            text,
            io: io_args,
            max_len,
        } => {
            let model = load_tokenizer(&tokenizer)?;
            let lines: Vec<String> = match text {
                Some(t) => vec![t],
                None => read_input(io_args.input.as_deref())?
                    .lines()
                    .map(str::to_string)
                    .collect(),
            };
            let mut out = String::new();
            for line in &lines {
                let ids = encode_command(&model, line, max_len);
                out.push_str(&serde_json::to_string(&ids)?);
                out.push('\n');
            }
            write_output(io_args.output.as_deref(), &out)
        }
        Command::CompressionReport {
            tokenizer,
            io: io_args,
            char_baseline: with_baseline,
        } => {
            let records = read_records(io_args.input.as_deref())?;
            let corpus: Vec<String> =
                records.iter().map(|r| normalize(&r.raw).text).collect();
            let mut models = Vec::new();
            for path in &tokenizer {
                models.push(load_tokenizer(path)?);
            }
            if with_baseline {
                models.push(char_baseline(corpus.iter())?);
            }
            let refs: Vec<&TokenizerModel> = models.iter().collect();
            let rows = compression_report(&refs, &corpus);
            write_output(
                io_args.output.as_deref(),
                &format!("{}\n", serde_json::to_string_pretty(&rows)?),
            )
        }
        Command::GenObfuscate {
            io: io_args,
            technique,
            intensity,
            seed,
            count,
        } => {
            let benign = read_logs(io_args.input.as_deref())?;
            if benign.is_empty() {
                return Err(CliError::data("benign corpus is empty"));
            }
            let samples = match intensity {
                Some(level) => {
                    let techniques = parse_techniques(&technique)?;
                    if techniques.is_empty() {
                        return Err(CliError::usage("--intensity requires --technique"));
                    }
                    gen_fixed_intensity(&benign, &techniques, level, pick_seed(seed), count)?
                }
                None => {
                    let weights = if technique.is_empty() {
                        uniform_weights()
                    } else {
                        parse_techniques(&technique)?
                            .into_iter()
                            .map(|t| (t, 1.0))
                            .collect()
                    };
                    let report =
                        generate_dataset(&benign, &weights, count, pick_seed(seed))?;
                    for (t, missing) in &report.underfilled {
                        eprintln!("warning: {} short by {missing} samples", t.name());
                    }
                    report.samples
                }
            };
            let mut out = String::new();
            for s in &samples {
                out.push_str(&serde_json::to_string(s)?);
                out.push('\n');
            }
            write_output(io_args.output.as_deref(), &out)
        }
        Command::BuildDataset {
            benign,
            artificial,
            real,
            ratio,
            allow_high_ratio,
            seed,
            output,
        } => {
            let benign = read_logs(Some(&benign))?;
            let artificial = read_samples(&artificial)?;
            let real = match real {
                Some(path) => read_samples(&path)?,
                None => Vec::new(),
            };
            let spec = FinetuneSpec {
                imbalance_ratio: ratio,
                allow_high_ratio,
                seed: pick_seed(seed),
                ..FinetuneSpec::default()
            };
            let dataset =
                build_finetune_dataset(&benign, &artificial, &real, &spec, spec.seed)?;
            for w in &dataset.warnings {
                eprintln!("warning: {w}");
            }
            fs::write(&output, serde_json::to_string(&dataset)?)?;
            eprintln!(
                "train {} test {} ratio {:.2}",
                dataset.train.len(),
                dataset.test.len(),
                dataset.achieved_ratio()
            );
            Ok(())
        }
        Command::Pretrain {
            corpus,
            tokenizer,
            preset,
            steps,
            batch_size,
            max_len,
            seed,
            out_dir,
        } => {
            let preset = SizePreset::from_name(&preset)
                .ok_or_else(|| CliError::usage(format!("unknown preset {preset:?}")))?;
            let model = load_tokenizer(&tokenizer)?;
            let records = read_records(Some(&corpus))?;
            let encoded: Vec<Vec<u32>> = records
                .iter()
                .map(|r| encode_command(&model, &r.raw, max_len))
                .collect();
            let seed = pick_seed(seed);
            let spec = PretrainSpec {
                steps,
                batch_size,
                seed,
                ..PretrainSpec::default()
            };
            let gen_config =
                ModelConfig::preset(preset, Role::Generator, model.vocab_size(), max_len);
            let disc_config =
                ModelConfig::preset(preset, Role::Discriminator, model.vocab_size(), max_len);
            let generator = init_params::<f32>(&gen_config, seed);
            let discriminator = init_params::<f32>(&disc_config, seed.wrapping_add(1));
            let specials = [model.special.pad, model.special.cls, model.special.sep];
            let out = pretrain(
                generator,
                discriminator,
                &encoded,
                &specials,
                model.special.mask,
                &spec,
            )?;
            fs::create_dir_all(&out_dir)?;
            let hash = model.content_hash();
            save_checkpoint(
                &out_dir.join("pretrained.ckpt"),
                &out.discriminator,
                Precision::Single,
                &hash,
            )?;
            save_checkpoint(
                &out_dir.join("pretrained_generator.ckpt"),
                &out.generator,
                Precision::Single,
                &hash,
            )?;
            let mut metrics = String::new();
            for m in &out.metrics {
                metrics.push_str(&serde_json::to_string(m)?);
                metrics.push('\n');
            }
            fs::write(out_dir.join("pretrain_metrics.jsonl"), metrics)?;
            fs::write(
                &out_dir.join("pretrain_config.json"),
                serde_json::to_string_pretty(&spec)?,
            )?;
            if let Some(last) = out.metrics.last() {
                eprintln!("final step {} loss {:.4}", last.step, last.loss);
            }
            Ok(())
        }
        Command::Finetune {
            model,
            dataset,
            epochs,
            gamma,
            learning_rate,
            batch_size,
            seed,
            out_dir,
        } => {
            let tokenizer = load_tokenizer(&model.tokenizer)?;
            let checkpoint = load_checkpoint::<f32>(&model.checkpoint)?;
            if checkpoint.tokenizer_hash != tokenizer.content_hash() {
                return Err(CliError::data(
                    "checkpoint was trained with a different tokenizer",
                ));
            }
            let dataset = load_dataset(&dataset)?;
            let spec = FinetuneSpec {
                epochs,
                gamma,
                learning_rate,
                batch_size,
                max_len: model.max_len,
                seed: pick_seed(seed),
                ..FinetuneSpec::default()
            };
            let out = finetune(checkpoint.params, &tokenizer, &dataset, &spec)?;
            fs::create_dir_all(&out_dir)?;
            save_checkpoint(
                &out_dir.join("finetuned.ckpt"),
                &out.params,
                Precision::Single,
                &tokenizer.content_hash(),
            )?;
            fs::write(
                &out_dir.join("finetune_metrics.json"),
                serde_json::to_string_pretty(&out.epoch_metrics)?,
            )?;
            fs::write(
                &out_dir.join("loss_trace.json"),
                serde_json::to_string(&out.loss_trace)?,
            )?;
            fs::write(
                &out_dir.join("batch_members.json"),
                serde_json::to_string(&out.batch_members)?,
            )?;
            fs::write(
                &out_dir.join("finetune_config.json"),
                serde_json::to_string_pretty(&spec)?,
            )?;
            if let Some(last) = out.epoch_metrics.last() {
                eprintln!(
                    "epoch {}: benign p {:.4} r {:.4}, obfuscated p {:.4} r {:.4}",
                    last.epoch,
                    last.benign.precision,
                    last.benign.recall,
                    last.obfuscated.precision,
                    last.obfuscated.recall
                );
            }
            Ok(())
        }
        Command::Correct {
            model,
            labeled,
            dataset,
            ratio,
            epochs,
            learning_rate,
            seed,
            out_dir,
        } => {
            let tokenizer = load_tokenizer(&model.tokenizer)?;
            let checkpoint = load_checkpoint::<f32>(&model.checkpoint)?;
            let dataset = load_dataset(&dataset)?;
            let labeled = read_labeled_detections(&labeled)?;
            let spec = FinetuneSpec {
                epochs,
                learning_rate,
                imbalance_ratio: ratio,
                max_len: model.max_len,
                seed: pick_seed(seed),
                ..FinetuneSpec::default()
            };
            let out =
                correct_stage(checkpoint.params, &tokenizer, &labeled, &dataset.train, &spec)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            fs::create_dir_all(&out_dir)?;
            save_checkpoint(
                &out_dir.join("corrected.ckpt"),
                &out.params,
                Precision::Single,
                &tokenizer.content_hash(),
            )?;
            eprintln!(
                "positives {} supplemented {} negatives {} changed {}",
                out.positives, out.supplemented, out.negatives, out.changed
            );
            if !out.supplement_techniques.is_empty() {
                eprintln!(
                    "supplement techniques: {}",
                    out.supplement_techniques.join(",")
                );
            }
            Ok(())
        }
        Command::LossPeaks {
            trace,
            batches,
            dataset,
            output,
        } => {
            let trace: Vec<f64> = serde_json::from_str(&fs::read_to_string(&trace)?)?;
            let batch_members: Vec<Vec<usize>> =
                serde_json::from_str(&fs::read_to_string(&batches)?)?;
            let dataset = load_dataset(&dataset)?;
            let peaks = loss_peak_report(&trace, &batch_members, &dataset.train);
            let mut out = String::new();
            for p in &peaks {
                out.push_str(&serde_json::to_string(p)?);
                out.push('\n');
            }
            write_output(output.as_deref(), &out)
        }
        Command::Detect {
            model,
            io: io_args,
            threshold,
        } => {
            let mut classifier = load_classifier(&model)?;
            if let Some(name) = &cli.precision {
                if parse_precision(name)? == Precision::Half {
                    classifier = classifier.quantized();
                }
            }
            let logs = read_logs(io_args.input.as_deref())?;
            let mut out = String::new();
            for result in score_stream(&classifier, logs.into_iter(), threshold) {
                out.push_str(&serde_json::to_string(&result)?);
                out.push('\n');
            }
            write_output(io_args.output.as_deref(), &out)
        }
        Command::Eval {
            model,
            dataset,
            threshold,
            sweep,
            output,
        } => {
            let classifier = load_classifier(&model)?;
            let dataset = load_dataset(&dataset)?;
            let report = evaluate(&classifier, &dataset.test, threshold, &sweep)?;
            print!("{}", eval_table(&report));
            if let Some(path) = output {
                fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
        Command::Sweep {
            model,
            dataset,
            thresholds,
            output,
        } => {
            let classifier = load_classifier(&model)?;
            let dataset = load_dataset(&dataset)?;
            let report =
                evaluate(&classifier, &dataset.test, DEFAULT_THRESHOLD, &thresholds)?;
            write_output(output.as_deref(), &sweep_csv(&report))
        }
        Command::TriageExport {
            model,
            io: io_args,
            floor,
        } => {
            let classifier = load_classifier(&model)?;
            let logs = read_logs(io_args.input.as_deref())?;
            let results: Vec<_> =
                score_stream(&classifier, logs.into_iter(), DEFAULT_THRESHOLD).collect();
            write_output(io_args.output.as_deref(), &triage_export(&results, floor))
        }
        Command::TriageImport(io_args) => {
            let content = read_input(io_args.input.as_deref())?;
            let labeled = triage_import(BufReader::new(content.as_bytes()))?;
            let mut out = String::new();
            for l in &labeled {
                out.push_str(&serde_json::to_string(l)?);
                out.push('\n');
            }
            write_output(io_args.output.as_deref(), &out)
        }
        Command::Bench {
            model,
            io: io_args,
            modes,
        } => {
            let classifier = load_classifier(&model)?;
            let logs = read_logs(io_args.input.as_deref())?;
            if logs.is_empty() {
                return Err(CliError::data("bench needs at least one log"));
            }
            let modes = modes
                .iter()
                .map(|m| parse_precision(m))
                .collect::<Result<Vec<_>, _>>()?;
            let report = bench(&classifier, &logs, &modes)?;
            write_output(
                io_args.output.as_deref(),
                &format!("{}\n", serde_json::to_string_pretty(&report)?),
            )
        }
        Command::SynthCorpus { seed, n, output } => {
            if n == 0 {
                return Err(CliError::usage("--n must be at least 1"));
            }
            let logs = synth_corpus(pick_seed(seed), n);
            let records: Vec<CorpusRecord> =
                logs.iter().map(CorpusRecord::from_log).collect();
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &records)?;
            write_output(output.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::RunPipeline { out_dir } => {
            let mut config: RunConfig = match &cli.config {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => RunConfig::default(),
            };
            if let Some(dir) = out_dir {
                config.out_dir = dir;
            }
            if let Some(seed) = seed_override {
                config.seed = seed;
            }
            let report = run_pipeline(&config)?;
            eprintln!(
                "stages run: [{}], reused: [{}]",
                report.stages_run.join(", "),
                report.stages_skipped.join(", ")
            );
            println!("{}", serde_json::to_string_pretty(&report.eval)?);
            Ok(())
        }
    }
}

/// Accepts either labeled-detection JSONL (the triage-import output) or a
/// filled-in triage export file.
fn read_labeled_detections(
    path: &Path,
) -> Result<Vec<obfuscan_core::trainer::LabeledDetection>, CliError> {
    let content = fs::read_to_string(path)?;
    let first = content
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'));
    let looks_labeled = first
        .map(|l| serde_json::from_str::<obfuscan_core::trainer::LabeledDetection>(l).is_ok())
        .unwrap_or(false);
    if looks_labeled {
        let mut out = Vec::new();
        for line in content.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            out.push(serde_json::from_str(line)?);
        }
        Ok(out)
    } else {
        Ok(triage_import(BufReader::new(content.as_bytes()))?)
    }
}

/// Fixed-intensity generation used when the caller pins `--intensity`.
fn gen_fixed_intensity(
    benign: &[ExecutionLog],
    techniques: &[Technique],
    intensity: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<ObfuscatedSample>, CliError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut index = 0u64;
    let budget = count * 60;
    let mut attempts = 0usize;
    while samples.len() < count && attempts < budget {
        attempts += 1;
        let technique = techniques[rng.gen_range(0..techniques.len())];
        let log = &benign[rng.gen_range(0..benign.len())];
        let (binary, args) = split_binary_and_args(log)?;
        let sample_seed = derive_seed(seed, index);
        index += 1;
        if args.is_empty()
            || !obfuscan_core::obfugen::shell_compatible(technique, classify_shell(&binary))
        {
            continue;
        }
        match apply(technique, &args, sample_seed, intensity) {
            Ok(mut sample) => {
                sample.original = format!("{binary} {args}");
                sample.obfuscated = format!("{binary} {}", sample.obfuscated);
                samples.push(sample);
            }
            Err(obfuscan_core::obfugen::ObfugenError::Inapplicable { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if samples.len() < count {
        eprintln!("warning: produced {} of {} samples", samples.len(), count);
    }
    Ok(samples)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
