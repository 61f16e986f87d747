//! Serving side: scores execution-log streams with a fine-tuned
//! classifier, evaluates labeled sets with threshold sweeps, round-trips
//! analyst triage files and benchmarks inference throughput in full and
//! half precision.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, ExecutionLog, Label};
use crate::model::{
    forward, round_through_f16, sigmoid, HeadOutput, ModelError, ModelParams, Precision, TensorMut,
};
use crate::tokenizer::TokenizerModel;
use crate::trainer::{encode_command, LabeledDetection, LabeledSample};

/// Default decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Probability floor above which detections are queued for review.
pub const REVIEW_FLOOR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("labeled set is empty")]
    EmptySet,
    #[error("triage io: {0}")]
    Io(#[from] std::io::Error),
    #[error("triage line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(
        "triage line {line}: unknown category {value:?}; valid values are obfuscated_malicious, obfuscated_benign, non_obfuscated"
    )]
    UnknownCategory { line: usize, value: String },
    #[error("triage line {line}: missing category")]
    MissingCategory { line: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A tokenizer plus a fine-tuned discriminator, ready to score commands.
pub struct Classifier {
    pub tokenizer: TokenizerModel,
    pub params: ModelParams<f32>,
    pub max_len: usize,
}

impl Classifier {
    pub fn new(tokenizer: TokenizerModel, params: ModelParams<f32>, max_len: usize) -> Self {
        let max_len = max_len.min(params.config.max_position);
        Classifier {
            tokenizer,
            params,
            max_len,
        }
    }

    /// Obfuscation probability of one raw command line.
    pub fn score(&self, raw: &str) -> Result<f64, ModelError> {
        let ids = encode_command(&self.tokenizer, raw, self.max_len);
        let fwd = forward(&self.params, &ids, None)?;
        let HeadOutput::Discriminator { seq_logit, .. } = fwd.head else {
            unreachable!()
        };
        Ok(sigmoid(seq_logit as f64))
    }

    /// A copy whose weights were quantized through 16-bit storage.
    pub fn quantized(&self) -> Classifier {
        let mut params = self.params.clone();
        params.visit_mut(&mut |_, t| match t {
            TensorMut::One(a) => a.mapv_inplace(|x| round_through_f16(x as f64) as f32),
            TensorMut::Two(a) => a.mapv_inplace(|x| round_through_f16(x as f64) as f32),
        });
        Classifier {
            tokenizer: self.tokenizer.clone(),
            params,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    pub log_ref: String,
    pub raw: String,
    pub probability: f64,
    pub decision: bool,
    pub category: Option<Category>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Scores every log in order. Malformed entries produce a result with a
/// zero probability and an error note; the stream never stops early.
pub fn score_stream<'a>(
    classifier: &'a Classifier,
    logs: impl Iterator<Item = ExecutionLog> + 'a,
    threshold: f64,
) -> impl Iterator<Item = DetectionResult> + 'a {
    logs.map(move |log| match classifier.score(&log.raw) {
        Ok(probability) => DetectionResult {
            log_ref: log.source_id,
            raw: log.raw,
            probability,
            decision: probability >= threshold,
            category: None,
            error: None,
        },
        Err(e) => DetectionResult {
            log_ref: log.source_id,
            raw: log.raw,
            probability: 0.0,
            decision: false,
            category: None,
            error: Some(e.to_string()),
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub detections: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub benign: ClassReport,
    pub obfuscated: ClassReport,
    pub per_technique_recall: BTreeMap<String, f64>,
    pub sweep: Vec<SweepRow>,
    pub total: usize,
}

/// A probability paired with its ground truth, the unit of evaluation.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub probability: f64,
    pub label: Label,
    pub technique: Option<String>,
}

/// Exact counting metrics plus a threshold sweep, computed in one pass
/// over the scored set.
pub fn evaluate_scored(
    scored: &[ScoredSample],
    threshold: f64,
    sweep_thresholds: &[f64],
) -> Result<EvalReport, DetectorError> {
    if scored.is_empty() {
        return Err(DetectorError::EmptySet);
    }
    for &t in sweep_thresholds.iter().chain(std::iter::once(&threshold)) {
        if !(0.0..=1.0).contains(&t) {
            return Err(DetectorError::BadThreshold(t));
        }
    }
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    let mut technique_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in scored {
        let detected = s.probability >= threshold;
        match (detected, s.label) {
            (true, Label::Obfuscated) => tp += 1,
            (true, Label::Benign) => fp += 1,
            (false, Label::Benign) => tn += 1,
            (false, Label::Obfuscated) => fne += 1,
        }
        if s.label == Label::Obfuscated {
            if let Some(t) = &s.technique {
                let entry = technique_counts.entry(t.clone()).or_default();
                entry.1 += 1;
                if detected {
                    entry.0 += 1;
                }
            }
        }
    }
    let safe = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let sweep = sweep_thresholds
        .iter()
        .map(|&t| {
            let (mut s_tp, mut s_fp) = (0usize, 0usize);
            for s in scored {
                if s.probability >= t {
                    match s.label {
                        Label::Obfuscated => s_tp += 1,
                        Label::Benign => s_fp += 1,
                    }
                }
            }
            SweepRow {
                threshold: t,
                precision: safe(s_tp, s_tp + s_fp),
                detections: s_tp + s_fp,
            }
        })
        .collect();
    Ok(EvalReport {
        threshold,
        benign: ClassReport {
            precision: safe(tn, tn + fne),
            recall: safe(tn, tn + fp),
            support: tn + fp,
        },
        obfuscated: ClassReport {
            precision: safe(tp, tp + fp),
            recall: safe(tp, tp + fne),
            support: tp + fne,
        },
        per_technique_recall: technique_counts
            .into_iter()
            .map(|(k, (det, tot))| (k, safe(det, tot)))
            .collect(),
        sweep,
        total: scored.len(),
    })
}

pub fn score_labeled(
    classifier: &Classifier,
    samples: &[LabeledSample],
) -> Result<Vec<ScoredSample>, DetectorError> {
    samples
        .iter()
        .map(|s| {
            Ok(ScoredSample {
                probability: classifier.score(&s.raw)?,
                label: s.label,
                technique: s.technique.clone(),
            })
        })
        .collect()
}

pub fn evaluate(
    classifier: &Classifier,
    samples: &[LabeledSample],
    threshold: f64,
    sweep_thresholds: &[f64],
) -> Result<EvalReport, DetectorError> {
    evaluate_scored(&score_labeled(classifier, samples)?, threshold, sweep_thresholds)
}

/// Indices detected at a threshold; higher thresholds always yield
/// subsets of lower ones.
pub fn detection_set(scored: &[ScoredSample], threshold: f64) -> Vec<usize> {
    scored
        .iter()
        .enumerate()
        .filter(|(_, s)| s.probability >= threshold)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Triage

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TriageRecord {
    log_ref: String,
    raw: String,
    probability: f64,
    category: Option<String>,
}

/// Emits one JSONL line per detection at or above the floor, category
/// left empty for the analyst to fill in.
pub fn triage_export(results: &[DetectionResult], floor: f64) -> String {
    let mut out = String::from("# triage: fill category with one of obfuscated_malicious, obfuscated_benign, non_obfuscated\n");
    for r in results {
        if r.probability < floor {
            continue;
        }
        let record = TriageRecord {
            log_ref: r.log_ref.clone(),
            raw: r.raw.clone(),
            probability: r.probability,
            category: r.category.map(|c| c.name().to_string()),
        };
        out.push_str(&serde_json::to_string(&record).unwrap());
        out.push('\n');
    }
    out
}

/// Parses a filled-in triage file, validating every category against the
/// three-value enum and reporting offending line numbers.
pub fn triage_import<R: BufRead>(reader: R) -> Result<Vec<LabeledDetection>, DetectorError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: TriageRecord = serde_json::from_str(trimmed).map_err(|source| {
            DetectorError::Parse {
                line: lineno,
                source,
            }
        })?;
        let Some(value) = record.category else {
            return Err(DetectorError::MissingCategory { line: lineno });
        };
        let category =
            Category::from_name(&value).ok_or(DetectorError::UnknownCategory {
                line: lineno,
                value,
            })?;
        out.push(LabeledDetection {
            raw: record.raw,
            source_id: record.log_ref,
            category,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Benchmarking

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub n_logs: usize,
    pub wall_seconds: f64,
    pub logs_per_second: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fraction of logs where both precision modes reach the same
    /// decision at the default threshold. Present when both modes ran.
    pub decision_agreement: Option<f64>,
    pub hardware_note: String,
}

/// Measures scoring throughput in the requested precision modes and, when
/// both ran, the decision agreement rate between them.
pub fn bench(
    classifier: &Classifier,
    logs: &[ExecutionLog],
    modes: &[Precision],
) -> Result<BenchReport, DetectorError> {
    assert!(!logs.is_empty(), "bench needs at least one log");
    let mut rows = Vec::new();
    let mut decisions: BTreeMap<&'static str, Vec<bool>> = BTreeMap::new();
    for &mode in modes {
        let quantized;
        let active = match mode {
            Precision::Half => {
                quantized = classifier.quantized();
                &quantized
            }
            _ => classifier,
        };
        let start = Instant::now();
        let mut mode_decisions = Vec::with_capacity(logs.len());
        for log in logs {
            let p = active.score(&log.raw)?;
            mode_decisions.push(p >= DEFAULT_THRESHOLD);
        }
        let wall = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            mode: mode.name().to_string(),
            n_logs: logs.len(),
            wall_seconds: wall,
            logs_per_second: logs.len() as f64 / wall.max(1e-9),
        });
        decisions.insert(mode.name(), mode_decisions);
    }
    let decision_agreement = match (decisions.get("bits16"), decisions.get("bits32")) {
        (Some(a), Some(b)) => {
            let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
            Some(same as f64 / a.len() as f64)
        }
        _ => None,
    };
    Ok(BenchReport {
        rows,
        decision_agreement,
        hardware_note: format!(
            "single-threaded CPU scoring, batch size 1, {} {}",
            std::env::consts::OS,
            std::env::consts::ARCH
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Role, SizePreset};
    use crate::normalizer::normalize;

    fn stub_scored(probs_labels: &[(f64, Label)]) -> Vec<ScoredSample> {
        probs_labels
            .iter()
            .map(|&(probability, label)| ScoredSample {
                probability,
                label,
                technique: None,
            })
            .collect()
    }

    #[test]
    fn perfect_stub_scores_perfectly() {
        let scored = stub_scored(&[
            (1.0, Label::Obfuscated),
            (0.0, Label::Benign),
            (1.0, Label::Obfuscated),
            (0.0, Label::Benign),
        ]);
        let report = evaluate_scored(&scored, 0.5, &[]).unwrap();
        assert_eq!(report.obfuscated.precision, 1.0);
        assert_eq!(report.obfuscated.recall, 1.0);
        assert_eq!(report.benign.precision, 1.0);
        assert_eq!(report.benign.recall, 1.0);
    }

    #[test]
    fn constant_zero_stub() {
        let scored = stub_scored(&[
            (0.0, Label::Obfuscated),
            (0.0, Label::Benign),
            (0.0, Label::Benign),
        ]);
        let report = evaluate_scored(&scored, 0.5, &[]).unwrap();
        assert_eq!(report.benign.recall, 1.0);
        assert_eq!(report.obfuscated.recall, 0.0);
    }

    #[test]
    fn rejects_bad_threshold_and_empty_set() {
        let scored = stub_scored(&[(0.5, Label::Benign)]);
        assert!(matches!(
            evaluate_scored(&scored, 1.5, &[]),
            Err(DetectorError::BadThreshold(_))
        ));
        assert!(matches!(
            evaluate_scored(&scored, 0.5, &[-0.1]),
            Err(DetectorError::BadThreshold(_))
        ));
        assert!(matches!(
            evaluate_scored(&[], 0.5, &[]),
            Err(DetectorError::EmptySet)
        ));
    }

    #[test]
    fn evaluate_agrees_with_brute_force_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let scored: Vec<ScoredSample> = (0..1000)
            .map(|_| ScoredSample {
                probability: rng.gen::<f64>(),
                label: if rng.gen_bool(0.2) {
                    Label::Obfuscated
                } else {
                    Label::Benign
                },
                technique: None,
            })
            .collect();
        let thresholds = [0.1, 0.3, 0.5, 0.7, 0.9];
        let report = evaluate_scored(&scored, 0.5, &thresholds).unwrap();
        // Oracle: recount every statistic independently.
        let tp = scored
            .iter()
            .filter(|s| s.probability >= 0.5 && s.label == Label::Obfuscated)
            .count();
        let fp = scored
            .iter()
            .filter(|s| s.probability >= 0.5 && s.label == Label::Benign)
            .count();
        let pos = scored.iter().filter(|s| s.label == Label::Obfuscated).count();
        assert_eq!(report.obfuscated.support, pos);
        assert!((report.obfuscated.precision - tp as f64 / (tp + fp) as f64).abs() < 1e-12);
        assert!((report.obfuscated.recall - tp as f64 / pos as f64).abs() < 1e-12);
        for row in &report.sweep {
            let detections = scored.iter().filter(|s| s.probability >= row.threshold).count();
            assert_eq!(row.detections, detections);
        }
    }

    #[test]
    fn detection_sets_are_nested() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let scored: Vec<ScoredSample> = (0..500)
            .map(|_| ScoredSample {
                probability: rng.gen::<f64>(),
                label: Label::Benign,
                technique: None,
            })
            .collect();
        let mut previous: Option<Vec<usize>> = None;
        for t in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let set = detection_set(&scored, t);
            if let Some(prev) = &previous {
                assert!(set.iter().all(|i| prev.contains(i)));
            }
            previous = Some(set);
        }
    }

    fn tiny_classifier() -> Classifier {
        let corpus: Vec<String> = crate::synth::synth_corpus(31, 60)
            .into_iter()
            .map(|l| normalize(&l.raw).text)
            .collect();
        let tokenizer = crate::tokenizer::train(corpus.iter(), 300, 1).unwrap();
        let config = ModelConfig::preset(
            SizePreset::Miniature,
            Role::Discriminator,
            tokenizer.vocab_size(),
            48,
        );
        let params = init_params::<f32>(&config, 77);
        Classifier::new(tokenizer, params, 48)
    }

    #[test]
    fn stream_preserves_order_and_duplicates_agree() {
        let classifier = tiny_classifier();
        let logs = vec![
            ExecutionLog::benign("cmd.exe /c dir C:\\data", "a"),
            ExecutionLog::benign("powershell.exe -Command Get-Process", "b"),
            ExecutionLog::benign("cmd.exe /c dir C:\\data", "c"),
        ];
        let results: Vec<_> = score_stream(&classifier, logs.into_iter(), 0.5).collect();
        assert_eq!(
            results.iter().map(|r| r.log_ref.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(results[0].probability, results[2].probability);
        let empty: Vec<_> =
            score_stream(&classifier, std::iter::empty(), 0.5).collect();
        assert!(empty.is_empty());
    }

    #[test]
    fn triage_round_trip_and_validation() {
        let results = vec![
            DetectionResult {
                log_ref: "r1".to_string(),
                raw: "cmd.exe /c d^i^r".to_string(),
                probability: 0.93,
                decision: true,
                category: None,
                error: None,
            },
            DetectionResult {
                log_ref: "r2".to_string(),
                raw: "whoami".to_string(),
                probability: 0.02,
                decision: false,
                category: None,
                error: None,
            },
        ];
        let exported = triage_export(&results, 0.1);
        assert_eq!(exported.matches('\n').count(), 2);
        assert!(!exported.contains("whoami"));

        let filled = exported.replace(
            "\"category\":null",
            "\"category\":\"obfuscated_malicious\"",
        );
        let imported = triage_import(filled.as_bytes()).unwrap();
        assert_eq!(imported.len(), 1);
        assert_eq!(imported[0].source_id, "r1");
        assert_eq!(imported[0].category, Category::ObfuscatedMalicious);

        let bad = exported.replace("\"category\":null", "\"category\":\"malicious\"");
        match triage_import(bad.as_bytes()) {
            Err(DetectorError::UnknownCategory { line, value }) => {
                assert_eq!(line, 2);
                assert_eq!(value, "malicious");
            }
            other => panic!("expected unknown category, got {other:?}"),
        }

        let empty = triage_export(&[], 0.1);
        assert!(empty.starts_with('#'));
        assert!(triage_import(empty.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn bench_reports_modes_and_agreement() {
        let classifier = tiny_classifier();
        let logs: Vec<ExecutionLog> = (0..20)
            .map(|i| ExecutionLog::benign(format!("cmd.exe /c dir C:\\d{i}"), format!("l{i}")))
            .collect();
        let report = bench(
            &classifier,
            &logs,
            &[Precision::Single, Precision::Half],
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        let agreement = report.decision_agreement.unwrap();
        assert!(agreement >= 0.0 && agreement <= 1.0);
        let one = bench(&classifier, &logs[..1], &[Precision::Single]).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert!(one.decision_agreement.is_none());
    }
}
