//! Subword tokenizer for normalized command lines.
//!
//! Training builds a vocabulary by iteratively merging the symbol pair with
//! the highest likelihood score `pair_freq / (left_freq * right_freq)`.
//! Encoding is greedy longest-match per word unit with `##` continuation
//! prefixes. Whitespace is never discarded silently: unusual whitespace
//! characters and multi-space runs become printable meta-units so that
//! whitespace-insertion obfuscation stays visible to the model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::normalizer::META_TOKENS;

/// Fixed whitespace meta-units (beyond `<SPC{n}>`, which is open-ended).
pub const WS_UNITS: [(&str, char); 5] = [
    ("<TAB>", '\t'),
    ("<CR>", '\r'),
    ("<LF>", '\n'),
    ("<VT>", '\u{b}'),
    ("<FF>", '\u{c}'),
];

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const CONTINUATION_PREFIX: &str = "##";
const MODEL_VERSION: u32 = 1;
const PRETOKENIZE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab_size {requested} cannot hold {required} base entries (specials + alphabet)")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("token id {0} out of range")]
    IdOutOfRange(u32),
    #[error("sequence contains [UNK]; original text is not reconstructible")]
    UnknownNotReconstructible,
    #[error("model format version {0} unsupported")]
    VersionMismatch(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One pretokenized unit with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordUnit {
    pub text: String,
    pub start: usize,
    pub len: usize,
    pub is_meta: bool,
}

/// Splits a normalized command into word units.
///
/// Single spaces separate units and vanish; runs of n >= 2 spaces become a
/// `<SPC{n}>` unit; tab, CR, LF, VT and FF each become their own unit.
pub fn pretokenize(text: &str) -> Vec<WordUnit> {
    let mut units = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0usize;
    let mut word_start: Option<usize> = None;

    let flush_word = |units: &mut Vec<WordUnit>, start: usize, end: usize| {
        if end > start {
            units.push(WordUnit {
                text: text[start..end].to_string(),
                start,
                len: end - start,
                is_meta: false,
            });
        }
    };

    while i < bytes.len() {
        let b = bytes[i];
        let ws_unit = match b {
            b'\t' => Some("<TAB>"),
            b'\r' => Some("<CR>"),
            b'\n' => Some("<LF>"),
            0x0b => Some("<VT>"),
            0x0c => Some("<FF>"),
            _ => None,
        };
        if b == b' ' {
            if let Some(ws) = word_start.take() {
                flush_word(&mut units, ws, i);
            }
            let run_start = i;
            while i < bytes.len() && bytes[i] == b' ' {
                i += 1;
            }
            let n = i - run_start;
            if n >= 2 {
                units.push(WordUnit {
                    text: format!("<SPC{n}>"),
                    start: run_start,
                    len: n,
                    is_meta: true,
                });
            }
        } else if let Some(unit) = ws_unit {
            if let Some(ws) = word_start.take() {
                flush_word(&mut units, ws, i);
            }
            units.push(WordUnit {
                text: unit.to_string(),
                start: i,
                len: 1,
                is_meta: true,
            });
            i += 1;
        } else {
            if word_start.is_none() {
                word_start = Some(i);
            }
            i += 1;
        }
    }
    if let Some(ws) = word_start {
        flush_word(&mut units, ws, bytes.len());
    }
    units
}

/// The ids of the five bookkeeping tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub unk: u32,
    pub mask: u32,
    pub cls: u32,
    pub sep: u32,
}

/// A trained subword vocabulary. Immutable after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerModel {
    pub version: u32,
    pub pretokenize_version: u32,
    pub continuation_prefix: String,
    pub special: SpecialTokens,
    /// Token strings in id order; ids are dense in `[0, vocab_size)`.
    pub vocab: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.pretokenize_version == other.pretokenize_version
            && self.continuation_prefix == other.continuation_prefix
            && self.special == other.special
            && self.vocab == other.vocab
    }
}

impl TokenizerModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(|s| s.as_str())
    }

    pub fn meta_token_ids(&self) -> Vec<u32> {
        META_TOKENS.iter().map(|t| self.id_of(t).unwrap()).collect()
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tokenizer model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let mut model: TokenizerModel = serde_json::from_str(json)?;
        if model.version != MODEL_VERSION {
            return Err(TokenizerError::VersionMismatch(model.version));
        }
        model.rebuild_lookup();
        Ok(model)
    }

    /// Content hash binding checkpoints to the tokenizer they were trained with.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A tokenized command. Offsets index into the source normalized text;
/// synthetic tokens carry zero-length offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
    /// Byte length of the encoded source text (restores trailing spaces).
    pub text_len: usize,
    pub truncated: bool,
}

// ---------------------------------------------------------------------------
// Training

/// Symbol table entry used during merge training. Meta tokens are atomic:
/// they never participate in merges, so they always stay single entries.
#[derive(Clone)]
struct Symbol {
    text: String,
    mergeable: bool,
}

/// Splits a word into its initial training symbols: meta tokens are carved
/// out as atomic symbols, everything else becomes per-character symbols with
/// `##` continuation marking.
fn word_symbols(word: &str) -> Vec<Symbol> {
    let mut symbols = Vec::new();
    let mut rest = word;
    let mut at_word_start = true;
    while !rest.is_empty() {
        let meta_hit = META_TOKENS
            .iter()
            .filter_map(|m| rest.find(m).map(|pos| (pos, *m)))
            .min();
        let (plain, meta) = match meta_hit {
            Some((pos, m)) => (&rest[..pos], Some(m)),
            None => (rest, None),
        };
        for ch in plain.chars() {
            let text = if at_word_start {
                ch.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{ch}")
            };
            symbols.push(Symbol {
                text,
                mergeable: true,
            });
            at_word_start = false;
        }
        match meta {
            Some(m) => {
                symbols.push(Symbol {
                    text: m.to_string(),
                    mergeable: false,
                });
                at_word_start = false;
                rest = &rest[plain.len() + m.len()..];
            }
            None => break,
        }
    }
    symbols
}

/// Trains a vocabulary on an iterator of normalized command lines.
///
/// Deterministic given corpus order and parameters: ties in the pair score
/// are broken by the lexicographically smallest (left, right) token pair.
pub fn train<I, S>(
    corpus: I,
    vocab_size: usize,
    min_frequency: u64,
) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut spc_units: Vec<String> = Vec::new();
    let mut seen_any = false;
    for line in corpus {
        seen_any = true;
        for unit in pretokenize(line.as_ref()) {
            if unit.is_meta {
                if unit.text.starts_with("<SPC") && !spc_units.contains(&unit.text) {
                    spc_units.push(unit.text);
                }
                continue;
            }
            *word_counts.entry(unit.text).or_insert(0) += 1;
        }
    }
    if !seen_any {
        return Err(TokenizerError::EmptyCorpus);
    }
    spc_units.sort_by_key(|s| {
        s.trim_start_matches("<SPC")
            .trim_end_matches('>')
            .parse::<u64>()
            .unwrap_or(0)
    });

    // Deterministic word order.
    let mut words: Vec<(Vec<Symbol>, u64)> = {
        let mut sorted: Vec<_> = word_counts.into_iter().collect();
        sorted.sort();
        sorted
            .into_iter()
            .map(|(w, c)| (word_symbols(&w), c))
            .collect()
    };

    // Base vocabulary: specials, meta tokens, whitespace units, alphabet.
    let mut vocab: Vec<String> = vec![
        PAD.to_string(),
        UNK.to_string(),
        MASK.to_string(),
        CLS.to_string(),
        SEP.to_string(),
    ];
    vocab.extend(META_TOKENS.iter().map(|s| s.to_string()));
    vocab.extend(WS_UNITS.iter().map(|(s, _)| s.to_string()));
    vocab.extend(spc_units);
    let mut alphabet: Vec<String> = words
        .iter()
        .flat_map(|(syms, _)| syms.iter())
        .filter(|s| s.mergeable)
        .map(|s| s.text.clone())
        .collect();
    alphabet.sort();
    alphabet.dedup();
    for a in alphabet {
        if !vocab.contains(&a) {
            vocab.push(a);
        }
    }
    if vocab_size < vocab.len() {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            required: vocab.len(),
        });
    }

    // Merge loop: likelihood score pair_freq / (left_freq * right_freq).
    while vocab.len() < vocab_size {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        let mut symbol_counts: HashMap<String, u64> = HashMap::new();
        for (syms, count) in &words {
            for s in syms.iter().filter(|s| s.mergeable) {
                *symbol_counts.entry(s.text.clone()).or_insert(0) += count;
            }
            for pair in syms.windows(2) {
                if pair[0].mergeable && pair[1].mergeable {
                    *pair_counts
                        .entry((pair[0].text.clone(), pair[1].text.clone()))
                        .or_insert(0) += count;
                }
            }
        }
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= min_frequency)
            .map(|((l, r), &c)| {
                let score =
                    c as f64 / (symbol_counts[l] as f64 * symbol_counts[r] as f64);
                (score, l.clone(), r.clone())
            })
            .max_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap()
                    // Prefer the lexicographically smaller pair on ties.
                    .then_with(|| (&b.1, &b.2).cmp(&(&a.1, &a.2)))
            });
        let Some((_, left, right)) = best else {
            break; // merges exhausted
        };
        let merged = format!("{left}{}", right.trim_start_matches(CONTINUATION_PREFIX));
        vocab.push(merged.clone());
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i].text == left && syms[i + 1].text == right && syms[i].mergeable {
                    syms[i].text = merged.clone();
                    syms.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }

    let mut model = TokenizerModel {
        version: MODEL_VERSION,
        pretokenize_version: PRETOKENIZE_VERSION,
        continuation_prefix: CONTINUATION_PREFIX.to_string(),
        special: SpecialTokens {
            pad: 0,
            unk: 1,
            mask: 2,
            cls: 3,
            sep: 4,
        },
        vocab,
        lookup: HashMap::new(),
    };
    model.rebuild_lookup();
    Ok(model)
}

// ---------------------------------------------------------------------------
// Encoding

/// Greedy longest-match split of one word into ids. Returns `None` when the
/// word cannot be covered, in which case the caller emits a single [UNK].
fn wordpiece(model: &TokenizerModel, word: &str, word_start: usize) -> Option<Vec<(u32, (usize, usize))>> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    let mut first = true;
    while pos < word.len() {
        let rest = &word[pos..];
        // Meta tokens match atomically, without a continuation prefix.
        if let Some(m) = META_TOKENS.iter().find(|m| rest.starts_with(**m)) {
            let id = model.id_of(m)?;
            out.push((id, (word_start + pos, m.len())));
            pos += m.len();
            first = false;
            continue;
        }
        // Longest candidate that does not run into a meta token.
        let limit = META_TOKENS
            .iter()
            .filter_map(|m| rest.find(m))
            .min()
            .unwrap_or(rest.len());
        let mut matched = None;
        let mut end = limit;
        while end > 0 {
            if rest.is_char_boundary(end) {
                let candidate = &rest[..end];
                let key = if first {
                    candidate.to_string()
                } else {
                    format!("{}{candidate}", model.continuation_prefix)
                };
                if let Some(id) = model.id_of(&key) {
                    matched = Some((id, end));
                    break;
                }
            }
            end -= 1;
        }
        let (id, len) = matched?;
        out.push((id, (word_start + pos, len)));
        pos += len;
        first = false;
    }
    Some(out)
}

/// Encodes a normalized command: `[CLS]` + subwords + `[SEP]`, truncated to
/// `max_len` keeping `[CLS]` and the final `[SEP]`.
pub fn encode(model: &TokenizerModel, text: &str, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must be >= 2");
    let mut ids = vec![model.special.cls];
    let mut offsets = vec![(0usize, 0usize)];
    for unit in pretokenize(text) {
        if unit.is_meta {
            let id = model.id_of(&unit.text).unwrap_or(model.special.unk);
            ids.push(id);
            offsets.push((unit.start, unit.len));
            continue;
        }
        match wordpiece(model, &unit.text, unit.start) {
            Some(pieces) => {
                for (id, off) in pieces {
                    ids.push(id);
                    offsets.push(off);
                }
            }
            None => {
                ids.push(model.special.unk);
                offsets.push((unit.start, unit.len));
            }
        }
    }
    ids.push(model.special.sep);
    offsets.push((text.len(), 0));
    let truncated = ids.len() > max_len;
    if truncated {
        ids.truncate(max_len - 1);
        offsets.truncate(max_len - 1);
        ids.push(model.special.sep);
        offsets.push((text.len(), 0));
    }
    TokenSequence {
        ids,
        offsets,
        text_len: text.len(),
        truncated,
    }
}

/// Reconstructs the normalized text from a non-truncated, [UNK]-free
/// sequence via recorded offsets. Gaps between token spans are single
/// spaces by pretokenization construction.
pub fn decode(model: &TokenizerModel, seq: &TokenSequence) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(seq.text_len);
    let synthetic = [model.special.pad, model.special.cls, model.special.sep];
    for (&id, &(start, len)) in seq.ids.iter().zip(&seq.offsets) {
        if synthetic.contains(&id) {
            continue;
        }
        if id == model.special.unk {
            return Err(TokenizerError::UnknownNotReconstructible);
        }
        let token = model
            .token_of(id)
            .ok_or(TokenizerError::IdOutOfRange(id))?;
        while out.len() < start {
            out.push(' ');
        }
        if let Some((_, ch)) = WS_UNITS.iter().find(|(u, _)| *u == token) {
            out.push(*ch);
        } else if token.starts_with("<SPC") && token.ends_with('>') {
            for _ in 0..len {
                out.push(' ');
            }
        } else {
            out.push_str(token.trim_start_matches(model.continuation_prefix.as_str()));
        }
    }
    while out.len() < seq.text_len {
        out.push(' ');
    }
    Ok(out)
}

/// Per-model compression totals over an evaluation corpus.
#[derive(Debug, Clone, Serialize)]
pub struct CompressionRow {
    pub vocab_size: usize,
    pub total_tokens: usize,
    pub total_chars: usize,
    pub tokens_per_char: f64,
}

/// Exact total token count per model over a corpus.
pub fn compression_report(models: &[&TokenizerModel], corpus: &[String]) -> Vec<CompressionRow> {
    models
        .iter()
        .map(|model| {
            let mut total_tokens = 0usize;
            let mut total_chars = 0usize;
            for line in corpus {
                total_tokens += encode(model, line, usize::MAX / 2).ids.len();
                total_chars += line.chars().count();
            }
            CompressionRow {
                vocab_size: model.vocab_size(),
                total_tokens,
                total_chars,
                tokens_per_char: total_tokens as f64 / total_chars.max(1) as f64,
            }
        })
        .collect()
}

/// A character-level baseline model over the given corpus: specials plus
/// alphabet only, no learned merges. The worst case for compression.
pub fn char_baseline<I, S>(corpus: I) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    // min_frequency u64::MAX suppresses every merge; vocab = base entries only.
    train(corpus, usize::MAX / 2, u64::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(units: &[WordUnit]) -> Vec<&str> {
        units.iter().map(|u| u.text.as_str()).collect()
    }

    #[test]
    fn pretokenize_simple() {
        assert_eq!(texts(&pretokenize("cmd.exe /c dir")), vec!["cmd.exe", "/c", "dir"]);
    }

    #[test]
    fn pretokenize_whitespace_units() {
        assert_eq!(
            texts(&pretokenize("cmd.exe\r\r\t/RCmD<qjM.chK")),
            vec!["cmd.exe", "<CR>", "<CR>", "<TAB>", "/RCmD<qjM.chK"]
        );
    }

    #[test]
    fn pretokenize_space_runs() {
        assert_eq!(texts(&pretokenize("a  b")), vec!["a", "<SPC2>", "b"]);
        assert_eq!(texts(&pretokenize("a     b")), vec!["a", "<SPC5>", "b"]);
    }

    #[test]
    fn train_learns_frequent_pair() {
        let corpus = vec!["abab", "abab"];
        let base = train(corpus.clone(), 10_000_000, u64::MAX).unwrap();
        let model = train(corpus, base.vocab_size() + 2, 2).unwrap();
        assert!(model.id_of("ab").is_some() || model.id_of("##ab").is_some());
    }

    #[test]
    fn vocab_too_small_rejected() {
        assert!(matches!(
            train(vec!["abc"], 5, 2),
            Err(TokenizerError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<&str> = vec![];
        assert!(matches!(train(empty, 100, 2), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn encode_empty() {
        let model = train(vec!["abc"], 100, 2).unwrap();
        let seq = encode(&model, "", 16);
        assert_eq!(seq.ids, vec![model.special.cls, model.special.sep]);
    }

    #[test]
    fn encode_meta_token_single_id() {
        let model = train(vec![r"/C C:\WINDOWS\TEMP\{[GUID]}.bat"], 200, 2).unwrap();
        let seq = encode(&model, r"/C C:\WINDOWS\TEMP\{[GUID]}.bat", 128);
        let guid_id = model.id_of("[GUID]").unwrap();
        assert_eq!(seq.ids.iter().filter(|&&i| i == guid_id).count(), 1);
    }

    #[test]
    fn unknown_word_single_unk() {
        let model = train(vec!["abc abc"], 100, 2).unwrap();
        let seq = encode(&model, "xyzzyq", 16);
        assert_eq!(
            seq.ids,
            vec![model.special.cls, model.special.unk, model.special.sep]
        );
    }

    #[test]
    fn decode_roundtrip() {
        let line = r"cmd.exe /c  dir C:\x\{[GUID]}.bat";
        let model = train(vec![line], 300, 2).unwrap();
        let seq = encode(&model, line, 256);
        assert_eq!(decode(&model, &seq).unwrap(), line);
    }

    #[test]
    fn decode_whitespace_roundtrip() {
        let line = "cmd.exe\r\r\t/R x  y";
        let model = train(vec![line], 300, 2).unwrap();
        let seq = encode(&model, line, 256);
        assert_eq!(decode(&model, &seq).unwrap(), line);
    }

    #[test]
    fn truncation_keeps_cls_and_sep() {
        let line = "a b c d e f g h i j";
        let model = train(vec![line], 100, 2).unwrap();
        let seq = encode(&model, line, 5);
        assert!(seq.truncated);
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.ids[0], model.special.cls);
        assert_eq!(*seq.ids.last().unwrap(), model.special.sep);
    }

    #[test]
    fn deterministic_training() {
        let corpus: Vec<String> = (0..50)
            .map(|i| format!("cmd.exe /c echo item{} && ping host{}", i % 7, i % 5))
            .collect();
        let a = train(corpus.clone(), 300, 2).unwrap();
        let b = train(corpus, 300, 2).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn case_sensitivity_preserved() {
        let corpus = vec!["PowerShell PowerShell", "powershell powershell"];
        let model = train(corpus, 10_000, 1).unwrap();
        let upper = encode(&model, "PowerShell", 64);
        let lower = encode(&model, "powershell", 64);
        assert_ne!(upper.ids, lower.ids);
    }

    #[test]
    fn serialization_roundtrip() {
        let model = train(vec!["cmd.exe /c dir"], 200, 2).unwrap();
        let json = model.to_json();
        let back = TokenizerModel::from_json(&json).unwrap();
        assert_eq!(model, back);
        assert_eq!(model.content_hash(), back.content_hash());
    }

    #[test]
    fn greedy_longest_match_property() {
        let corpus: Vec<String> = (0..200)
            .map(|i| format!("cmd.exe /c echo test{} value", i % 9))
            .collect();
        let model = train(corpus, 400, 2).unwrap();
        let word = "cmd.exe";
        let pieces = wordpiece(&model, word, 0).unwrap();
        let (first_id, (_, first_len)) = pieces[0];
        let _ = first_id;
        // No strictly longer prefix of the word is in the vocabulary.
        for end in first_len + 1..=word.len() {
            if word.is_char_boundary(end) {
                assert!(model.id_of(&word[..end]).is_none());
            }
        }
    }
}
