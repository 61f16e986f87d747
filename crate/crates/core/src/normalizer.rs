//! Rewrites semantically irrelevant value patterns (GUIDs, IPs, dates,
//! numbers, URLs) in raw command lines into generic meta-tokens.
//!
//! Pattern matching is deliberately strict: obfuscated variants (mixed-case
//! URL schemes, bracketed dots, inserted characters) fail to match and
//! survive normalization verbatim, which is exactly the signal the
//! downstream classifier needs.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five replaceable pattern kinds, in precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatternKind {
    Url,
    Guid,
    Ip,
    Date,
    Num,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] = [
        PatternKind::Url,
        PatternKind::Guid,
        PatternKind::Ip,
        PatternKind::Date,
        PatternKind::Num,
    ];

    /// The reserved meta-token literal substituted for this pattern.
    pub fn meta_token(self) -> &'static str {
        match self {
            PatternKind::Guid => "[GUID]",
            PatternKind::Ip => "[IP]",
            PatternKind::Date => "[DATE]",
            PatternKind::Num => "[NUM]",
            PatternKind::Url => "[URL]",
        }
    }
}

/// All meta-token literals, for reservation in the tokenizer vocabulary.
pub const META_TOKENS: [&str; 5] = ["[GUID]", "[IP]", "[DATE]", "[NUM]", "[URL]"];

/// A detected pattern occurrence: byte span into the (sanitized) raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub kind: PatternKind,
    pub start: usize,
    pub len: usize,
}

/// One replacement performed by [`normalize`].
///
/// `text_pos` is the byte offset of the meta-token in the normalized text;
/// recording it makes reconstruction unambiguous even when the raw input
/// already contained a meta-token literal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub kind: PatternKind,
    pub original_start: usize,
    pub original_len: usize,
    pub original_text: String,
    pub text_pos: usize,
}

/// A command with value patterns rewritten to meta-tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedCommand {
    pub text: String,
    pub replacements: Vec<Replacement>,
}

#[derive(Debug, Error)]
pub enum NormalizerError {
    #[error("replacement {index} does not match a meta-token at text offset {pos}")]
    MalformedReplacement { index: usize, pos: usize },
}

static URL_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"(?:https?|ftp)://[^\s"']+"#).unwrap());
static GUID_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"[0-9A-Fa-f]{8}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{4}-[0-9A-Fa-f]{12}")
        .unwrap()
});
static IPV4_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\d{1,3}(?:\.\d{1,3}){3}").unwrap());
static IPV6_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"[0-9A-Fa-f]{0,4}(?::[0-9A-Fa-f]{0,4}){2,7}").unwrap());
static DATE_SEP_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"\d{4}-\d{2}-\d{2}|\d{4}/\d{2}/\d{2}|\d{2}\.\d{2}\.\d{4}|\d{2}/\d{2}/\d{4}")
        .unwrap()
});
static DATE_COMPACT_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\d{8}").unwrap());
static NUM_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\d+").unwrap());

fn byte_at(s: &str, idx: usize) -> Option<u8> {
    s.as_bytes().get(idx).copied()
}

fn is_alnum(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

fn is_letter(b: u8) -> bool {
    b.is_ascii_alphabetic()
}

fn bounded(s: &str, start: usize, end: usize, accepted: &[Detection]) -> bool {
    let before_ok =
        start == 0 || touches_detection(accepted, start) || !is_alnum(byte_at(s, start - 1).unwrap());
    let after_ok =
        end == s.len() || touches_detection(accepted, end) || !is_alnum(byte_at(s, end).unwrap());
    before_ok && after_ok
}

fn valid_ipv4(text: &str) -> bool {
    text.split('.')
        .all(|octet| octet.parse::<u16>().map(|v| v <= 255).unwrap_or(false))
}

fn valid_ipv6(text: &str) -> bool {
    // Colon-separated hex groups with at most one "::" compression.
    let compressions = text.matches("::").count();
    if compressions > 1 || text.contains(":::") {
        return false;
    }
    let groups: Vec<&str> = text.split(':').collect();
    if groups.len() < 3 || groups.len() > 8 {
        return false;
    }
    let empty = groups.iter().filter(|g| g.is_empty()).count();
    if compressions == 0 && empty > 0 {
        return false;
    }
    if compressions == 0 && groups.len() != 8 {
        return false;
    }
    let nonempty: Vec<&str> = groups.iter().copied().filter(|g| !g.is_empty()).collect();
    // Require at least two real groups so stray "a::" noise is not an address.
    nonempty.len() >= 2
        && nonempty
            .iter()
            .all(|g| g.len() <= 4 && g.chars().all(|c| c.is_ascii_hexdigit()))
}

fn valid_compact_date(text: &str) -> bool {
    // YYYYMMDD: constrain month and day so arbitrary 8-digit numbers stay NUM.
    let month: u32 = text[4..6].parse().unwrap();
    let day: u32 = text[6..8].parse().unwrap();
    (1..=12).contains(&month) && (1..=31).contains(&day)
}

fn overlaps(accepted: &[Detection], start: usize, end: usize) -> bool {
    accepted
        .iter()
        .any(|d| start < d.start + d.len && d.start < end)
}

/// Whether an already-accepted detection starts or ends exactly at `pos`.
/// A span butted against a higher-precedence pattern is as bounded as one
/// next to punctuation; without this, replacing the neighbor would create
/// a fresh boundary and a second normalize pass would find new matches.
fn touches_detection(accepted: &[Detection], pos: usize) -> bool {
    accepted.iter().any(|d| d.start == pos || d.start + d.len == pos)
}

fn push_matches(
    accepted: &mut Vec<Detection>,
    text: &str,
    kind: PatternKind,
    re: &Regex,
    filter: impl Fn(&str, usize, usize, &[Detection]) -> bool,
) {
    for m in re.find_iter(text) {
        if overlaps(accepted, m.start(), m.end()) {
            continue;
        }
        if !filter(m.as_str(), m.start(), m.end(), accepted) {
            continue;
        }
        accepted.push(Detection {
            kind,
            start: m.start(),
            len: m.len(),
        });
    }
}

/// Replaces invalid UTF-8 upstream of this module; here input is `&str`.
/// Finds all pattern occurrences, non-overlapping, precedence
/// URL > GUID > IP > DATE > NUM, sorted by start offset.
pub fn detect_patterns(raw: &str) -> Vec<Detection> {
    let mut accepted: Vec<Detection> = Vec::new();

    push_matches(&mut accepted, raw, PatternKind::Url, &URL_RE, |_, _, _, _| true);
    push_matches(&mut accepted, raw, PatternKind::Guid, &GUID_RE, |_, s, e, acc| {
        // Not embedded in a longer hex/hyphen run.
        let before = s == 0 || touches_detection(acc, s) || {
            let b = byte_at(raw, s - 1).unwrap();
            !b.is_ascii_hexdigit() && b != b'-'
        };
        let after = e == raw.len() || touches_detection(acc, e) || {
            let b = byte_at(raw, e).unwrap();
            !b.is_ascii_hexdigit() && b != b'-'
        };
        before && after
    });
    push_matches(&mut accepted, raw, PatternKind::Ip, &IPV4_RE, |t, s, e, acc| {
        let before = s == 0 || touches_detection(acc, s) || {
            let b = byte_at(raw, s - 1).unwrap();
            !b.is_ascii_digit() && b != b'.'
        };
        let after = e == raw.len() || touches_detection(acc, e) || {
            let b = byte_at(raw, e).unwrap();
            !b.is_ascii_digit() && b != b'.'
        };
        before && after && valid_ipv4(t)
    });
    push_matches(&mut accepted, raw, PatternKind::Ip, &IPV6_RE, |t, s, e, acc| {
        let before = s == 0 || touches_detection(acc, s) || {
            let b = byte_at(raw, s - 1).unwrap();
            !b.is_ascii_hexdigit() && b != b':'
        };
        let after = e == raw.len() || touches_detection(acc, e) || {
            let b = byte_at(raw, e).unwrap();
            !b.is_ascii_hexdigit() && b != b':'
        };
        before && after && t.contains(':') && valid_ipv6(t)
    });
    push_matches(&mut accepted, raw, PatternKind::Date, &DATE_SEP_RE, |_, s, e, acc| {
        bounded(raw, s, e, acc)
    });
    push_matches(
        &mut accepted,
        raw,
        PatternKind::Date,
        &DATE_COMPACT_RE,
        |t, s, e, acc| bounded(raw, s, e, acc) && valid_compact_date(t),
    );
    push_matches(&mut accepted, raw, PatternKind::Num, &NUM_RE, |_, s, e, acc| {
        // Digit runs glued to letters (System32) are part of the word.
        let before = s == 0 || touches_detection(acc, s) || !is_letter(byte_at(raw, s - 1).unwrap());
        let after = e == raw.len() || touches_detection(acc, e) || !is_letter(byte_at(raw, e).unwrap());
        before && after
    });

    accepted.sort_by_key(|d| d.start);
    accepted
}

/// Decodes bytes as UTF-8 with replacement characters, then normalizes.
pub fn normalize_bytes(raw: &[u8]) -> NormalizedCommand {
    normalize(&String::from_utf8_lossy(raw))
}

/// Replaces every detected pattern span with its kind's meta-token.
pub fn normalize(raw: &str) -> NormalizedCommand {
    let detections = detect_patterns(raw);
    let mut text = String::with_capacity(raw.len());
    let mut replacements = Vec::with_capacity(detections.len());
    let mut cursor = 0usize;
    for det in &detections {
        text.push_str(&raw[cursor..det.start]);
        let text_pos = text.len();
        text.push_str(det.kind.meta_token());
        replacements.push(Replacement {
            kind: det.kind,
            original_start: det.start,
            original_len: det.len,
            original_text: raw[det.start..det.start + det.len].to_string(),
            text_pos,
        });
        cursor = det.start + det.len;
    }
    text.push_str(&raw[cursor..]);
    NormalizedCommand { text, replacements }
}

/// Reconstructs the original raw string byte-for-byte.
pub fn denormalize(nc: &NormalizedCommand) -> Result<String, NormalizerError> {
    let mut out = String::with_capacity(nc.text.len());
    let mut cursor = 0usize;
    for (index, rep) in nc.replacements.iter().enumerate() {
        let token = rep.kind.meta_token();
        if rep.text_pos < cursor
            || rep.text_pos + token.len() > nc.text.len()
            || &nc.text[rep.text_pos..rep.text_pos + token.len()] != token
        {
            return Err(NormalizerError::MalformedReplacement {
                index,
                pos: rep.text_pos,
            });
        }
        out.push_str(&nc.text[cursor..rep.text_pos]);
        out.push_str(&rep.original_text);
        cursor = rep.text_pos + token.len();
    }
    out.push_str(&nc.text[cursor..]);
    Ok(out)
}
