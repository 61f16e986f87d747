//! Synthetic obfuscation: seedable, semantics-shaped rewrites of benign
//! commands, one per catalog technique, each with a de-obfuscation oracle.
//!
//! The transforms re-create the catalog natively instead of shelling out to
//! the original PowerShell tooling. Encodings embed the payload in a
//! decode-and-invoke stub whose blob the oracle can extract and invert, so
//! every sample labeled obfuscated is verifiably a transformation of its
//! original. Secure-string encoding is a keyed byte-scramble surrogate with
//! the same shape (opaque blob + key + decode stub) as the real thing.

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ExecutionLog;

/// Shell family a technique applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shell {
    PowershellLike,
    CmdLike,
    Any,
}

/// How oracle output is compared against the original command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    Exact,
    /// Case information is destroyed by the transform; compare folded.
    CaseInsensitive,
}

macro_rules! techniques {
    ($(($variant:ident, $name:literal, $shell:ident, $reversible:literal)),+ $(,)?) => {
        /// The obfuscation technique catalog.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum Technique {
            $($variant),+
        }

        impl Technique {
            pub const ALL: &'static [Technique] = &[$(Technique::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $(Technique::$variant => $name),+
                }
            }

            pub fn from_name(name: &str) -> Option<Technique> {
                match name {
                    $($name => Some(Technique::$variant)),+,
                    _ => None,
                }
            }

            pub fn shell(self) -> Shell {
                match self {
                    $(Technique::$variant => Shell::$shell),+
                }
            }

            pub fn reversible(self) -> bool {
                match self {
                    $(Technique::$variant => $reversible),+
                }
            }
        }
    };
}

techniques![
    (TokenObfuscation, "token_obfuscation", PowershellLike, true),
    (CommandCompressing, "command_compressing", PowershellLike, true),
    (EncodingAscii, "encoding_ascii", PowershellLike, true),
    (EncodingHex, "encoding_hex", PowershellLike, true),
    (EncodingOctal, "encoding_octal", PowershellLike, true),
    (EncodingBinary, "encoding_binary", PowershellLike, true),
    (EncodingSecurestringSurrogate, "encoding_securestring_surrogate", PowershellLike, true),
    (EncodingBxor, "encoding_bxor", PowershellLike, true),
    (EncodingSpecialChars, "encoding_special_chars", PowershellLike, true),
    (EncodingWhitespace, "encoding_whitespace", PowershellLike, true),
    (StringConcatenate, "string_concatenate", PowershellLike, true),
    (StringConcatenateReorder, "string_concatenate_reorder", PowershellLike, true),
    (EnvVariableLight, "env_variable_light", CmdLike, true),
    (EnvVariableMedium, "env_variable_medium", CmdLike, true),
    (PayloadConcatLight, "payload_concat_light", CmdLike, true),
    (PayloadConcatMedium, "payload_concat_medium", CmdLike, true),
    (PayloadReverseLight, "payload_reverse_light", CmdLike, true),
    (PayloadReverseMedium, "payload_reverse_medium", CmdLike, true),
    (PayloadForcode, "payload_forcode", CmdLike, true),
    (CaretInsertion, "caret_insertion", Any, true),
    (WhitespaceInsertion, "whitespace_insertion", Any, true),
    (CaseMixing, "case_mixing", Any, true),
];

impl Technique {
    pub fn verify_mode(self) -> VerifyMode {
        match self {
            Technique::TokenObfuscation | Technique::CaseMixing => VerifyMode::CaseInsensitive,
            _ => VerifyMode::Exact,
        }
    }

    /// Fixed intensity tier for light/medium techniques, if any.
    pub fn tier_intensity(self) -> Option<f64> {
        match self {
            Technique::EnvVariableLight
            | Technique::PayloadConcatLight
            | Technique::PayloadReverseLight => Some(0.3),
            Technique::EnvVariableMedium
            | Technique::PayloadConcatMedium
            | Technique::PayloadReverseMedium => Some(0.7),
            _ => None,
        }
    }
}

/// A generated sample. `obfuscated` differs from `original` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscatedSample {
    pub original: String,
    pub obfuscated: String,
    pub technique: Technique,
    pub seed: u64,
    pub intensity: f64,
}

#[derive(Debug, Error)]
pub enum ObfugenError {
    #[error("technique {technique} inapplicable: {reason}")]
    Inapplicable {
        technique: &'static str,
        reason: String,
    },
    #[error("unterminated quote in command")]
    UnterminatedQuote,
    #[error("oracle could not parse {technique} structure: {reason}")]
    OracleParse {
        technique: &'static str,
        reason: String,
    },
    #[error("intensity {0} outside [0,1]")]
    BadIntensity(f64),
}

fn inapplicable(technique: Technique, reason: impl Into<String>) -> ObfugenError {
    ObfugenError::Inapplicable {
        technique: technique.name(),
        reason: reason.into(),
    }
}

/// Splits a log into (binary_path, argument_string). Quoted binary paths
/// keep their quotes; rejoining with one space is the canonical form.
pub fn split_binary_and_args(log: &ExecutionLog) -> Result<(String, String), ObfugenError> {
    let raw = log.raw.trim();
    if let Some(rest) = raw.strip_prefix('"') {
        match rest.find('"') {
            Some(end) => {
                let binary = &raw[..end + 2];
                let args = raw[end + 2..].trim_start();
                Ok((binary.to_string(), args.to_string()))
            }
            None => Err(ObfugenError::UnterminatedQuote),
        }
    } else {
        match raw.find(' ') {
            Some(pos) => Ok((raw[..pos].to_string(), raw[pos + 1..].trim_start().to_string())),
            None => Ok((raw.to_string(), String::new())),
        }
    }
}

// ---------------------------------------------------------------------------
// Per-technique transforms

fn char_codes(command: &str) -> Vec<u32> {
    command.chars().map(|c| c as u32).collect()
}

fn join_stub(body: &str) -> String {
    format!("IEX ([string]::Join('',({body})))")
}

fn keystream_byte(key: u64, index: usize) -> u8 {
    // Small deterministic keystream; the key is embedded in the stub.
    let x = key
        .wrapping_mul(6364136223846793005)
        .wrapping_add((index as u64).wrapping_mul(1442695040888963407));
    (x >> 33) as u8
}

fn pieces_for(intensity: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // Cut points for splitting a string of `len` chars into 2..=6 pieces.
    let target = 2 + (intensity * 4.0).round() as usize;
    let target = target.min(len.max(2)).max(2);
    let mut cuts: Vec<usize> = (1..len).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(target - 1).collect();
    cuts.sort_unstable();
    cuts
}

fn split_at_cuts(s: &str, cuts: &[usize]) -> Vec<String> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut prev = 0;
    for &c in cuts {
        out.push(chars[prev..c].iter().collect());
        prev = c;
    }
    out.push(chars[prev..].iter().collect());
    out
}

fn find_quoted_literal(command: &str) -> Option<(usize, usize, char)> {
    // First '...' or "..." span with at least 2 content chars.
    for quote in ['\'', '"'] {
        let mut search = 0usize;
        while let Some(open) = command[search..].find(quote) {
            let open = search + open;
            if let Some(close) = command[open + 1..].find(quote) {
                let close = open + 1 + close;
                if command[open + 1..close].chars().count() >= 2 {
                    return Some((open, close, quote));
                }
                search = close + 1;
            } else {
                break;
            }
        }
    }
    None
}

fn apply_impl(
    technique: Technique,
    command: &str,
    seed: u64,
    intensity: f64,
    rng: &mut ChaCha8Rng,
) -> Result<String, ObfugenError> {
    match technique {
        Technique::TokenObfuscation => {
            // Backtick insertion plus case mixing of unquoted letters.
            let escape_like = ['t', 'n', 'r', '0', 'a', 'b', 'f', 'v', 'e', 'u'];
            if command.contains('`') {
                return Err(inapplicable(technique, "command already contains backticks"));
            }
            let mut out = String::new();
            let mut in_quotes = false;
            let mut changed = false;
            for c in command.chars() {
                if c == '"' || c == '\'' {
                    in_quotes = !in_quotes;
                }
                if !in_quotes
                    && c.is_ascii_alphabetic()
                    && !escape_like.contains(&c.to_ascii_lowercase())
                    && rng.gen_bool(intensity.max(0.05))
                {
                    out.push('`');
                    changed = true;
                }
                if c.is_ascii_alphabetic() && rng.gen_bool(0.5) {
                    if c.is_ascii_lowercase() {
                        out.push(c.to_ascii_uppercase());
                        changed = true;
                    } else {
                        out.push(c.to_ascii_lowercase());
                        changed = true;
                    }
                } else {
                    out.push(c);
                }
            }
            if !changed {
                return Err(inapplicable(technique, "no eligible characters"));
            }
            Ok(out)
        }
        Technique::CommandCompressing => {
            let blob = B64.encode(command.as_bytes());
            Ok(format!(
                "IEX (New-Object IO.StreamReader((New-Object IO.Compression.DeflateStream([IO.MemoryStream][Convert]::FromBase64String('{blob}'),[IO.Compression.CompressionMode]::Decompress)),[Text.Encoding]::ASCII)).ReadToEnd()"
            ))
        }
        Technique::EncodingAscii => {
            let codes: Vec<String> = char_codes(command).iter().map(|c| c.to_string()).collect();
            Ok(join_stub(&format!("({})|%{{[char]$_}}", codes.join(","))))
        }
        Technique::EncodingHex => {
            let codes: Vec<String> = char_codes(command)
                .iter()
                .map(|c| format!("0x{c:x}"))
                .collect();
            Ok(join_stub(&format!("({})|%{{[char]$_}}", codes.join(","))))
        }
        Technique::EncodingOctal => {
            let codes: Vec<String> = char_codes(command)
                .iter()
                .map(|c| format!("'{c:o}'"))
                .collect();
            Ok(join_stub(&format!(
                "({})|%{{[char][convert]::ToInt32($_,8)}}",
                codes.join(",")
            )))
        }
        Technique::EncodingBinary => {
            let codes: Vec<String> = char_codes(command)
                .iter()
                .map(|c| format!("'{c:b}'"))
                .collect();
            Ok(join_stub(&format!(
                "({})|%{{[char][convert]::ToInt32($_,2)}}",
                codes.join(",")
            )))
        }
        Technique::EncodingSecurestringSurrogate => {
            let key = seed | 1;
            let scrambled: Vec<u8> = command
                .as_bytes()
                .iter()
                .enumerate()
                .map(|(i, b)| b ^ keystream_byte(key, i))
                .collect();
            let blob = B64.encode(&scrambled);
            Ok(format!(
                "$k={key};$s=ConvertTo-SecureString -String '{blob}' -Key $k;IEX $s"
            ))
        }
        Technique::EncodingBxor => {
            let key: u8 = rng.gen_range(1..=255);
            let hex: String = command
                .as_bytes()
                .iter()
                .map(|b| format!("{:02x}", b ^ key))
                .collect();
            Ok(join_stub(&format!(
                "([convert]::FromHexString('{hex}'))|%{{[char]($_ -bxor 0x{key:02x})}}"
            )))
        }
        Technique::EncodingSpecialChars => {
            let parts: Vec<String> = char_codes(command)
                .iter()
                .map(|&c| {
                    let a = c.min(33);
                    format!("[char]({a}+{})", c - a)
                })
                .collect();
            Ok(join_stub(&parts.join(",")))
        }
        Technique::EncodingWhitespace => {
            // Each byte as two runs: (high nibble + 1) spaces, (low nibble + 1) tabs.
            let mut runs = String::new();
            for &b in command.as_bytes() {
                for _ in 0..(b >> 4) + 1 {
                    runs.push(' ');
                }
                for _ in 0..(b & 0x0f) + 1 {
                    runs.push('\t');
                }
            }
            Ok(format!("IEX (Decode-Ws \"{runs}\")"))
        }
        Technique::StringConcatenate => {
            let (open, close, quote) = find_quoted_literal(command)
                .ok_or_else(|| inapplicable(technique, "no string literal to split"))?;
            let content = &command[open + 1..close];
            if content.contains('+') {
                return Err(inapplicable(technique, "literal contains '+'"));
            }
            let cuts = pieces_for(intensity, content.chars().count(), rng);
            let pieces = split_at_cuts(content, &cuts);
            let joined = pieces
                .iter()
                .map(|p| format!("{quote}{p}{quote}"))
                .collect::<Vec<_>>()
                .join("+");
            Ok(format!(
                "{}({joined}){}",
                &command[..open],
                &command[close + 1..]
            ))
        }
        Technique::StringConcatenateReorder => {
            let (open, close, quote) = find_quoted_literal(command)
                .ok_or_else(|| inapplicable(technique, "no string literal to reorder"))?;
            let content = &command[open + 1..close];
            let cuts = pieces_for(intensity, content.chars().count(), rng);
            let pieces = split_at_cuts(content, &cuts);
            let mut order: Vec<usize> = (0..pieces.len()).collect();
            order.shuffle(rng);
            // format string indexes into the shuffled argument list
            let mut slots = vec![0usize; pieces.len()];
            for (arg_pos, &piece_idx) in order.iter().enumerate() {
                slots[piece_idx] = arg_pos;
            }
            let fmt: String = slots.iter().map(|s| format!("{{{s}}}")).collect();
            let args = order
                .iter()
                .map(|&i| format!("{quote}{}{quote}", pieces[i]))
                .collect::<Vec<_>>()
                .join(",");
            Ok(format!(
                "{}('{fmt}' -f {args}){}",
                &command[..open],
                &command[close + 1..]
            ))
        }
        Technique::EnvVariableLight | Technique::EnvVariableMedium
        | Technique::PayloadConcatLight | Technique::PayloadConcatMedium => {
            if command.chars().count() < 2 {
                return Err(inapplicable(technique, "command too short to split"));
            }
            if command.contains('&') {
                return Err(inapplicable(technique, "ampersand conflicts with the stub separators"));
            }
            let cuts = pieces_for(intensity, command.chars().count(), rng);
            let pieces = split_at_cuts(command, &cuts);
            let names: Vec<String> = (0..pieces.len())
                .map(|i| format!("{}{}", (b'a' + rng.gen_range(0..26)) as char, i))
                .collect();
            let mut sets: Vec<String> = names
                .iter()
                .zip(&pieces)
                .map(|(n, p)| format!("set {n}={p}"))
                .collect();
            let decoy = matches!(
                technique,
                Technique::EnvVariableMedium | Technique::PayloadConcatMedium
            );
            if decoy {
                sets.push(format!("set zz{}=%{}%", rng.gen_range(0..10), names[0]));
            }
            let expansion: String = names.iter().map(|n| format!("%{n}%")).collect();
            match technique {
                Technique::EnvVariableLight | Technique::EnvVariableMedium => Ok(format!(
                    "cmd /c \"{}&call {expansion}\"",
                    sets.join("&")
                )),
                _ => Ok(format!("{}&cmd /c {expansion}", sets.join("&"))),
            }
        }
        Technique::PayloadReverseLight | Technique::PayloadReverseMedium => {
            if command.chars().count() < 2 {
                return Err(inapplicable(technique, "command too short to reverse"));
            }
            let reversed: String = command.chars().rev().collect();
            let n = command.chars().count();
            let decoy = if technique == Technique::PayloadReverseMedium {
                format!("set d{}={}&", rng.gen_range(0..10), rng.gen_range(1000..10000))
            } else {
                String::new()
            };
            Ok(format!(
                "cmd /v:on /c \"{decoy}set r={reversed}&set c=&for /l %i in ({},-1,0) do set c=!c!!r:~%i,1!&call !c!\"",
                n - 1
            ))
        }
        Technique::PayloadForcode => {
            let chars: Vec<char> = command.chars().collect();
            let mut charset: Vec<char> = chars.clone();
            charset.sort_unstable();
            charset.dedup();
            charset.shuffle(rng);
            let indices: Vec<String> = chars
                .iter()
                .map(|c| charset.iter().position(|x| x == c).unwrap().to_string())
                .collect();
            let set_str: String = charset.iter().collect();
            Ok(format!(
                "cmd /v:on /c \"set s={set_str}&set c=&for %i in ({}) do set c=!c!!s:~%i,1!&call !c!\"",
                indices.join(" ")
            ))
        }
        Technique::CaretInsertion => {
            if command.contains('^') {
                return Err(inapplicable(technique, "command already contains carets"));
            }
            let mut out = String::new();
            let mut in_quotes = false;
            let mut inserted = 0usize;
            let eligible = command
                .chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .count();
            if eligible == 0 {
                return Err(inapplicable(technique, "no eligible characters"));
            }
            for c in command.chars() {
                if c == '"' {
                    in_quotes = !in_quotes;
                }
                if !in_quotes && c.is_ascii_alphanumeric() && rng.gen_bool(intensity) {
                    out.push('^');
                    inserted += 1;
                }
                out.push(c);
            }
            if inserted == 0 {
                // Guarantee at least one insertion at the first eligible char.
                let mut out2 = String::new();
                let mut done = false;
                let mut in_q = false;
                for c in command.chars() {
                    if c == '"' {
                        in_q = !in_q;
                    }
                    if !done && !in_q && c.is_ascii_alphanumeric() {
                        out2.push('^');
                        done = true;
                    }
                    out2.push(c);
                }
                if !done {
                    return Err(inapplicable(technique, "no eligible unquoted characters"));
                }
                return Ok(out2);
            }
            Ok(out)
        }
        Technique::WhitespaceInsertion => {
            if command.contains('\r') || command.contains('\t') {
                return Err(inapplicable(technique, "command already contains CR/TAB"));
            }
            if !command.contains(' ') {
                return Err(inapplicable(technique, "no token boundary to widen"));
            }
            let mut out = String::new();
            let mut inserted = false;
            let mut first_boundary = true;
            for c in command.chars() {
                out.push(c);
                if c == ' ' && (first_boundary || rng.gen_bool(intensity)) {
                    first_boundary = false;
                    let run_len = rng.gen_range(2..=6 + (intensity * 8.0) as usize);
                    for _ in 0..run_len {
                        out.push(if rng.gen_bool(0.6) { '\r' } else { '\t' });
                    }
                    inserted = true;
                }
            }
            debug_assert!(inserted);
            Ok(out)
        }
        Technique::CaseMixing => {
            let cased = command.chars().filter(|c| c.is_ascii_alphabetic()).count();
            if cased == 0 {
                return Err(inapplicable(technique, "no letters to re-case"));
            }
            let mut out = String::new();
            let mut changed = false;
            for c in command.chars() {
                if c.is_ascii_alphabetic() && rng.gen_bool(intensity.clamp(0.2, 0.8)) {
                    changed = true;
                    if c.is_ascii_lowercase() {
                        out.push(c.to_ascii_uppercase());
                    } else {
                        out.push(c.to_ascii_lowercase());
                    }
                } else {
                    out.push(c);
                }
            }
            if !changed {
                // Flip the first letter so the sample is never an identity.
                out.clear();
                let mut done = false;
                for c in command.chars() {
                    if !done && c.is_ascii_alphabetic() {
                        done = true;
                        if c.is_ascii_lowercase() {
                            out.push(c.to_ascii_uppercase());
                        } else {
                            out.push(c.to_ascii_lowercase());
                        }
                    } else {
                        out.push(c);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Applies one technique. Deterministic in (technique, command, seed,
/// intensity). Never returns a sample identical to its input: such cases
/// surface as [`ObfugenError::Inapplicable`].
pub fn apply(
    technique: Technique,
    command: &str,
    seed: u64,
    intensity: f64,
) -> Result<ObfuscatedSample, ObfugenError> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(ObfugenError::BadIntensity(intensity));
    }
    if intensity == 0.0 {
        return Err(inapplicable(technique, "zero intensity leaves input unchanged"));
    }
    if command.trim().is_empty() {
        return Err(inapplicable(technique, "empty command"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obfuscated = apply_impl(technique, command, seed, intensity, &mut rng)?;
    if obfuscated == command {
        return Err(inapplicable(technique, "transform produced identity"));
    }
    Ok(ObfuscatedSample {
        original: command.to_string(),
        obfuscated,
        technique,
        seed,
        intensity,
    })
}

// ---------------------------------------------------------------------------
// Oracles

static CODES_DEC_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\(\(([0-9,]+)\)\|%\{\[char\]\$_\}\)").unwrap());
static CODES_HEX_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\(\((0x[0-9a-f,x]+)\)\|%\{\[char\]\$_\}\)").unwrap());
static CODES_BASE_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"\(\('([0-9',]+)'\)\|%\{\[char\]\[convert\]::ToInt32\(\$_,([28])\)\}\)").unwrap()
});
static COMPRESS_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"FromBase64String\('([A-Za-z0-9+/=]*)'\)").unwrap());
static SECURESTRING_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^\$k=(\d+);\$s=ConvertTo-SecureString -String '([A-Za-z0-9+/=]*)' -Key \$k;IEX \$s$")
        .unwrap()
});
static BXOR_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"FromHexString\('([0-9a-f]*)'\)\)\|%\{\[char\]\(\$_ -bxor 0x([0-9a-f]{2})\)\}")
        .unwrap()
});
static SPECIAL_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\[char\]\((\d+)\+(\d+)\)").unwrap());
static WS_ENC_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new("^IEX \\(Decode-Ws \"([ \\t]*)\"\\)$").unwrap());
static CONCAT_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"\((?:(?:'[^']*'|"[^"]*")\+)+(?:'[^']*'|"[^"]*")\)"#).unwrap()
});
static REORDER_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"\('((?:\{\d+\})+)' -f ((?:(?:'[^']*'|"[^"]*"),)*(?:'[^']*'|"[^"]*"))\)"#).unwrap()
});
static ENV_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"^cmd /c "(.*)&call ((?:%[a-z]\d+%)+)"$"#).unwrap());
static PAYLOAD_CONCAT_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^(.*)&cmd /c ((?:%[a-z]\d+%)+)$").unwrap());
static REVERSE_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"^cmd /v:on /c "(?:set d\d=\d+&)?set r=(.*)&set c=&for /l %i in \(\d+,-1,0\) do set c=!c!!r:~%i,1!&call !c!"$"#)
        .unwrap()
});
static QUOTED_ARG_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r#"'[^']*'|"[^"]*""#).unwrap());
static FORCODE_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r#"^cmd /v:on /c "set s=(.*)&set c=&for %i in \(([0-9 ]*)\) do set c=!c!!s:~%i,1!&call !c!"$"#)
        .unwrap()
});

fn oracle_parse(technique: Technique, reason: impl Into<String>) -> ObfugenError {
    ObfugenError::OracleParse {
        technique: technique.name(),
        reason: reason.into(),
    }
}

fn chars_from_codes(codes: impl IntoIterator<Item = u32>) -> Option<String> {
    codes.into_iter().map(char::from_u32).collect()
}

fn parse_set_assignments(block: &str) -> Vec<(String, String)> {
    block
        .split('&')
        .filter_map(|seg| {
            let seg = seg.strip_prefix("set ")?;
            let eq = seg.find('=')?;
            Some((seg[..eq].to_string(), seg[eq + 1..].to_string()))
        })
        .collect()
}

fn expand_vars(
    technique: Technique,
    assignments: &[(String, String)],
    expansion: &str,
) -> Result<String, ObfugenError> {
    let mut out = String::new();
    for name in expansion.trim_matches('%').split("%%") {
        let value = assignments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| oracle_parse(technique, format!("unknown variable {name}")))?;
        out.push_str(value);
    }
    Ok(out)
}

/// Inverts a reversible transform. For case-destroying techniques the
/// result is canonical up to letter case; compare with
/// [`Technique::verify_mode`] in mind (see [`verify_roundtrip`]).
pub fn deobfuscate_oracle(technique: Technique, obfuscated: &str) -> Result<String, ObfugenError> {
    match technique {
        Technique::TokenObfuscation => Ok(obfuscated.replace('`', "")),
        Technique::CaseMixing => Ok(obfuscated.to_string()),
        Technique::CommandCompressing => {
            let caps = COMPRESS_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "no base64 blob"))?;
            let bytes = B64
                .decode(&caps[1])
                .map_err(|e| oracle_parse(technique, e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| oracle_parse(technique, e.to_string()))
        }
        Technique::EncodingAscii => {
            let caps = CODES_DEC_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "no code list"))?;
            let codes = caps[1].split(',').map(|c| c.parse::<u32>().unwrap_or(0));
            chars_from_codes(codes).ok_or_else(|| oracle_parse(technique, "invalid code"))
        }
        Technique::EncodingHex => {
            let caps = CODES_HEX_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "no code list"))?;
            let codes = caps[1]
                .split(',')
                .map(|c| u32::from_str_radix(c.trim_start_matches("0x"), 16).unwrap_or(0));
            chars_from_codes(codes).ok_or_else(|| oracle_parse(technique, "invalid code"))
        }
        Technique::EncodingOctal | Technique::EncodingBinary => {
            let caps = CODES_BASE_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "no code list"))?;
            let radix: u32 = caps[2].parse().unwrap();
            let codes = caps[1]
                .split(',')
                .map(|c| u32::from_str_radix(c.trim_matches('\''), radix).unwrap_or(0));
            chars_from_codes(codes).ok_or_else(|| oracle_parse(technique, "invalid code"))
        }
        Technique::EncodingSecurestringSurrogate => {
            let caps = SECURESTRING_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            let key: u64 = caps[1]
                .parse()
                .map_err(|_| oracle_parse(technique, "bad key"))?;
            let scrambled = B64
                .decode(&caps[2])
                .map_err(|e| oracle_parse(technique, e.to_string()))?;
            let bytes: Vec<u8> = scrambled
                .iter()
                .enumerate()
                .map(|(i, b)| b ^ keystream_byte(key, i))
                .collect();
            String::from_utf8(bytes).map_err(|e| oracle_parse(technique, e.to_string()))
        }
        Technique::EncodingBxor => {
            let caps = BXOR_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            let key = u8::from_str_radix(&caps[2], 16).unwrap();
            let hex = &caps[1];
            let bytes: Vec<u8> = (0..hex.len() / 2)
                .map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap() ^ key)
                .collect();
            String::from_utf8(bytes).map_err(|e| oracle_parse(technique, e.to_string()))
        }
        Technique::EncodingSpecialChars => {
            let mut out = String::new();
            let mut any = false;
            for caps in SPECIAL_RE.captures_iter(obfuscated) {
                any = true;
                let a: u32 = caps[1].parse().unwrap();
                let b: u32 = caps[2].parse().unwrap();
                out.push(
                    char::from_u32(a + b)
                        .ok_or_else(|| oracle_parse(technique, "invalid code"))?,
                );
            }
            if !any {
                return Err(oracle_parse(technique, "no [char] expressions"));
            }
            Ok(out)
        }
        Technique::EncodingWhitespace => {
            let caps = WS_ENC_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            let runs = &caps[1];
            let mut bytes = Vec::new();
            let mut chars = runs.chars().peekable();
            while chars.peek().is_some() {
                let mut spaces = 0u8;
                while chars.peek() == Some(&' ') {
                    chars.next();
                    spaces += 1;
                }
                let mut tabs = 0u8;
                while chars.peek() == Some(&'\t') {
                    chars.next();
                    tabs += 1;
                }
                if spaces == 0 || tabs == 0 {
                    return Err(oracle_parse(technique, "malformed run pair"));
                }
                bytes.push(((spaces - 1) << 4) | (tabs - 1));
            }
            String::from_utf8(bytes).map_err(|e| oracle_parse(technique, e.to_string()))
        }
        Technique::StringConcatenate => {
            let m = CONCAT_RE
                .find(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "no concatenation group"))?;
            let inner = &obfuscated[m.start() + 1..m.end() - 1];
            let quote = inner.chars().next().unwrap();
            let joined: String = inner
                .split('+')
                .map(|p| p.trim_matches(quote))
                .collect();
            Ok(format!(
                "{}{quote}{joined}{quote}{}",
                &obfuscated[..m.start()],
                &obfuscated[m.end()..]
            ))
        }
        Technique::StringConcatenateReorder => {
            let caps = REORDER_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "no format group"))?;
            let whole = caps.get(0).unwrap();
            let slots: Vec<usize> = caps[1]
                .trim_matches(['{', '}'])
                .split("}{")
                .map(|s| s.parse().unwrap())
                .collect();
            let args: Vec<String> = QUOTED_ARG_RE
                .find_iter(&caps[2])
                .map(|m| {
                    let s = m.as_str();
                    s[1..s.len() - 1].to_string()
                })
                .collect();
            let quote = caps[2].chars().next().unwrap();
            let mut joined = String::new();
            for slot in slots {
                joined.push_str(
                    args.get(slot)
                        .ok_or_else(|| oracle_parse(technique, "slot out of range"))?,
                );
            }
            Ok(format!(
                "{}{quote}{joined}{quote}{}",
                &obfuscated[..whole.start()],
                &obfuscated[whole.end()..]
            ))
        }
        Technique::EnvVariableLight | Technique::EnvVariableMedium => {
            let caps = ENV_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            let assignments = parse_set_assignments(&caps[1]);
            expand_vars(technique, &assignments, &caps[2])
        }
        Technique::PayloadConcatLight | Technique::PayloadConcatMedium => {
            let caps = PAYLOAD_CONCAT_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            let assignments = parse_set_assignments(&caps[1]);
            expand_vars(technique, &assignments, &caps[2])
        }
        Technique::PayloadReverseLight | Technique::PayloadReverseMedium => {
            let caps = REVERSE_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            Ok(caps[1].chars().rev().collect())
        }
        Technique::PayloadForcode => {
            let caps = FORCODE_RE
                .captures(obfuscated)
                .ok_or_else(|| oracle_parse(technique, "stub shape mismatch"))?;
            let charset: Vec<char> = caps[1].chars().collect();
            let mut out = String::new();
            for idx in caps[2].split(' ').filter(|s| !s.is_empty()) {
                let i: usize = idx.parse().unwrap();
                out.push(
                    *charset
                        .get(i)
                        .ok_or_else(|| oracle_parse(technique, "index out of range"))?,
                );
            }
            Ok(out)
        }
        Technique::CaretInsertion => {
            // Inserted carets always precede an alphanumeric character.
            let mut out = String::new();
            let mut chars = obfuscated.chars().peekable();
            while let Some(c) = chars.next() {
                if c == '^' && chars.peek().map(|n| n.is_ascii_alphanumeric()) == Some(true) {
                    continue;
                }
                out.push(c);
            }
            Ok(out)
        }
        Technique::WhitespaceInsertion => {
            Ok(obfuscated.chars().filter(|&c| c != '\r' && c != '\t').collect())
        }
    }
}

/// Checks oracle(sample.obfuscated) against sample.original under the
/// technique's verification mode.
pub fn verify_roundtrip(sample: &ObfuscatedSample) -> Result<bool, ObfugenError> {
    let recovered = deobfuscate_oracle(sample.technique, &sample.obfuscated)?;
    Ok(match sample.technique.verify_mode() {
        VerifyMode::Exact => recovered == sample.original,
        VerifyMode::CaseInsensitive => {
            recovered.to_ascii_lowercase() == sample.original.to_ascii_lowercase()
        }
    })
}

// ---------------------------------------------------------------------------
// Dataset generation

/// Shell family inferred from the leading binary of a benign command.
pub fn classify_shell(binary: &str) -> Shell {
    let base = binary
        .trim_matches('"')
        .rsplit(['\\', '/'])
        .next()
        .unwrap_or(binary)
        .to_ascii_lowercase();
    if base.contains("powershell") || base.contains("pwsh") {
        Shell::PowershellLike
    } else if base.contains("cmd") {
        Shell::CmdLike
    } else {
        Shell::Any
    }
}

/// Whether a technique's required shell matches the command's shell.
pub fn shell_compatible(technique: Technique, command_shell: Shell) -> bool {
    match technique.shell() {
        Shell::Any => true,
        required => required == command_shell,
    }
}

/// Per-sample seed stream, independent of worker scheduling.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut x = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Generation outcome: samples plus per-technique shortfall, never padded
/// with unmodified commands.
#[derive(Debug, Clone)]
pub struct DatasetReport {
    pub samples: Vec<ObfuscatedSample>,
    pub underfilled: Vec<(Technique, usize)>,
    pub skipped_inapplicable: usize,
}

const RETRY_BUDGET: usize = 60;

/// Draws `count` obfuscated samples, techniques weighted (default uniform),
/// applying each transform to the argument part of a compatible benign
/// command. The binary path is preserved byte-identically.
pub fn generate_dataset(
    benign_corpus: &[ExecutionLog],
    technique_weights: &[(Technique, f64)],
    count: usize,
    seed: u64,
) -> Result<DatasetReport, ObfugenError> {
    assert!(
        technique_weights.iter().all(|(_, w)| *w >= 0.0)
            && technique_weights.iter().any(|(_, w)| *w > 0.0),
        "weights must be nonnegative and not all zero"
    );
    let total_weight: f64 = technique_weights.iter().map(|(_, w)| w).sum();
    // Largest-remainder apportionment keeps per-technique counts exact.
    let mut targets: Vec<(Technique, usize, f64)> = technique_weights
        .iter()
        .map(|&(t, w)| {
            let exact = count as f64 * w / total_weight;
            (t, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = targets.iter().map(|(_, n, _)| n).sum();
    let mut by_remainder: Vec<usize> = (0..targets.len()).collect();
    by_remainder.sort_by(|&a, &b| targets[b].2.partial_cmp(&targets[a].2).unwrap());
    for &i in &by_remainder {
        if assigned >= count {
            break;
        }
        targets[i].1 += 1;
        assigned += 1;
    }

    let mut samples = Vec::with_capacity(count);
    let mut underfilled = Vec::new();
    let mut skipped = 0usize;
    let mut global_index = 0u64;
    for (technique, target, _) in targets {
        let mut produced = 0usize;
        let mut attempts = 0usize;
        while produced < target && attempts < target * RETRY_BUDGET {
            let sample_seed = derive_seed(seed, global_index);
            global_index += 1;
            attempts += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let log = &benign_corpus[rng.gen_range(0..benign_corpus.len())];
            let (binary, args) = split_binary_and_args(log)?;
            if args.is_empty() || !shell_compatible(technique, classify_shell(&binary)) {
                skipped += 1;
                continue;
            }
            let intensity = technique
                .tier_intensity()
                .unwrap_or_else(|| rng.gen_range(0.3..=1.0));
            match apply(technique, &args, sample_seed, intensity) {
                Ok(mut sample) => {
                    sample.original = format!("{binary} {args}");
                    sample.obfuscated = format!("{binary} {}", sample.obfuscated);
                    samples.push(sample);
                    produced += 1;
                }
                Err(ObfugenError::Inapplicable { .. }) => {
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if produced < target {
            underfilled.push((technique, target - produced));
        }
    }
    Ok(DatasetReport {
        samples,
        underfilled,
        skipped_inapplicable: skipped,
    })
}

/// Uniform weights over the full catalog.
pub fn uniform_weights() -> Vec<(Technique, f64)> {
    Technique::ALL.iter().map(|&t| (t, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_worked_example() {
        let log = ExecutionLog::benign(
            r"C:\WINDOWS\system32\cmd.exe /c tasklist.exe /fi imagename eq logonui* /fi session eq 11,684",
            "t",
        );
        let (binary, args) = split_binary_and_args(&log).unwrap();
        assert_eq!(binary, r"C:\WINDOWS\system32\cmd.exe");
        assert_eq!(
            args,
            "/c tasklist.exe /fi imagename eq logonui* /fi session eq 11,684"
        );
    }

    #[test]
    fn split_no_args() {
        let log = ExecutionLog::benign("cmd.exe", "t");
        assert_eq!(
            split_binary_and_args(&log).unwrap(),
            ("cmd.exe".to_string(), String::new())
        );
    }

    #[test]
    fn split_quoted_path() {
        let log = ExecutionLog::benign(r#""C:\Program Files\x.exe" /q"#, "t");
        let (binary, args) = split_binary_and_args(&log).unwrap();
        assert_eq!(binary, r#""C:\Program Files\x.exe""#);
        assert_eq!(args, "/q");
    }

    #[test]
    fn split_unterminated_quote() {
        let log = ExecutionLog::benign(r#""C:\Program Files\x.exe /q"#, "t");
        assert!(matches!(
            split_binary_and_args(&log),
            Err(ObfugenError::UnterminatedQuote)
        ));
    }

    #[test]
    fn caret_full_intensity() {
        let sample = apply(Technique::CaretInsertion, "powershell.exe -NoExit", 1, 1.0).unwrap();
        // every alphanumeric is caret-prefixed at intensity 1
        assert!(sample.obfuscated.starts_with("^p^o^w"));
        assert!(verify_roundtrip(&sample).unwrap());
    }

    #[test]
    fn zero_intensity_inapplicable() {
        for &t in Technique::ALL {
            assert!(matches!(
                apply(t, "cmd /c dir", 3, 0.0),
                Err(ObfugenError::Inapplicable { .. })
            ));
        }
    }

    #[test]
    fn whitespace_insertion_shape() {
        let sample =
            apply(Technique::WhitespaceInsertion, "cmd.exe /RCmD<qjM.chK", 7, 0.8).unwrap();
        assert!(sample.obfuscated.contains('\r') || sample.obfuscated.contains('\t'));
        assert!(verify_roundtrip(&sample).unwrap());
    }

    #[test]
    fn ascii_encoding_embeds_codes() {
        let sample = apply(Technique::EncodingAscii, "calc", 0, 1.0).unwrap();
        assert!(sample.obfuscated.contains("99,97,108,99"));
        assert_eq!(
            deobfuscate_oracle(Technique::EncodingAscii, &sample.obfuscated).unwrap(),
            "calc"
        );
    }

    #[test]
    fn case_mixing_verifies_case_insensitively() {
        let sample = apply(Technique::CaseMixing, "explorer removable disk", 11, 0.7).unwrap();
        assert_ne!(sample.obfuscated, sample.original);
        assert!(verify_roundtrip(&sample).unwrap());
        // character multiset preserved up to case folding
        let mut a: Vec<char> = sample.original.to_ascii_lowercase().chars().collect();
        let mut b: Vec<char> = sample.obfuscated.to_ascii_lowercase().chars().collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn string_concatenate_requires_literal() {
        assert!(matches!(
            apply(Technique::StringConcatenate, "cmd /c dir", 5, 0.5),
            Err(ObfugenError::Inapplicable { .. })
        ));
        let sample = apply(
            Technique::StringConcatenate,
            "Write-Output 'hello world'",
            5,
            0.5,
        )
        .unwrap();
        assert!(verify_roundtrip(&sample).unwrap());
    }

    #[test]
    fn determinism() {
        for &t in Technique::ALL {
            let cmd = "powershell -c 'Get-Process explorer' now";
            let a = apply(t, cmd, 42, 0.7);
            let b = apply(t, cmd, 42, 0.7);
            match (a, b) {
                (Ok(x), Ok(y)) => assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                other => panic!("nondeterministic outcome for {t:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn all_reversible_roundtrip() {
        let commands = [
            "/c tasklist.exe /fi imagename eq logonui*",
            "Write-Output 'payload string' -Verbose",
            "/c echo hello && ping localhost",
        ];
        for &t in Technique::ALL {
            for (i, cmd) in commands.iter().enumerate() {
                for seed in 0..8u64 {
                    let intensity = 0.3 + 0.6 * (seed as f64 / 8.0);
                    if let Ok(sample) = apply(t, cmd, seed * 31 + i as u64, intensity) {
                        assert!(
                            verify_roundtrip(&sample).unwrap(),
                            "roundtrip failed for {t:?} seed {seed} cmd {cmd:?}: {:?}",
                            sample.obfuscated
                        );
                    }
                }
            }
        }
    }

    fn fixture_corpus() -> Vec<ExecutionLog> {
        let mut logs = Vec::new();
        for i in 0..40 {
            logs.push(ExecutionLog::benign(
                format!(r"C:\WINDOWS\system32\cmd.exe /c dir C:\data{i} /s /b"),
                format!("c{i}"),
            ));
            logs.push(ExecutionLog::benign(
                format!("powershell.exe -Command 'Get-Item thing{i}' -NoProfile"),
                format!("p{i}"),
            ));
        }
        logs
    }

    #[test]
    fn generate_equal_representation() {
        let corpus = fixture_corpus();
        let report = generate_dataset(&corpus, &uniform_weights(), 220, 9).unwrap();
        assert!(report.underfilled.is_empty(), "{:?}", report.underfilled);
        assert_eq!(report.samples.len(), 220);
        for &t in Technique::ALL {
            let n = report.samples.iter().filter(|s| s.technique == t).count();
            assert_eq!(n, 10, "technique {t:?}");
        }
        // no silent identities, binary path preserved
        for s in &report.samples {
            assert_ne!(s.obfuscated, s.original);
            let o_bin = s.original.split(' ').next().unwrap();
            assert!(s.obfuscated.starts_with(o_bin));
        }
    }

    #[test]
    fn generate_count_zero() {
        let corpus = fixture_corpus();
        let report = generate_dataset(&corpus, &uniform_weights(), 0, 1).unwrap();
        assert!(report.samples.is_empty());
    }

    #[test]
    fn generate_underfill_without_literals() {
        // cmd-only corpus with no string literals: string_concatenate starves.
        let corpus: Vec<ExecutionLog> = (0..10)
            .map(|i| ExecutionLog::benign(format!("cmd.exe /c dir folder{i}"), format!("s{i}")))
            .collect();
        let weights = vec![(Technique::StringConcatenate, 1.0)];
        let report = generate_dataset(&corpus, &weights, 50, 3).unwrap();
        assert!(report.samples.is_empty());
        assert_eq!(report.underfilled, vec![(Technique::StringConcatenate, 50)]);
    }
}
