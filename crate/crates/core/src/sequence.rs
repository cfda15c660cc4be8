//! Coin-flip sequences, free-text response parsing and overlapping windows.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SequenceError {
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("invalid binary digit {0} at index {1}")]
    InvalidDigit(u8, usize),
    #[error("invalid flip character {0:?} at index {1}")]
    InvalidLetter(char, usize),
}

/// One coin flip. Heads encodes as 1, tails as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flip {
    Tails = 0,
    Heads = 1,
}

impl Flip {
    #[inline]
    pub fn bit(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn is_heads(self) -> bool {
        self == Flip::Heads
    }

    pub fn letter(self) -> char {
        match self {
            Flip::Heads => 'H',
            Flip::Tails => 'T',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'H' => Some(Flip::Heads),
            'T' => Some(Flip::Tails),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Flip::Heads => Flip::Tails,
            Flip::Tails => Flip::Heads,
        }
    }
}

impl Serialize for Flip {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        s.serialize_str(self.letter().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for Flip {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next().and_then(Flip::from_letter), chars.next()) {
            (Some(f), None) => Ok(f),
            _ => Err(serde::de::Error::custom(format!("expected \"H\" or \"T\", got {s:?}"))),
        }
    }
}

impl fmt::Display for Flip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Heads to 1, tails to 0.
pub fn encode(flips: &[Flip]) -> Vec<u8> {
    flips.iter().map(|f| f.bit()).collect()
}

pub fn decode(bits: &[u8]) -> Result<Vec<Flip>, SequenceError> {
    bits.iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(Flip::Tails),
            1 => Ok(Flip::Heads),
            other => Err(SequenceError::InvalidDigit(other, i)),
        })
        .collect()
}

/// Canonical serialization: `H, T, T, H`.
pub fn format_flips(flips: &[Flip]) -> String {
    let mut out = String::with_capacity(flips.len() * 3);
    for (i, f) in flips.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push(f.letter());
    }
    out
}

/// Compact form used in JSONL records: `HTTH`.
pub fn format_compact(flips: &[Flip]) -> String {
    flips.iter().map(|f| f.letter()).collect()
}

/// Reads either the compact or the canonical form. Commas and whitespace are
/// ignored; anything else is an error.
pub fn parse_letters(s: &str) -> Result<Vec<Flip>, SequenceError> {
    s.chars()
        .enumerate()
        .filter(|(_, c)| !(c.is_whitespace() || *c == ','))
        .map(|(i, c)| Flip::from_letter(c).ok_or(SequenceError::InvalidLetter(c, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub model: String,
    pub prompt_id: String,
    pub temperature: f64,
    pub replicate: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlipSequence {
    pub flips: Vec<Flip>,
    pub meta: SequenceMeta,
}

impl FlipSequence {
    pub fn new(flips: Vec<Flip>, meta: SequenceMeta) -> Self {
        Self { flips, meta }
    }

    pub fn unlabeled(flips: Vec<Flip>) -> Self {
        Self { flips, meta: SequenceMeta::default() }
    }

    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }
}

/// A length-k slice of a parent sequence. `parent` identifies the source
/// sequence within a pool so that overlapping windows can be kept together.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Window {
    pub flips: Vec<Flip>,
    pub offset: usize,
    pub parent: usize,
}

impl Window {
    pub fn new(flips: Vec<Flip>) -> Self {
        Self { flips, offset: 0, parent: 0 }
    }

    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    /// The first `len` flips, keeping provenance.
    pub fn prefix(&self, len: usize) -> Window {
        Window { flips: self.flips[..len].to_vec(), offset: self.offset, parent: self.parent }
    }

    /// Every flip swapped H <-> T.
    pub fn complement(&self) -> Window {
        Window {
            flips: self.flips.iter().map(|f| f.opposite()).collect(),
            offset: self.offset,
            parent: self.parent,
        }
    }
}

impl From<&[Flip]> for Window {
    fn from(flips: &[Flip]) -> Self {
        Window::new(flips.to_vec())
    }
}

/// All `len - k + 1` overlapping windows of `seq`, or none when it is shorter
/// than `k`.
pub fn windows(seq: &FlipSequence, k: usize) -> Result<Vec<Window>, SequenceError> {
    windows_of(&seq.flips, k, 0)
}

pub fn windows_of(flips: &[Flip], k: usize, parent: usize) -> Result<Vec<Window>, SequenceError> {
    if k == 0 {
        return Err(SequenceError::ZeroWindow);
    }
    Ok(flips
        .windows(k)
        .enumerate()
        .map(|(offset, w)| Window { flips: w.to_vec(), offset, parent })
        .collect())
}

/// Pools the windows of many sequences; `parent` is the sequence's index.
pub fn pool_windows(seqs: &[FlipSequence], k: usize) -> Result<Vec<Window>, SequenceError> {
    let mut out = Vec::new();
    for (parent, s) in seqs.iter().enumerate() {
        out.extend(windows_of(&s.flips, k, parent)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseKind {
    Parsed,
    Partial,
    Refusal,
    Unparseable,
}

impl ParseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseKind::Parsed => "parsed",
            ParseKind::Partial => "partial",
            ParseKind::Refusal => "refusal",
            ParseKind::Unparseable => "unparseable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub kind: ParseKind,
    /// Present for `Parsed` and `Partial`, never empty when present.
    pub flips: Option<Vec<Flip>>,
    pub note: String,
}

impl ParseOutcome {
    fn without_flips(kind: ParseKind, note: impl Into<String>) -> Self {
        Self { kind, flips: None, note: note.into() }
    }
}

pub const DEFAULT_REFUSAL_LEXICON: &[&str] =
    &["cannot", "unable", "random number generator", "language model"];

/// Turns free-text completions into flips.
///
/// A line contributes flips when every word on it is a flip token
/// (`H`, `T`, `Heads`, `Tails`, any case) or a bare number, which covers
/// comma lists, one-per-line output and numbered lists. A line with prose
/// before its last colon is read from the text after the colon. Lines that
/// mention a retry are dropped. For single-flip prompts, prose naming exactly
/// one of heads/tails counts as that flip.
#[derive(Debug, Clone)]
pub struct ResponseParser {
    refusal_lexicon: Vec<String>,
}

impl Default for ResponseParser {
    fn default() -> Self {
        Self::new(DEFAULT_REFUSAL_LEXICON.iter().copied())
    }
}

impl ResponseParser {
    pub fn new<I, S>(lexicon: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            refusal_lexicon: lexicon
                .into_iter()
                .map(|s| s.as_ref().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    pub fn refusal_lexicon(&self) -> &[String] {
        &self.refusal_lexicon
    }

    pub fn parse(&self, text: &str, expected_count: Option<usize>) -> ParseOutcome {
        let mut flips = Vec::new();
        let mut skipped_retries = 0usize;
        for line in text.lines() {
            if line.to_lowercase().contains("retry") {
                skipped_retries += 1;
                continue;
            }
            if let Some(found) = line_flips(line) {
                flips.extend(found);
            }
        }

        let mut notes = Vec::new();
        if skipped_retries > 0 {
            notes.push(format!("skipped {skipped_retries} retry line(s)"));
        }

        if flips.is_empty() && expected_count.is_none_or(|n| n <= 1) {
            if let Some(f) = single_flip_from_prose(text) {
                flips.push(f);
                notes.push("single flip read from prose".to_string());
            }
        }

        if flips.is_empty() {
            let lower = text.to_lowercase();
            return match self.refusal_lexicon.iter().find(|p| lower.contains(p.as_str())) {
                Some(p) => ParseOutcome::without_flips(ParseKind::Refusal, format!("refusal: matched {p:?}")),
                None => ParseOutcome::without_flips(ParseKind::Unparseable, join_notes(notes, "no flip tokens")),
            };
        }

        let kind = match expected_count {
            Some(n) if flips.len() > n => {
                notes.push(format!("received {} flips, truncated to {n}", flips.len()));
                flips.truncate(n);
                ParseKind::Parsed
            }
            Some(n) if flips.len() < n => {
                notes.push(format!("received {} of {n} flips", flips.len()));
                ParseKind::Partial
            }
            _ => ParseKind::Parsed,
        };
        ParseOutcome { kind, flips: Some(flips), note: notes.join("; ") }
    }
}

fn join_notes(mut notes: Vec<String>, last: &str) -> String {
    notes.push(last.to_string());
    notes.join("; ")
}

/// Parses with the default refusal lexicon.
pub fn parse_response(text: &str, expected_count: Option<usize>) -> ParseOutcome {
    ResponseParser::default().parse(text, expected_count)
}

fn line_flips(line: &str) -> Option<Vec<Flip>> {
    all_flip_tokens(line).or_else(|| line.rfind(':').and_then(|i| all_flip_tokens(&line[i + 1..])))
}

fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// `Some` when the segment holds at least one flip token and nothing but flip
/// tokens and bare numbers.
fn all_flip_tokens(segment: &str) -> Option<Vec<Flip>> {
    let mut out = Vec::new();
    for w in words(segment) {
        if w.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        match flip_word(w) {
            Some(Token::One(f)) => out.push(f),
            Some(Token::Run(run)) => out.extend(run),
            None => return None,
        }
    }
    (!out.is_empty()).then_some(out)
}

enum Token {
    One(Flip),
    Run(Vec<Flip>),
}

fn flip_word(w: &str) -> Option<Token> {
    match w.to_lowercase().as_str() {
        "h" | "head" | "heads" => return Some(Token::One(Flip::Heads)),
        "t" | "tail" | "tails" => return Some(Token::One(Flip::Tails)),
        _ => {}
    }
    // Unseparated runs such as "HTTH"; upper case only so ordinary words never match.
    if w.len() >= 2 && w.bytes().all(|b| b == b'H' || b == b'T') {
        return Some(Token::Run(w.chars().filter_map(Flip::from_letter).collect()));
    }
    None
}

fn single_flip_from_prose(text: &str) -> Option<Flip> {
    let mut heads = false;
    let mut tails = false;
    for w in words(text) {
        match w.to_lowercase().as_str() {
            "head" | "heads" => heads = true,
            "tail" | "tails" => tails = true,
            _ => {}
        }
    }
    match (heads, tails) {
        (true, false) => Some(Flip::Heads),
        (false, true) => Some(Flip::Tails),
        _ => None,
    }
}
