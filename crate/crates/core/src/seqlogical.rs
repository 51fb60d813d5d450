//! Semantic parse data model and the bracketed seqlogical text format.
//!
//! A seqlogical string looks like
//! `[IN:GET_WEATHER Dime el clima [SL:DATE_TIME para next Friday ] ]`:
//! the root bracket carries the intent, each slot is a labeled bracket around
//! a contiguous run of tokens, and every bracket is its own whitespace
//! separated token. Labels are stored without their `IN:` / `SL:` prefixes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INTENT_PREFIX: &str = "[IN:";
pub const SLOT_PREFIX: &str = "[SL:";
pub const CLOSE: &str = "]";

/// Depth bound used throughout the toolkit: root plus one level of slots.
pub const DEFAULT_MAX_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeqlogicalError {
    #[error("unbalanced brackets at token {position}")]
    UnbalancedBrackets { position: usize },
    #[error("second root bracket at token {position}")]
    MultipleRoots { position: usize },
    #[error("slot opened inside another slot at token {position}")]
    NestedSlot { position: usize },
    #[error("slot closed at token {position} encloses no tokens")]
    EmptySlot { position: usize },
    #[error("no [IN:...] root bracket")]
    MissingRoot,
    #[error("token {position} lies outside the root bracket")]
    TokenOutsideRoot { position: usize },
    #[error("root bracket encloses no tokens")]
    EmptyUtterance,
    #[error("malformed token {token:?} at position {position}")]
    InvalidToken { position: usize, token: String },
    #[error("invalid label {label:?}")]
    InvalidLabel { label: String },
    #[error("slot span {start}..{end} is invalid for {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("slot spans overlap or are unsorted at slot {index}")]
    OverlappingSlots { index: usize },
    #[error("tree depth {depth} exceeds the bound {max_depth}")]
    DepthExceeded { depth: usize, max_depth: usize },
    #[error("expected {expected} tags, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("malformed BIO tag {0:?}")]
    InvalidTag(String),
}

/// Tokenized utterance text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub raw_text: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>) -> Self {
        let raw_text = tokens.join(" ");
        Utterance { tokens, raw_text }
    }

    pub fn from_text(text: &str) -> Self {
        Utterance::new(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-joined token text.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A labeled half-open token span `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotAnnotation {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl SlotAnnotation {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        SlotAnnotation { label: label.into(), start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticParse {
    pub intent: String,
    pub slots: Vec<SlotAnnotation>,
}

impl SemanticParse {
    pub fn new(intent: impl Into<String>, mut slots: Vec<SlotAnnotation>) -> Self {
        slots.sort_by_key(|s| (s.start, s.end));
        SemanticParse { intent: intent.into(), slots }
    }

    pub fn slotless(intent: impl Into<String>) -> Self {
        SemanticParse { intent: intent.into(), slots: Vec::new() }
    }

    /// Checks the span invariants against an utterance of `n_tokens` tokens.
    pub fn check(&self, n_tokens: usize) -> Result<(), SeqlogicalError> {
        check_label(&self.intent)?;
        let mut prev_end = 0;
        for (index, slot) in self.slots.iter().enumerate() {
            check_label(&slot.label)?;
            if slot.start >= slot.end || slot.end > n_tokens {
                return Err(SeqlogicalError::InvalidSpan { start: slot.start, end: slot.end, len: n_tokens });
            }
            if index > 0 && slot.start < prev_end {
                return Err(SeqlogicalError::OverlappingSlots { index });
            }
            prev_end = slot.end;
        }
        Ok(())
    }

    /// Tree depth: 1 for a slotless parse, 2 otherwise.
    pub fn depth(&self) -> usize {
        if self.slots.is_empty() {
            1
        } else {
            2
        }
    }

    pub fn skeleton(&self) -> ParseSkeleton {
        compute_skeleton(self)
    }

    pub fn to_bio(&self, n_tokens: usize) -> Result<Vec<BioTag>, SeqlogicalError> {
        to_bio(self, n_tokens)
    }

    pub fn from_bio(intent: impl Into<String>, tags: &[BioTag]) -> Self {
        SemanticParse { intent: intent.into(), slots: slots_from_bio(tags) }
    }
}

/// Intent plus the multiset of slot labels, kept as a sorted list so that
/// equality is multiset equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParseSkeleton {
    pub intent: String,
    pub slot_labels: Vec<String>,
}

impl ParseSkeleton {
    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for label in &self.slot_labels {
            *counts.entry(label.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

impl fmt::Display for ParseSkeleton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{{}}}", self.intent, self.slot_labels.join(","))
    }
}

pub fn compute_skeleton(parse: &SemanticParse) -> ParseSkeleton {
    let mut slot_labels: Vec<String> = parse.slots.iter().map(|s| s.label.clone()).collect();
    slot_labels.sort();
    ParseSkeleton { intent: parse.intent.clone(), slot_labels }
}

fn is_valid_token(token: &str) -> bool {
    !token.is_empty() && !token.contains(['[', ']']) && !token.contains(char::is_whitespace)
}

fn check_label(label: &str) -> Result<(), SeqlogicalError> {
    if is_valid_token(label) {
        Ok(())
    } else {
        Err(SeqlogicalError::InvalidLabel { label: label.to_owned() })
    }
}

enum Frame {
    Root,
    Slot { label: String, start: usize, nested: bool },
}

/// Result of a recovering scan: everything recoverable plus every violation.
struct Scan {
    intent: Option<String>,
    tokens: Vec<String>,
    slots: Vec<SlotAnnotation>,
    max_depth: usize,
    violations: Vec<SeqlogicalError>,
}

/// Whitespace tokens, with trailing runs of `]` split off as closers so that
/// `Friday]]` reads as `Friday ] ]`.
fn bracket_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        let word = token.trim_end_matches(']');
        if !word.is_empty() {
            out.push(word);
        }
        out.extend(std::iter::repeat_n(CLOSE, token.len() - word.len()));
    }
    out
}

fn scan(text: &str) -> Scan {
    let mut out = Scan { intent: None, tokens: Vec::new(), slots: Vec::new(), max_depth: 0, violations: Vec::new() };
    let mut stack: Vec<Frame> = Vec::new();

    let tokens = bracket_tokens(text);
    for (position, &token) in tokens.iter().enumerate() {
        if let Some(label) = token.strip_prefix(INTENT_PREFIX) {
            if out.intent.is_some() {
                out.violations.push(SeqlogicalError::MultipleRoots { position });
                // keep the bracket balanced for recovery
                stack.push(Frame::Slot { label: label.to_owned(), start: out.tokens.len(), nested: true });
            } else {
                if check_label(label).is_err() {
                    out.violations.push(SeqlogicalError::InvalidLabel { label: label.to_owned() });
                }
                out.intent = Some(label.to_owned());
                stack.push(Frame::Root);
            }
        } else if let Some(label) = token.strip_prefix(SLOT_PREFIX) {
            if check_label(label).is_err() {
                out.violations.push(SeqlogicalError::InvalidLabel { label: label.to_owned() });
            }
            let nested = match stack.last() {
                None => {
                    out.violations.push(SeqlogicalError::TokenOutsideRoot { position });
                    true
                }
                Some(Frame::Slot { .. }) => {
                    out.violations.push(SeqlogicalError::NestedSlot { position });
                    true
                }
                Some(Frame::Root) => false,
            };
            stack.push(Frame::Slot { label: label.to_owned(), start: out.tokens.len(), nested });
        } else if token == CLOSE {
            match stack.pop() {
                None => out.violations.push(SeqlogicalError::UnbalancedBrackets { position }),
                Some(Frame::Root) => {
                    if out.tokens.is_empty() {
                        out.violations.push(SeqlogicalError::EmptyUtterance);
                    }
                }
                Some(Frame::Slot { label, start, nested }) => {
                    let end = out.tokens.len();
                    if start == end {
                        out.violations.push(SeqlogicalError::EmptySlot { position });
                    } else if !nested {
                        out.slots.push(SlotAnnotation { label, start, end });
                    }
                }
            }
        } else if !is_valid_token(token) {
            out.violations.push(SeqlogicalError::InvalidToken { position, token: token.to_owned() });
        } else {
            if stack.is_empty() {
                out.violations.push(SeqlogicalError::TokenOutsideRoot { position });
            }
            out.tokens.push(token.to_owned());
        }
        out.max_depth = out.max_depth.max(stack.len());
    }

    if !stack.is_empty() {
        out.violations.push(SeqlogicalError::UnbalancedBrackets { position: tokens.len() });
    }
    if out.intent.is_none() {
        out.violations.push(SeqlogicalError::MissingRoot);
    }
    out
}

/// Parses a seqlogical string into its utterance and parse.
pub fn parse_seqlogical(text: &str) -> Result<(Utterance, SemanticParse), SeqlogicalError> {
    let mut scan = scan(text);
    if !scan.violations.is_empty() {
        return Err(scan.violations.swap_remove(0));
    }
    let intent = scan.intent.expect("scan without violations has a root");
    Ok((Utterance::new(scan.tokens), SemanticParse { intent, slots: scan.slots }))
}

/// Emits the canonical single-space form.
pub fn serialize_seqlogical(utterance: &Utterance, parse: &SemanticParse) -> Result<String, SeqlogicalError> {
    parse.check(utterance.len())?;
    if utterance.is_empty() {
        return Err(SeqlogicalError::EmptyUtterance);
    }
    for (position, token) in utterance.tokens.iter().enumerate() {
        if !is_valid_token(token) {
            return Err(SeqlogicalError::InvalidToken { position, token: token.clone() });
        }
    }

    let mut out = String::with_capacity(utterance.raw_text.len() + 32);
    out.push_str(INTENT_PREFIX);
    out.push_str(&parse.intent);
    let mut slots = parse.slots.iter().peekable();
    let mut open_until: Option<usize> = None;
    for (i, token) in utterance.tokens.iter().enumerate() {
        if open_until == Some(i) {
            out.push_str(" ]");
            open_until = None;
        }
        if let Some(slot) = slots.next_if(|s| s.start == i) {
            out.push(' ');
            out.push_str(SLOT_PREFIX);
            out.push_str(&slot.label);
            open_until = Some(slot.end);
        }
        out.push(' ');
        out.push_str(token);
    }
    if open_until.is_some() {
        out.push_str(" ]");
    }
    out.push_str(" ]");
    Ok(out)
}

/// Re-serializes a seqlogical string in canonical form.
pub fn canonicalize(text: &str) -> Result<String, SeqlogicalError> {
    let (utterance, parse) = parse_seqlogical(text)?;
    serialize_seqlogical(&utterance, &parse)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeVerdict {
    Ok,
    Violations(Vec<SeqlogicalError>),
}

impl TreeVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, TreeVerdict::Ok)
    }

    pub fn violations(&self) -> &[SeqlogicalError] {
        match self {
            TreeVerdict::Ok => &[],
            TreeVerdict::Violations(v) => v,
        }
    }
}

/// Lists every violation found in `text`; violations are data, not failures.
pub fn validate_tree(text: &str, max_depth: usize) -> TreeVerdict {
    let scan = scan(text);
    let mut violations = scan.violations;
    if scan.max_depth > max_depth {
        violations.push(SeqlogicalError::DepthExceeded { depth: scan.max_depth, max_depth });
    }
    if violations.is_empty() {
        TreeVerdict::Ok
    } else {
        TreeVerdict::Violations(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioTag {
    Outside,
    Begin(String),
    Inside(String),
}

impl BioTag {
    pub fn label(&self) -> Option<&str> {
        match self {
            BioTag::Outside => None,
            BioTag::Begin(l) | BioTag::Inside(l) => Some(l),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::Outside => f.write_str("O"),
            BioTag::Begin(l) => write!(f, "B-{l}"),
            BioTag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = SeqlogicalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(BioTag::Outside);
        }
        let tag = match s.split_at_checked(2) {
            Some(("B-", l)) if !l.is_empty() => BioTag::Begin(l.to_owned()),
            Some(("I-", l)) if !l.is_empty() => BioTag::Inside(l.to_owned()),
            _ => return Err(SeqlogicalError::InvalidTag(s.to_owned())),
        };
        Ok(tag)
    }
}

pub fn to_bio(parse: &SemanticParse, n_tokens: usize) -> Result<Vec<BioTag>, SeqlogicalError> {
    let mut tags = vec![BioTag::Outside; n_tokens];
    for slot in &parse.slots {
        if slot.start >= slot.end || slot.end > n_tokens {
            return Err(SeqlogicalError::LengthMismatch { expected: slot.end, actual: n_tokens });
        }
        tags[slot.start] = BioTag::Begin(slot.label.clone());
        for tag in &mut tags[slot.start + 1..slot.end] {
            *tag = BioTag::Inside(slot.label.clone());
        }
    }
    Ok(tags)
}

/// Decodes BIO tags into sorted, disjoint slots. An `I-X` that does not
/// continue an `X` span opens a new one.
pub fn slots_from_bio(tags: &[BioTag]) -> Vec<SlotAnnotation> {
    let mut slots: Vec<SlotAnnotation> = Vec::new();
    let mut open: Option<SlotAnnotation> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::Outside => slots.extend(open.take()),
            BioTag::Begin(label) => {
                slots.extend(open.take());
                open = Some(SlotAnnotation::new(label.clone(), i, i + 1));
            }
            BioTag::Inside(label) => match &mut open {
                Some(current) if current.label == *label => current.end = i + 1,
                _ => {
                    slots.extend(open.take());
                    open = Some(SlotAnnotation::new(label.clone(), i, i + 1));
                }
            },
        }
    }
    slots.extend(open);
    slots
}

pub fn parse_bio_tags<S: AsRef<str>>(tags: &[S]) -> Result<Vec<BioTag>, SeqlogicalError> {
    tags.iter().map(|t| t.as_ref().parse()).collect()
}
