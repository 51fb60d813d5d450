//! Exact-match scoring and paired significance testing.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_dataset, Dataset, DatasetError, Format};
use crate::seqlogical::{parse_seqlogical, serialize_seqlogical, SemanticParse, SeqlogicalError};

pub const MIN_PERMUTATIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {gold} gold vs {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("prediction {index} has id {pred:?} but gold has {gold:?}")]
    IdMismatch { index: usize, gold: String, pred: String },
    #[error("need at least {MIN_PERMUTATIONS} permutations, got {0}")]
    TooFewPermutations(usize),
    #[error("prediction line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentBreakdown {
    pub n: usize,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_match: f64,
    pub intent_accuracy: f64,
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub n: usize,
    pub per_intent: BTreeMap<String, IntentBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UtteranceError {
    pub id: String,
    pub gold: String,
    pub pred: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEvaluation {
    #[serde(flatten)]
    pub report: EvalReport,
    pub errors: Vec<UtteranceError>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Whether each prediction matches its gold parse exactly.
pub fn correctness(gold: &Dataset, pred: &[SemanticParse]) -> Result<Vec<bool>, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    Ok(gold.iter().zip(pred).map(|(g, p)| g.parse == *p).collect())
}

pub fn exact_match_accuracy(gold: &Dataset, pred: &[SemanticParse]) -> Result<EvalReport, EvalError> {
    let correct = correctness(gold, pred)?;
    let mut intent_hits = 0;
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    let mut per_intent: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((g, p), &ok) in gold.iter().zip(pred).zip(&correct) {
        intent_hits += usize::from(g.parse.intent == p.intent);
        let gold_slots: HashSet<_> = g.parse.slots.iter().collect();
        tp += p.slots.iter().filter(|s| gold_slots.contains(s)).count();
        n_pred += p.slots.len();
        n_gold += g.parse.slots.len();
        let e = per_intent.entry(g.parse.intent.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(ok);
    }
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let n = gold.len();
    Ok(EvalReport {
        exact_match: ratio(correct.iter().filter(|&&c| c).count(), n),
        intent_accuracy: ratio(intent_hits, n),
        slot_f1: f1,
        slot_precision: precision,
        slot_recall: recall,
        n,
        per_intent: per_intent
            .into_iter()
            .map(|(k, (n, hits))| (k, IntentBreakdown { n, exact_match: ratio(hits, n) }))
            .collect(),
    })
}

/// Two-sided paired sign-flip test on the difference in accuracy.
///
/// Permutation `p` draws its signs from its own ChaCha stream, so the result
/// does not depend on how permutations are scheduled.
pub fn paired_permutation_test(a: &[bool], b: &[bool], n_permutations: usize, seed: u64) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { gold: a.len(), pred: b.len() });
    }
    if n_permutations < MIN_PERMUTATIONS {
        return Err(EvalError::TooFewPermutations(n_permutations));
    }
    let diffs: Vec<i64> = a.iter().zip(b).map(|(&x, &y)| i64::from(x) - i64::from(y)).filter(|&d| d != 0).collect();
    let observed = diffs.iter().sum::<i64>().abs();
    let at_least_as_extreme = |p: usize| -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let s: i64 = diffs.iter().map(|&d| if rng.random::<bool>() { d } else { -d }).sum();
        usize::from(s.abs() >= observed)
    };
    #[cfg(feature = "parallel")]
    let count: usize = {
        use rayon::prelude::*;
        (0..n_permutations).into_par_iter().map(at_least_as_extreme).sum()
    };
    #[cfg(not(feature = "parallel"))]
    let count: usize = (0..n_permutations).map(at_least_as_extreme).sum();
    Ok((1 + count) as f64 / (1 + n_permutations) as f64)
}

#[derive(Deserialize)]
struct PredRecord {
    #[serde(default)]
    id: Option<String>,
    seqlogical: String,
}

/// Reads predictions: one JSON object per line with `seqlogical` and an
/// optional `id`.
pub fn read_predictions(text: &str) -> Result<Vec<(Option<String>, SemanticParse)>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let format = |message: String| EvalError::Format { line: i + 1, message };
        let rec: PredRecord = serde_json::from_str(line).map_err(|e| format(e.to_string()))?;
        let (_, parse) = parse_seqlogical(&rec.seqlogical).map_err(|e: SeqlogicalError| format(e.to_string()))?;
        out.push((rec.id, parse));
    }
    Ok(out)
}

pub fn evaluate_run(gold_path: &Path, pred_path: &Path) -> Result<RunEvaluation, EvalError> {
    let gold = load_dataset(gold_path, Format::from_path(gold_path))?;
    let preds = read_predictions(&fs::read_to_string(pred_path)?)?;
    if preds.len() != gold.len() {
        return Err(EvalError::LengthMismatch { gold: gold.len(), pred: preds.len() });
    }
    for (index, (g, (id, _))) in gold.iter().zip(&preds).enumerate() {
        if let Some(id) = id {
            if *id != g.id {
                return Err(EvalError::IdMismatch { index, gold: g.id.clone(), pred: id.clone() });
            }
        }
    }
    let parses: Vec<SemanticParse> = preds.into_iter().map(|(_, p)| p).collect();
    let report = exact_match_accuracy(&gold, &parses)?;
    let errors = gold
        .iter()
        .zip(&parses)
        .filter(|(g, p)| g.parse != **p)
        .map(|(g, p)| UtteranceError {
            id: g.id.clone(),
            gold: g.seqlogical(),
            pred: serialize_seqlogical(&g.utterance, p).unwrap_or_else(|e| format!("<unserializable: {e}>")),
        })
        .collect();
    Ok(RunEvaluation { report, errors })
}
