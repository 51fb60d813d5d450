use std::sync::OnceLock;

use csparse::alignment::{
    align_asymmetric, symmetrize_gdfa, train_translation_table, AlignmentConfig, AlignmentSet, ParallelPair,
};
use csparse::dataset::{Dataset, Example, Format};
use csparse::matchfilter::{
    build_parallel_corpus, filter_candidates, find_neighbors, generate_candidates, parallel_sources, skeleton_index,
    GenerationConfig, MatchConfig, Verdict,
};
use csparse::seqlogical::{compute_skeleton, parse_seqlogical, serialize_seqlogical, validate_tree, DEFAULT_MAX_DEPTH};
use serde_json::{json, Value};

const POOL: &str = include_str!("../../core/fixtures/spanglish/en_pool.jsonl");

/// The English pool shipped with the core crate's fixtures.
pub fn default_pool() -> &'static Dataset {
    static CELL: OnceLock<Dataset> = OnceLock::new();
    CELL.get_or_init(|| Dataset::read(POOL.as_bytes(), Format::Jsonl).expect("shipped pool parses"))
}

pub fn explore(text: &str) -> Result<Value, String> {
    let verdict = validate_tree(text, DEFAULT_MAX_DEPTH);
    let violations: Vec<String> = verdict.violations().iter().map(ToString::to_string).collect();
    if !verdict.is_ok() {
        return Ok(json!({ "valid": false, "violations": violations }));
    }
    let (utterance, parse) = parse_seqlogical(text).map_err(|e| e.to_string())?;
    let bio = parse.to_bio(utterance.len()).map_err(|e| e.to_string())?;
    let skeleton = compute_skeleton(&parse);
    let canonical = serialize_seqlogical(&utterance, &parse).map_err(|e| e.to_string())?;
    Ok(json!({
        "valid": true,
        "violations": violations,
        "tokens": utterance.tokens,
        "intent": parse.intent,
        "slots": parse.slots,
        "bio": bio.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "skeleton": skeleton,
        "canonical": canonical,
    }))
}

fn read_pairs(corpus: &str) -> Result<Vec<ParallelPair>, String> {
    corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (src, tgt) =
                line.split_once("|||").ok_or_else(|| format!("line {}: expected `source ||| target`", i + 1))?;
            let pair = ParallelPair::new(i.to_string(), src, tgt);
            if pair.source_tokens.is_empty() || pair.target_tokens.is_empty() {
                return Err(format!("line {}: empty side", i + 1));
            }
            Ok(pair)
        })
        .collect()
}

fn links(set: &AlignmentSet) -> Vec<[usize; 2]> {
    set.links().iter().map(|&(i, j)| [i, j]).collect()
}

pub fn align(corpus: &str, index: usize, diagonal_tension: f64, em_iterations: usize) -> Result<Value, String> {
    let pairs = read_pairs(corpus)?;
    let pair = pairs.get(index).ok_or_else(|| format!("pair {index} out of range ({} pairs)", pairs.len()))?;
    let config = AlignmentConfig { diagonal_tension, em_iterations, ..AlignmentConfig::default() };
    let forward_table = train_translation_table(&pairs, &config).map_err(|e| e.to_string())?;
    let swapped: Vec<ParallelPair> = pairs.iter().map(ParallelPair::swapped).collect();
    let reverse_table = train_translation_table(&swapped, &config).map_err(|e| e.to_string())?;
    let forward = align_asymmetric(pair, &forward_table, &config);
    let reverse = align_asymmetric(&pair.swapped(), &reverse_table, &config).transpose();
    let gdfa = symmetrize_gdfa(&forward, &reverse).map_err(|e| e.to_string())?;
    Ok(json!({
        "source": pair.source_tokens,
        "target": pair.target_tokens,
        "forward": links(&forward),
        "reverse": links(&reverse),
        "gdfa": links(&gdfa),
        "log_likelihood": forward_table.log_likelihood_history(),
    }))
}

pub fn preview(seed: &str, pool: &Dataset, k: usize, beam: usize) -> Result<Value, String> {
    let example = Example::from_seqlogical("seed", "demo", seed).map_err(|e| e.to_string())?;
    let matching = MatchConfig { k, ..MatchConfig::default() };
    matching.validate().map_err(|e| e.to_string())?;
    let neighbors: Vec<Value> = find_neighbors(&example, pool, &matching)
        .iter()
        .map(|n| json!({"id": n.example.id, "text": n.example.seqlogical(), "distance": n.distance}))
        .collect();
    let seeds = Dataset::new(vec![example], Default::default()).map_err(|e| e.to_string())?;
    let parallel = build_parallel_corpus(&seeds, pool, &matching);
    let sources = parallel_sources(&parallel, pool);
    let generation = GenerationConfig { beam_size: beam, ..GenerationConfig::default() };
    let candidates = if sources.is_empty() {
        Vec::new()
    } else {
        generate_candidates(&sources, &parallel, &generation).map_err(|e| e.to_string())?
    };
    let outcome = filter_candidates(&candidates, &seeds, &skeleton_index(pool)).map_err(|e| e.to_string())?;
    let judged: Vec<Value> = outcome
        .judged
        .iter()
        .map(|c| {
            let verdict = match c.verdict {
                Some(Verdict::Dropped(reason)) => json!(reason),
                _ => json!("kept"),
            };
            json!({"source_id": c.source_id, "text": c.text, "verdict": verdict})
        })
        .collect();
    Ok(json!({
        "neighbors": neighbors,
        "candidates": judged,
        "kept": outcome.report.kept,
        "total": outcome.report.total,
    }))
}
