//! Match-and-filter augmentation.
//!
//! Each code-switched seed is paired with its nearest same-skeleton
//! neighbors from a source-language pool; a generator maps the neighbors to
//! new annotated candidates; candidates that duplicate a seed, are not valid
//! trees, or change the skeleton of their source are dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Example, Provenance, Split};
use crate::seqlogical::{
    canonicalize, compute_skeleton, parse_seqlogical, serialize_seqlogical, validate_tree, ParseSkeleton,
    SemanticParse, SeqlogicalError, SlotAnnotation, Utterance, DEFAULT_MAX_DEPTH,
};

pub const BUILTIN_GENERATOR: &str = "builtin_slot_substitution";

#[derive(Debug, Error)]
pub enum MatchFilterError {
    #[error("no template shares the skeleton {0}")]
    NoTemplate(ParseSkeleton),
    #[error("source {id:?} is not a valid parse: {error}")]
    InvalidSource { id: String, error: SeqlogicalError },
    #[error("generator failed: {0}")]
    GeneratorFailure(String),
    #[error("candidate refers to unknown source {0:?}")]
    UnknownSource(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Edit distance over arbitrary sequences with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    #[default]
    Token,
    Character,
}

impl FromStr for DistanceUnit {
    type Err = MatchFilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token" => Ok(DistanceUnit::Token),
            "character" | "char" => Ok(DistanceUnit::Character),
            other => Err(MatchFilterError::InvalidConfig(format!("unknown distance unit {other:?}"))),
        }
    }
}

pub fn utterance_distance(a: &Utterance, b: &Utterance, unit: DistanceUnit) -> usize {
    match unit {
        DistanceUnit::Token => levenshtein(&a.tokens, &b.tokens),
        DistanceUnit::Character => {
            let x: Vec<char> = a.text().chars().collect();
            let y: Vec<char> = b.text().chars().collect();
            levenshtein(&x, &y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub k: usize,
    pub distance_unit: DistanceUnit,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { k: 10, distance_unit: DistanceUnit::Token }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchFilterError> {
        if self.k == 0 {
            return Err(MatchFilterError::InvalidConfig("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub example: &'a Example,
    pub distance: usize,
}

/// Up to `k` pool examples with the query's skeleton, closest first. Ties are
/// broken by utterance text, then id.
pub fn find_neighbors<'a>(query: &Example, pool: &'a Dataset, config: &MatchConfig) -> Vec<Neighbor<'a>> {
    let skeleton = compute_skeleton(&query.parse);
    let mut ranked: Vec<(Neighbor<'a>, String)> = pool
        .iter()
        .filter(|e| compute_skeleton(&e.parse) == skeleton)
        .map(|e| {
            let distance = utterance_distance(&query.utterance, &e.utterance, config.distance_unit);
            (Neighbor { example: e, distance }, e.utterance.text())
        })
        .collect();
    ranked.sort_by(|(a, ta), (b, tb)| (a.distance, ta, &a.example.id).cmp(&(b.distance, tb, &b.example.id)));
    ranked.into_iter().take(config.k).map(|(n, _)| n).collect()
}

/// One generator training pair: a pool neighbor as source, the seed as target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub source_id: String,
    pub target_id: String,
    pub source: String,
    pub target: String,
}

pub fn build_parallel_corpus(seeds: &Dataset, pool: &Dataset, config: &MatchConfig) -> Vec<ParallelExample> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for seed in seeds.iter() {
        let target = seed.seqlogical();
        for n in find_neighbors(seed, pool, config) {
            let source = n.example.seqlogical();
            if seen.insert((source.clone(), target.clone())) {
                out.push(ParallelExample {
                    source_id: n.example.id.clone(),
                    target_id: seed.id.clone(),
                    source,
                    target: target.clone(),
                });
            }
        }
    }
    out
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, rows: &[T]) -> io::Result<()> {
    for row in rows {
        writeln!(writer, "{}", serde_json::to_string(row).map_err(io::Error::other)?)?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, MatchFilterError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                MatchFilterError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    BuiltinSlotSubstitution,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Shell command with `{train_src}`, `{train_tgt}`, `{infer_src}`, `{out}`
    /// and `{beam}` placeholders.
    pub external_command: Option<String>,
    pub work_dir: PathBuf,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            kind: GeneratorKind::BuiltinSlotSubstitution,
            external_command: None,
            work_dir: "generator".into(),
        }
    }
}

impl GeneratorSpec {
    pub fn name(&self) -> &str {
        match self.kind {
            GeneratorKind::BuiltinSlotSubstitution => BUILTIN_GENERATOR,
            GeneratorKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub beam_size: usize,
    pub generator: GeneratorSpec,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { beam_size: 5, generator: GeneratorSpec::default() }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), MatchFilterError> {
        if self.beam_size == 0 {
            return Err(MatchFilterError::InvalidConfig("beam_size must be >= 1".into()));
        }
        let has_command = self.generator.external_command.is_some();
        if has_command != (self.generator.kind == GeneratorKind::External) {
            return Err(MatchFilterError::InvalidConfig(
                "external_command must be set exactly when the generator is external".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Duplicate,
    InvalidTree,
    SkeletonMismatch,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Duplicate => "duplicate",
            DropReason::InvalidTree => "invalid_tree",
            DropReason::SkeletonMismatch => "skeleton_mismatch",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Kept,
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenCandidate {
    pub source_id: String,
    pub domain: String,
    pub text: String,
    pub generator: String,
    #[serde(skip)]
    pub verdict: Option<Verdict>,
}

/// A source-language example handed to the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceItem {
    pub id: String,
    pub domain: String,
    pub seqlogical: String,
}

impl From<&Example> for SourceItem {
    fn from(ex: &Example) -> Self {
        SourceItem { id: ex.id.clone(), domain: ex.domain.clone(), seqlogical: ex.seqlogical() }
    }
}

/// Distinct generator sources of a parallel corpus, first occurrence order.
pub fn parallel_sources(parallel: &[ParallelExample], pool: &Dataset) -> Vec<SourceItem> {
    let mut seen = HashSet::new();
    parallel
        .iter()
        .filter(|p| seen.insert(p.source_id.as_str()))
        .map(|p| SourceItem {
            id: p.source_id.clone(),
            domain: pool.get(&p.source_id).map_or_else(String::new, |e| e.domain.clone()),
            seqlogical: p.source.clone(),
        })
        .collect()
}

/// Splices `source` slot texts into template carriers with the same skeleton.
/// Same-label slots pair up in span order. Results are ranked by the
/// template's token distance to the source and deduplicated.
pub fn builtin_generate(source: &str, templates: &Dataset, beam: usize) -> Result<Vec<String>, MatchFilterError> {
    let (src_utt, src_parse) =
        parse_seqlogical(source).map_err(|error| MatchFilterError::InvalidSource { id: String::new(), error })?;
    let skeleton = compute_skeleton(&src_parse);

    let mut by_label: BTreeMap<&str, Vec<&SlotAnnotation>> = BTreeMap::new();
    for slot in &src_parse.slots {
        by_label.entry(&slot.label).or_default().push(slot);
    }

    let mut ranked: Vec<(usize, String)> = Vec::new();
    for template in templates.iter().filter(|t| compute_skeleton(&t.parse) == skeleton) {
        let mut used: HashMap<&str, usize> = HashMap::new();
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        let mut cursor = 0;
        for slot in &template.parse.slots {
            tokens.extend_from_slice(&template.utterance.tokens[cursor..slot.start]);
            let k = used.entry(&slot.label).or_insert(0);
            let filler = by_label[slot.label.as_str()][*k];
            *k += 1;
            let start = tokens.len();
            tokens.extend_from_slice(&src_utt.tokens[filler.start..filler.end]);
            slots.push(SlotAnnotation::new(slot.label.clone(), start, tokens.len()));
            cursor = slot.end;
        }
        tokens.extend_from_slice(&template.utterance.tokens[cursor..]);
        let text = serialize_seqlogical(&Utterance::new(tokens), &SemanticParse::new(src_parse.intent.clone(), slots))
            .expect("substitution preserves parse invariants");
        let distance = levenshtein(&template.utterance.tokens, &src_utt.tokens);
        ranked.push((distance, text));
    }
    if ranked.is_empty() {
        return Err(MatchFilterError::NoTemplate(skeleton));
    }
    ranked.sort();
    let mut seen = HashSet::new();
    Ok(ranked.into_iter().map(|(_, text)| text).filter(|t| seen.insert(t.clone())).take(beam).collect())
}

/// Produces up to `beam_size` candidates per source.
pub fn generate_candidates(
    sources: &[SourceItem],
    parallel: &[ParallelExample],
    config: &GenerationConfig,
) -> Result<Vec<GenCandidate>, MatchFilterError> {
    config.validate()?;
    for s in sources {
        parse_seqlogical(&s.seqlogical).map_err(|error| MatchFilterError::InvalidSource { id: s.id.clone(), error })?;
    }
    let generator = config.generator.name().to_owned();
    let per_source: Vec<Vec<String>> = match config.generator.kind {
        GeneratorKind::BuiltinSlotSubstitution => {
            if parallel.is_empty() {
                return Err(MatchFilterError::InvalidConfig("builtin generator needs parallel pairs".into()));
            }
            let templates = template_dataset(parallel);
            sources
                .iter()
                .map(|s| builtin_generate(&s.seqlogical, &templates, config.beam_size))
                .collect::<Result<_, _>>()?
        }
        GeneratorKind::External => run_external(sources, parallel, config)?,
    };
    Ok(sources
        .iter()
        .zip(per_source)
        .flat_map(|(s, texts)| {
            let generator = generator.clone();
            texts.into_iter().map(move |text| GenCandidate {
                source_id: s.id.clone(),
                domain: s.domain.clone(),
                text,
                generator: generator.clone(),
                verdict: None,
            })
        })
        .collect())
}

/// Distinct parallel targets as a template dataset.
fn template_dataset(parallel: &[ParallelExample]) -> Dataset {
    let mut seen = HashSet::new();
    let examples = parallel
        .iter()
        .filter(|p| seen.insert(p.target_id.as_str()))
        .filter_map(|p| Example::from_seqlogical(p.target_id.clone(), "", &p.target).ok())
        .collect();
    Dataset { examples, split: Split::Unsplit }
}

#[derive(Deserialize)]
struct ExternalLine {
    line: usize,
    candidates: Vec<String>,
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()
}

/// Runs the external generator through the file protocol.
fn run_external(
    sources: &[SourceItem],
    parallel: &[ParallelExample],
    config: &GenerationConfig,
) -> Result<Vec<Vec<String>>, MatchFilterError> {
    let spec = &config.generator;
    let command = spec.external_command.as_deref().expect("validated");
    let dir = &spec.work_dir;
    fs::create_dir_all(dir)?;
    let train_src = dir.join("train_src.txt");
    let train_tgt = dir.join("train_tgt.txt");
    let infer_src = dir.join("infer_src.txt");
    let out = dir.join("generated.jsonl");
    write_lines(&train_src, parallel.iter().map(|p| p.source.clone()))?;
    write_lines(&train_tgt, parallel.iter().map(|p| p.target.clone()))?;
    write_lines(&infer_src, sources.iter().map(|s| s.seqlogical.clone()))?;
    if out.exists() {
        fs::remove_file(&out)?;
    }

    let rendered = command
        .replace("{train_src}", &train_src.to_string_lossy())
        .replace("{train_tgt}", &train_tgt.to_string_lossy())
        .replace("{infer_src}", &infer_src.to_string_lossy())
        .replace("{out}", &out.to_string_lossy())
        .replace("{beam}", &config.beam_size.to_string());
    let output = std::process::Command::new("sh")
        .arg("-c")
        .arg(&rendered)
        .output()
        .map_err(|e| MatchFilterError::GeneratorFailure(format!("cannot run {rendered:?}: {e}")))?;
    if !output.status.success() {
        return Err(MatchFilterError::GeneratorFailure(format!(
            "{rendered:?} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }

    let text = fs::read_to_string(&out)
        .map_err(|e| MatchFilterError::GeneratorFailure(format!("missing output {}: {e}", out.display())))?;
    let mut per_source = vec![Vec::new(); sources.len()];
    for (index, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record: ExternalLine = serde_json::from_str(raw)
            .map_err(|e| MatchFilterError::GeneratorFailure(format!("output line {}: {e}: {raw}", index + 1)))?;
        let slot = per_source.get_mut(record.line).ok_or_else(|| {
            MatchFilterError::GeneratorFailure(format!(
                "output line {} refers to input {}: {raw}",
                index + 1,
                record.line
            ))
        })?;
        slot.extend(record.candidates);
        if slot.len() > config.beam_size {
            return Err(MatchFilterError::GeneratorFailure(format!(
                "more than {} candidates for input {}: {raw}",
                config.beam_size, record.line
            )));
        }
    }
    Ok(per_source)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub duplicate: usize,
    pub invalid_tree: usize,
    pub skeleton_mismatch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DropRecord {
    pub source_id: String,
    pub text: String,
    pub verdict_reason: DropReason,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Dataset,
    pub report: FilterReport,
    /// Input candidates with their verdicts filled in.
    pub judged: Vec<GenCandidate>,
}

impl FilterOutcome {
    pub fn drops(&self) -> Vec<DropRecord> {
        self.judged
            .iter()
            .filter_map(|c| match c.verdict {
                Some(Verdict::Dropped(reason)) => {
                    Some(DropRecord { source_id: c.source_id.clone(), text: c.text.clone(), verdict_reason: reason })
                }
                _ => None,
            })
            .collect()
    }
}

/// Applies the three rules (invalid tree, seed duplicate, skeleton differing
/// from the decoded source) and drops repeats among kept candidates.
pub fn filter_candidates(
    cands: &[GenCandidate],
    seeds: &Dataset,
    source_index: &HashMap<String, ParseSkeleton>,
) -> Result<FilterOutcome, MatchFilterError> {
    let seed_texts: HashSet<String> = seeds.iter().map(Example::seqlogical).collect();
    let mut kept_texts: HashSet<String> = HashSet::new();
    let mut per_source: HashMap<&str, usize> = HashMap::new();
    let mut report = FilterReport { total: cands.len(), ..FilterReport::default() };
    let mut kept = Vec::new();
    let mut judged = Vec::with_capacity(cands.len());

    for cand in cands {
        let source_skeleton =
            source_index.get(&cand.source_id).ok_or_else(|| MatchFilterError::UnknownSource(cand.source_id.clone()))?;
        let verdict = if !validate_tree(&cand.text, DEFAULT_MAX_DEPTH).is_ok() {
            Verdict::Dropped(DropReason::InvalidTree)
        } else {
            let canonical = canonicalize(&cand.text).expect("valid tree canonicalizes");
            let (utterance, parse) = parse_seqlogical(&canonical).expect("canonical form parses");
            if seed_texts.contains(&canonical) {
                Verdict::Dropped(DropReason::Duplicate)
            } else if compute_skeleton(&parse) != *source_skeleton {
                Verdict::Dropped(DropReason::SkeletonMismatch)
            } else if !kept_texts.insert(canonical) {
                Verdict::Dropped(DropReason::Duplicate)
            } else {
                let n = per_source.entry(&cand.source_id).or_insert(0);
                *n += 1;
                kept.push(Example {
                    id: format!("gen:{}:{}", cand.source_id, n),
                    domain: cand.domain.clone(),
                    utterance,
                    parse,
                    language: Some("cs".into()),
                    provenance: Some(Provenance {
                        source_id: cand.source_id.clone(),
                        generator: cand.generator.clone(),
                    }),
                });
                Verdict::Kept
            }
        };
        match verdict {
            Verdict::Kept => report.kept += 1,
            Verdict::Dropped(DropReason::Duplicate) => report.duplicate += 1,
            Verdict::Dropped(DropReason::InvalidTree) => report.invalid_tree += 1,
            Verdict::Dropped(DropReason::SkeletonMismatch) => report.skeleton_mismatch += 1,
        }
        judged.push(GenCandidate { verdict: Some(verdict), ..cand.clone() });
    }
    let kept = Dataset::new(kept, Split::Train).expect("generated ids are unique");
    Ok(FilterOutcome { kept, report, judged })
}

/// Skeleton of every pool example, keyed by id.
pub fn skeleton_index(pool: &Dataset) -> HashMap<String, ParseSkeleton> {
    pool.iter().map(|e| (e.id.clone(), compute_skeleton(&e.parse))).collect()
}
