//! Annotated corpora: loading, corpus statistics, the vocabulary-rank
//! language ratio and coverage-first few-shot sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqlogical::{
    parse_seqlogical, serialize_seqlogical, validate_tree, SemanticParse, SeqlogicalError, Utterance, DEFAULT_MAX_DEPTH,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
    #[error("cannot cover {needed} labels with {n} examples")]
    InfeasibleCoverage { needed: usize, n: usize },
    #[error("requested {n} examples from a dataset of {available}")]
    SampleTooLarge { n: usize, available: usize },
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error(transparent)]
    Seqlogical(#[from] SeqlogicalError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    #[default]
    Unsplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Tsv,
}

impl Format {
    /// Picks the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => Format::Tsv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(DatasetError::UnknownFormat(other.to_owned())),
        }
    }
}

/// Where a synthetic example came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub domain: String,
    pub utterance: Utterance,
    pub parse: SemanticParse,
    pub language: Option<String>,
    pub provenance: Option<Provenance>,
}

impl Example {
    pub fn from_seqlogical(
        id: impl Into<String>,
        domain: impl Into<String>,
        text: &str,
    ) -> Result<Self, SeqlogicalError> {
        let (utterance, parse) = parse_seqlogical(text)?;
        Ok(Example { id: id.into(), domain: domain.into(), utterance, parse, language: None, provenance: None })
    }

    pub fn seqlogical(&self) -> String {
        serialize_seqlogical(&self.utterance, &self.parse).expect("example invariants hold by construction")
    }
}

/// One JSONL line. Field order here is the emitted order.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    domain: String,
    seqlogical: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Split,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(examples: Vec<Example>, split: Split) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(DatasetError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset { examples, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn intents(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.parse.intent.as_str()).collect()
    }

    pub fn slot_labels(&self) -> BTreeSet<&str> {
        self.examples.iter().flat_map(|e| e.parse.slots.iter().map(|s| s.label.as_str())).collect()
    }

    pub fn read<R: Read>(reader: R, format: Format) -> Result<Self, DatasetError> {
        let mut examples = Vec::new();
        for (index, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let lineno = index + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record = match format {
                Format::Jsonl => serde_json::from_str::<Record>(&line)
                    .map_err(|e| DatasetError::Parse { line: lineno, message: e.to_string() })?,
                Format::Tsv => {
                    let mut fields = line.splitn(3, '\t');
                    match (fields.next(), fields.next(), fields.next()) {
                        (Some(id), Some(domain), Some(seq)) => Record {
                            id: id.to_owned(),
                            domain: domain.to_owned(),
                            seqlogical: seq.to_owned(),
                            language: None,
                            source_id: None,
                            generator: None,
                        },
                        _ => {
                            return Err(DatasetError::Parse {
                                line: lineno,
                                message: "expected id<TAB>domain<TAB>seqlogical".into(),
                            })
                        }
                    }
                }
            };
            let verdict = validate_tree(&record.seqlogical, DEFAULT_MAX_DEPTH);
            if let Some(first) = verdict.violations().first() {
                return Err(DatasetError::Parse { line: lineno, message: first.to_string() });
            }
            let (utterance, parse) = parse_seqlogical(&record.seqlogical)?;
            let provenance = match (record.source_id, record.generator) {
                (Some(source_id), Some(generator)) => Some(Provenance { source_id, generator }),
                _ => None,
            };
            examples.push(Example {
                id: record.id,
                domain: record.domain,
                utterance,
                parse,
                language: record.language,
                provenance,
            });
        }
        Dataset::new(examples, Split::Unsplit)
    }

    pub fn write<W: Write>(&self, mut writer: W, format: Format) -> Result<(), DatasetError> {
        for ex in &self.examples {
            match format {
                Format::Jsonl => {
                    let record = Record {
                        id: ex.id.clone(),
                        domain: ex.domain.clone(),
                        seqlogical: ex.seqlogical(),
                        language: ex.language.clone(),
                        source_id: ex.provenance.as_ref().map(|p| p.source_id.clone()),
                        generator: ex.provenance.as_ref().map(|p| p.generator.clone()),
                    };
                    let line = serde_json::to_string(&record).expect("record serializes");
                    writeln!(writer, "{line}")?;
                }
                Format::Tsv => writeln!(writer, "{}\t{}\t{}", ex.id, ex.domain, ex.seqlogical())?,
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf, Format::Jsonl).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let file = fs::File::create(path)?;
        let mut writer = io::BufWriter::new(file);
        self.write(&mut writer, Format::from_path(path))?;
        writer.flush()?;
        Ok(())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Concatenates datasets, rejecting id collisions.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset, DatasetError> {
        let examples = parts.iter().flat_map(|d| d.examples.iter().cloned()).collect();
        Dataset::new(examples, Split::Unsplit)
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<Dataset, DatasetError> {
    let file = fs::File::open(path)?;
    Dataset::read(file, format)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainStats {
    pub intents: usize,
    pub slot_labels: usize,
    pub utterances: usize,
    pub mean_slots: f64,
}

pub fn dataset_stats(ds: &Dataset) -> BTreeMap<String, DomainStats> {
    #[derive(Default)]
    struct Acc<'a> {
        intents: BTreeSet<&'a str>,
        labels: BTreeSet<&'a str>,
        utterances: usize,
        slots: usize,
    }
    let mut per_domain: BTreeMap<&str, Acc> = BTreeMap::new();
    for ex in &ds.examples {
        let acc = per_domain.entry(ex.domain.as_str()).or_default();
        acc.intents.insert(&ex.parse.intent);
        acc.labels.extend(ex.parse.slots.iter().map(|s| s.label.as_str()));
        acc.utterances += 1;
        acc.slots += ex.parse.slots.len();
    }
    per_domain
        .into_iter()
        .map(|(domain, acc)| {
            let stats = DomainStats {
                intents: acc.intents.len(),
                slot_labels: acc.labels.len(),
                utterances: acc.utterances,
                mean_slots: acc.slots as f64 / acc.utterances as f64,
            };
            (domain.to_owned(), stats)
        })
        .collect()
}

/// Token → frequency rank, 0 being most frequent. Lookups are case-folded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VocabRankTable {
    ranks: HashMap<String, usize>,
}

impl VocabRankTable {
    /// Ranks follow first appearance; repeated (case-folded) entries are skipped
    /// so ranks stay dense.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut ranks = HashMap::new();
        for token in tokens {
            let key = token.as_ref().trim().to_lowercase();
            if key.is_empty() {
                continue;
            }
            let next = ranks.len();
            ranks.entry(key).or_insert(next);
        }
        VocabRankTable { ranks }
    }

    /// One token per line, rank = order of appearance.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)?;
        let table = VocabRankTable::from_tokens(text.lines());
        if table.is_empty() {
            return Err(DatasetError::EmptyVocabulary);
        }
        Ok(table)
    }

    pub fn rank(&self, token: &str) -> Option<usize> {
        self.ranks.get(&token.to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageAssignment {
    A,
    B,
    Tie,
    Unknown,
}

impl fmt::Display for LanguageAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LanguageAssignment::A => "a",
            LanguageAssignment::B => "b",
            LanguageAssignment::Tie => "tie",
            LanguageAssignment::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

pub fn assign_language(token: &str, vocab_a: &VocabRankTable, vocab_b: &VocabRankTable) -> LanguageAssignment {
    use std::cmp::Ordering::*;
    match (vocab_a.rank(token), vocab_b.rank(token)) {
        (None, None) => LanguageAssignment::Unknown,
        (Some(_), None) => LanguageAssignment::A,
        (None, Some(_)) => LanguageAssignment::B,
        (Some(a), Some(b)) => match a.cmp(&b) {
            Less => LanguageAssignment::A,
            Greater => LanguageAssignment::B,
            Equal => LanguageAssignment::Tie,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageRatio {
    pub a_tokens: usize,
    pub b_tokens: usize,
    pub ties: usize,
    pub unknown: usize,
    /// `None` when no token was assigned to language b.
    pub ratio: Option<f64>,
    pub assignments: Vec<(String, LanguageAssignment)>,
}

/// Ratio of tokens assigned to vocabulary a over tokens assigned to b.
/// Ties and out-of-vocabulary tokens are counted but excluded.
pub fn language_ratio(
    ds: &Dataset,
    vocab_a: &VocabRankTable,
    vocab_b: &VocabRankTable,
) -> Result<LanguageRatio, DatasetError> {
    if vocab_a.is_empty() || vocab_b.is_empty() {
        return Err(DatasetError::EmptyVocabulary);
    }
    let mut report =
        LanguageRatio { a_tokens: 0, b_tokens: 0, ties: 0, unknown: 0, ratio: None, assignments: Vec::new() };
    for token in ds.examples.iter().flat_map(|e| e.utterance.tokens.iter()) {
        let assignment = assign_language(token, vocab_a, vocab_b);
        match assignment {
            LanguageAssignment::A => report.a_tokens += 1,
            LanguageAssignment::B => report.b_tokens += 1,
            LanguageAssignment::Tie => report.ties += 1,
            LanguageAssignment::Unknown => report.unknown += 1,
        }
        report.assignments.push((token.clone(), assignment));
    }
    if report.b_tokens > 0 {
        report.ratio = Some(report.a_tokens as f64 / report.b_tokens as f64);
    }
    Ok(report)
}

fn example_labels(ex: &Example) -> impl Iterator<Item = String> + '_ {
    std::iter::once(format!("IN:{}", ex.parse.intent)).chain(ex.parse.slots.iter().map(|s| format!("SL:{}", s.label)))
}

/// Samples `n` examples so that every intent and every slot label of `ds`
/// appears at least once. Coverage is reached greedily, rarest uncovered
/// label first; the rest is filled uniformly at random. Output keeps the
/// order of `ds`.
pub fn sample_fewshot(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    if n > ds.len() {
        return Err(DatasetError::SampleTooLarge { n, available: ds.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut frequency: BTreeMap<String, usize> = BTreeMap::new();
    let mut holders: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        let labels: BTreeSet<String> = example_labels(ex).collect();
        for label in labels {
            *frequency.entry(label.clone()).or_insert(0) += 1;
            holders.entry(label).or_default().push(i);
        }
    }

    let mut picked = vec![false; ds.len()];
    let mut covered: HashSet<String> = HashSet::new();
    let mut order: Vec<(&String, &usize)> = frequency.iter().collect();
    order.sort_by_key(|&(label, freq)| (*freq, label.clone()));
    let mut n_picked = 0;
    for (label, _) in order {
        if covered.contains(label) {
            continue;
        }
        let candidates = &holders[label];
        let &choice = candidates.choose(&mut rng).expect("label has at least one holder");
        picked[choice] = true;
        n_picked += 1;
        covered.extend(example_labels(&ds.examples[choice]));
    }
    if n_picked > n {
        return Err(DatasetError::InfeasibleCoverage { needed: n_picked, n });
    }

    let mut rest: Vec<usize> = (0..ds.len()).filter(|&i| !picked[i]).collect();
    rest.shuffle(&mut rng);
    for &i in rest.iter().take(n - n_picked) {
        picked[i] = true;
    }

    let examples = ds.examples.iter().zip(&picked).filter(|(_, &p)| p).map(|(e, _)| e.clone()).collect();
    Ok(Dataset { examples, split: ds.split })
}
