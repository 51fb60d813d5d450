//! Statistical word alignment.
//!
//! Lexical translation tables are estimated with IBM Model 1 EM, optionally
//! weighting each source position by a diagonal prior
//! `p(i|j) ∝ exp(-λ·|(i+1)/n - (j+1)/m|)` with a fixed tension λ. Target
//! tokens may also align to a NULL source word with probability `p0`.
//! Asymmetric Viterbi links from both directions are merged with
//! grow-diag-final-and.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Printable name of the NULL source word.
pub const NULL_WORD: &str = "<NULL>";

/// Number of fixed corpus chunks reduced in order during the E-step. Fixed so
/// results do not depend on the worker count.
const EM_CHUNKS: usize = 8;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("empty parallel corpus")]
    EmptyCorpus,
    #[error("pair {0:?} has an empty side")]
    EmptySide(String),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("alignment dimensions {left:?} and {right:?} differ")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub pair_id: String,
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
}

impl ParallelPair {
    pub fn new(pair_id: impl Into<String>, source: &str, target: &str) -> Self {
        ParallelPair {
            pair_id: pair_id.into(),
            source_tokens: source.split_whitespace().map(str::to_owned).collect(),
            target_tokens: target.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn swapped(&self) -> Self {
        ParallelPair {
            pair_id: self.pair_id.clone(),
            source_tokens: self.target_tokens.clone(),
            target_tokens: self.source_tokens.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParallelRecord {
    id: String,
    src: String,
    tgt: String,
}

pub fn read_parallel<R: BufRead>(reader: R) -> Result<Vec<ParallelPair>, AlignmentError> {
    let mut pairs = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ParallelRecord = serde_json::from_str(&line)
            .map_err(|e| AlignmentError::Format { line: index + 1, message: e.to_string() })?;
        let pair = ParallelPair::new(record.id, &record.src, &record.tgt);
        if pair.source_tokens.is_empty() || pair.target_tokens.is_empty() {
            return Err(AlignmentError::EmptySide(pair.pair_id));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_parallel<W: Write>(mut writer: W, pairs: &[ParallelPair]) -> io::Result<()> {
    for pair in pairs {
        let record = ParallelRecord {
            id: pair.pair_id.clone(),
            src: pair.source_tokens.join(" "),
            tgt: pair.target_tokens.join(" "),
        };
        writeln!(writer, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub em_iterations: usize,
    pub null_prob: f64,
    /// Diagonal tension λ; zero disables the prior.
    pub diagonal_tension: f64,
    /// Probability floor for unseen word pairs.
    pub epsilon: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { em_iterations: 5, null_prob: 0.08, diagonal_tension: 4.0, epsilon: 1e-9 }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        if self.em_iterations == 0 {
            return Err(AlignmentError::InvalidConfig("em_iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.null_prob) {
            return Err(AlignmentError::InvalidConfig("null_prob must lie in [0, 1)".into()));
        }
        if !(self.diagonal_tension >= 0.0 && self.diagonal_tension.is_finite()) {
            return Err(AlignmentError::InvalidConfig("diagonal_tension must be >= 0".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(AlignmentError::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Prior over source positions for target position `j`, excluding NULL mass.
/// Entries sum to `1 - p0`.
pub fn position_prior(j: usize, source_len: usize, target_len: usize, config: &AlignmentConfig) -> Vec<f64> {
    let n = source_len as f64;
    let m = target_len as f64;
    let tgt_pos = (j + 1) as f64 / m;
    let mut weights: Vec<f64> =
        (0..source_len).map(|i| (-config.diagonal_tension * ((i + 1) as f64 / n - tgt_pos).abs()).exp()).collect();
    let z: f64 = weights.iter().sum();
    let scale = (1.0 - config.null_prob) / z;
    weights.iter_mut().for_each(|w| *w *= scale);
    weights
}

/// Lexical translation probabilities t(target | source), NULL included.
#[derive(Debug, Clone)]
pub struct TranslationTable {
    /// Index 0 is the NULL word.
    source_vocab: Vec<String>,
    source_index: HashMap<String, u32>,
    target_vocab: Vec<String>,
    target_index: HashMap<String, u32>,
    cells: HashMap<(u32, u32), usize>,
    cell_source: Vec<u32>,
    cell_target: Vec<u32>,
    probs: Vec<f64>,
    epsilon: f64,
    log_likelihood: Vec<f64>,
}

struct EncodedPair {
    source_len: usize,
    target_len: usize,
    /// `(source_len + 1) * target_len` cell ids, row 0 being NULL.
    cells: Vec<usize>,
}

impl TranslationTable {
    fn source_id(&self, word: Option<&str>) -> Option<u32> {
        match word {
            None => Some(0),
            Some(w) => self.source_index.get(w).copied(),
        }
    }

    /// t(target | source); `None` as source means NULL. Unseen pairs get epsilon.
    pub fn prob(&self, source: Option<&str>, target: &str) -> f64 {
        let (Some(e), Some(&f)) = (self.source_id(source), self.target_index.get(target)) else {
            return self.epsilon;
        };
        self.cells.get(&(e, f)).map_or(self.epsilon, |&c| self.probs[c].max(self.epsilon))
    }

    /// Non-zero entries of one source row, sorted by target word.
    pub fn row(&self, source: Option<&str>) -> Vec<(&str, f64)> {
        let Some(e) = self.source_id(source) else { return Vec::new() };
        let mut row: Vec<(&str, f64)> = (0..self.probs.len())
            .filter(|&c| self.cell_source[c] == e)
            .map(|c| (self.target_vocab[self.cell_target[c] as usize].as_str(), self.probs[c]))
            .collect();
        row.sort_by(|a, b| a.0.cmp(b.0));
        row
    }

    /// Most probable translation; ties go to the lexicographically smaller word.
    pub fn best_translation(&self, source: Option<&str>) -> Option<(&str, f64)> {
        self.row(source).into_iter().fold(None, |best, (w, p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((w, p)),
        })
    }

    pub fn source_words(&self) -> impl Iterator<Item = &str> {
        self.source_vocab.iter().skip(1).map(String::as_str)
    }

    /// Corpus log-likelihood before each EM update, followed by the value
    /// under the final table.
    pub fn log_likelihood_history(&self) -> &[f64] {
        &self.log_likelihood
    }

    /// Sum of each source row; all should equal 1.
    pub fn row_sums(&self) -> Vec<(String, f64)> {
        let mut sums = vec![0.0; self.source_vocab.len()];
        for (c, &p) in self.probs.iter().enumerate() {
            sums[self.cell_source[c] as usize] += p;
        }
        self.source_vocab.iter().cloned().zip(sums).collect()
    }

    /// Writes `source<TAB>target<TAB>prob` lines in sorted order.
    pub fn write_tsv<W: Write>(&self, mut writer: W) -> io::Result<()> {
        let mut rows: Vec<(&str, &str, f64)> = (0..self.probs.len())
            .map(|c| {
                (
                    self.source_vocab[self.cell_source[c] as usize].as_str(),
                    self.target_vocab[self.cell_target[c] as usize].as_str(),
                    self.probs[c],
                )
            })
            .collect();
        rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for (s, t, p) in rows {
            writeln!(writer, "{s}\t{t}\t{p:.9e}")?;
        }
        Ok(())
    }

    fn encode(&mut self, pair: &ParallelPair) -> EncodedPair {
        let source_len = pair.source_tokens.len();
        let target_len = pair.target_tokens.len();
        let mut sources = Vec::with_capacity(source_len + 1);
        sources.push(0u32);
        for w in &pair.source_tokens {
            let next = self.source_vocab.len() as u32;
            let id = *self.source_index.entry(w.clone()).or_insert_with(|| {
                self.source_vocab.push(w.clone());
                next
            });
            sources.push(id);
        }
        let mut targets = Vec::with_capacity(target_len);
        for w in &pair.target_tokens {
            let next = self.target_vocab.len() as u32;
            let id = *self.target_index.entry(w.clone()).or_insert_with(|| {
                self.target_vocab.push(w.clone());
                next
            });
            targets.push(id);
        }
        let mut cells = Vec::with_capacity((source_len + 1) * target_len);
        for &e in &sources {
            for &f in &targets {
                let next = self.cell_source.len();
                let c = *self.cells.entry((e, f)).or_insert_with(|| {
                    self.cell_source.push(e);
                    self.cell_target.push(f);
                    next
                });
                cells.push(c);
            }
        }
        EncodedPair { source_len, target_len, cells }
    }

    /// Uniform start: each source row spreads its mass evenly over the targets
    /// it co-occurs with.
    fn init_uniform(&mut self) {
        let mut row_len = vec![0usize; self.source_vocab.len()];
        for &e in &self.cell_source {
            row_len[e as usize] += 1;
        }
        self.probs = self.cell_source.iter().map(|&e| 1.0 / row_len[e as usize] as f64).collect();
    }
}

/// Expected counts and log-likelihood of one corpus chunk.
fn e_step_chunk(pairs: &[EncodedPair], probs: &[f64], n_cells: usize, config: &AlignmentConfig) -> (Vec<f64>, f64) {
    let mut counts = vec![0.0; n_cells];
    let mut ll = 0.0;
    let mut scores = Vec::new();
    for pair in pairs {
        let m = pair.target_len;
        for j in 0..m {
            let prior = position_prior(j, pair.source_len, m, config);
            scores.clear();
            scores.push(config.null_prob * probs[pair.cells[j]]);
            for (i, p) in prior.iter().enumerate() {
                scores.push(p * probs[pair.cells[(i + 1) * m + j]]);
            }
            let total: f64 = scores.iter().sum();
            ll += total.ln();
            for (row, s) in scores.iter().enumerate() {
                counts[pair.cells[row * m + j]] += s / total;
            }
        }
    }
    (counts, ll)
}

fn e_step(pairs: &[EncodedPair], probs: &[f64], config: &AlignmentConfig) -> (Vec<f64>, f64) {
    let chunk = pairs.len().div_ceil(EM_CHUNKS).max(1);
    let run = |c: &[EncodedPair]| e_step_chunk(c, probs, probs.len(), config);

    #[cfg(feature = "parallel")]
    let partials: Vec<(Vec<f64>, f64)> = {
        use rayon::prelude::*;
        pairs.par_chunks(chunk).map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<(Vec<f64>, f64)> = pairs.chunks(chunk).map(run).collect();

    let mut counts = vec![0.0; probs.len()];
    let mut ll = 0.0;
    for (part, part_ll) in partials {
        counts.iter_mut().zip(&part).for_each(|(c, p)| *c += p);
        ll += part_ll;
    }
    (counts, ll)
}

/// Trains t(f|e) on `corpus` by EM.
pub fn train_translation_table(
    corpus: &[ParallelPair],
    config: &AlignmentConfig,
) -> Result<TranslationTable, AlignmentError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(AlignmentError::EmptyCorpus);
    }
    let mut table = TranslationTable {
        source_vocab: vec![NULL_WORD.to_owned()],
        source_index: HashMap::new(),
        target_vocab: Vec::new(),
        target_index: HashMap::new(),
        cells: HashMap::new(),
        cell_source: Vec::new(),
        cell_target: Vec::new(),
        probs: Vec::new(),
        epsilon: config.epsilon,
        log_likelihood: Vec::new(),
    };
    let mut encoded = Vec::with_capacity(corpus.len());
    for pair in corpus {
        if pair.source_tokens.is_empty() || pair.target_tokens.is_empty() {
            return Err(AlignmentError::EmptySide(pair.pair_id.clone()));
        }
        encoded.push(table.encode(pair));
    }
    table.init_uniform();

    for _ in 0..config.em_iterations {
        let (counts, ll) = e_step(&encoded, &table.probs, config);
        table.log_likelihood.push(ll);
        let mut totals = vec![0.0; table.source_vocab.len()];
        for (c, &count) in counts.iter().enumerate() {
            totals[table.cell_source[c] as usize] += count;
        }
        for (c, &count) in counts.iter().enumerate() {
            let total = totals[table.cell_source[c] as usize];
            // rows that received no mass (e.g. NULL with p0 = 0) keep their values
            if total > 0.0 {
                table.probs[c] = count / total;
            }
        }
    }
    let (_, ll) = e_step(&encoded, &table.probs, config);
    table.log_likelihood.push(ll);
    Ok(table)
}

/// A set of `(source index, target index)` links.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlignmentSet {
    pub source_len: usize,
    pub target_len: usize,
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    pub fn empty(source_len: usize, target_len: usize) -> Self {
        AlignmentSet { source_len, target_len, links: BTreeSet::new() }
    }

    pub fn new<I>(source_len: usize, target_len: usize, links: I) -> Result<Self, AlignmentError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = AlignmentSet::empty(source_len, target_len);
        for (i, j) in links {
            if i >= source_len {
                return Err(AlignmentError::IndexOutOfRange { index: i, len: source_len });
            }
            if j >= target_len {
                return Err(AlignmentError::IndexOutOfRange { index: j, len: target_len });
            }
            set.links.insert((i, j));
        }
        Ok(set)
    }

    /// Monotone one-to-one links `(k, k)`.
    pub fn identity(len: usize) -> Self {
        AlignmentSet { source_len: len, target_len: len, links: (0..len).map(|k| (k, k)).collect() }
    }

    pub fn links(&self) -> &BTreeSet<(usize, usize)> {
        &self.links
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.links.contains(&(i, j))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn transpose(&self) -> Self {
        AlignmentSet {
            source_len: self.target_len,
            target_len: self.source_len,
            links: self.links.iter().map(|&(i, j)| (j, i)).collect(),
        }
    }

    fn check_dims(&self, other: &AlignmentSet) -> Result<(), AlignmentError> {
        let left = (self.source_len, self.target_len);
        let right = (other.source_len, other.target_len);
        if left != right {
            return Err(AlignmentError::DimensionMismatch { left, right });
        }
        Ok(())
    }

    /// Parses `i-j i-j ...`.
    pub fn parse(source_len: usize, target_len: usize, text: &str) -> Result<Self, AlignmentError> {
        let mut links = Vec::new();
        for item in text.split_whitespace() {
            let bad = || AlignmentError::Format { line: 0, message: format!("bad link {item:?}") };
            let (i, j) = item.split_once('-').ok_or_else(bad)?;
            links.push((i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?));
        }
        AlignmentSet::new(source_len, target_len, links)
    }
}

impl fmt::Display for AlignmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (i, j)) in self.links.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}-{j}")?;
        }
        Ok(())
    }
}

/// Links each target token to its best source position under the prior and
/// the table; tokens whose best choice is NULL stay unlinked. Ties go to the
/// lowest source index, and NULL must strictly beat every source position.
pub fn align_asymmetric(pair: &ParallelPair, table: &TranslationTable, config: &AlignmentConfig) -> AlignmentSet {
    let n = pair.source_tokens.len();
    let m = pair.target_tokens.len();
    let mut set = AlignmentSet::empty(n, m);
    if n == 0 {
        return set;
    }
    for (j, target) in pair.target_tokens.iter().enumerate() {
        let prior = position_prior(j, n, m, config);
        let mut best: Option<(usize, f64)> = None;
        for (i, source) in pair.source_tokens.iter().enumerate() {
            let score = prior[i] * table.prob(Some(source), target);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let null_score = config.null_prob * table.prob(None, target);
        if let Some((i, score)) = best {
            if score >= null_score {
                set.links.insert((i, j));
            }
        }
    }
    set
}

/// Grow-diag-final-and. Growth passes scan the union in `(i, j)` order and
/// repeat until nothing changes; final-and then adds union links whose
/// endpoints are both still unaligned.
///
/// Within a pass, adjacency is tested against the links present when the
/// pass started while alignedness is tracked live. With that split the
/// result only depends on the relative order of links sharing a row or a
/// column, so swapping the directions transposes the output.
pub fn symmetrize_gdfa(forward: &AlignmentSet, reverse: &AlignmentSet) -> Result<AlignmentSet, AlignmentError> {
    forward.check_dims(reverse)?;
    let union: BTreeSet<(usize, usize)> = forward.links.union(&reverse.links).copied().collect();
    let mut result = AlignmentSet {
        source_len: forward.source_len,
        target_len: forward.target_len,
        links: forward.links.intersection(&reverse.links).copied().collect(),
    };
    let mut src_aligned = vec![false; forward.source_len];
    let mut tgt_aligned = vec![false; forward.target_len];
    for &(i, j) in &result.links {
        src_aligned[i] = true;
        tgt_aligned[j] = true;
    }

    let has_neighbor = |links: &BTreeSet<(usize, usize)>, i: usize, j: usize| {
        (-1isize..=1).any(|di| {
            (-1isize..=1).any(|dj| {
                (di != 0 || dj != 0)
                    && i.checked_add_signed(di).zip(j.checked_add_signed(dj)).is_some_and(|p| links.contains(&p))
            })
        })
    };

    loop {
        let mut grew = false;
        let snapshot = result.links.clone();
        for &(i, j) in &union {
            if result.links.contains(&(i, j)) || (src_aligned[i] && tgt_aligned[j]) {
                continue;
            }
            if has_neighbor(&snapshot, i, j) {
                result.links.insert((i, j));
                src_aligned[i] = true;
                tgt_aligned[j] = true;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }

    for &(i, j) in &union {
        if !src_aligned[i] && !tgt_aligned[j] {
            result.links.insert((i, j));
            src_aligned[i] = true;
            tgt_aligned[j] = true;
        }
    }
    Ok(result)
}

/// Alignment in both directions for a whole corpus, symmetrized.
pub fn align_corpus(corpus: &[ParallelPair], config: &AlignmentConfig) -> Result<Vec<AlignmentSet>, AlignmentError> {
    let forward_table = train_translation_table(corpus, config)?;
    let swapped: Vec<ParallelPair> = corpus.iter().map(ParallelPair::swapped).collect();
    let reverse_table = train_translation_table(&swapped, config)?;
    corpus
        .iter()
        .zip(&swapped)
        .map(|(pair, rev_pair)| {
            let forward = align_asymmetric(pair, &forward_table, config);
            let reverse = align_asymmetric(rev_pair, &reverse_table, config).transpose();
            symmetrize_gdfa(&forward, &reverse)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    #[serde(rename = "id")]
    pub pair_id: String,
    /// Row-major: one row per source token.
    pub scores: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    pub fn source_len(&self) -> usize {
        self.scores.len()
    }

    pub fn target_len(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Checks shape against a pair and that scores are finite and non-negative.
    pub fn check(&self, source_len: usize, target_len: usize) -> Result<(), AlignmentError> {
        let dims = (self.source_len(), self.target_len());
        if dims != (source_len, target_len) || self.scores.iter().any(|r| r.len() != target_len) {
            return Err(AlignmentError::DimensionMismatch { left: dims, right: (source_len, target_len) });
        }
        if self.scores.iter().flatten().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(AlignmentError::InvalidConfig(format!(
                "attention matrix {:?} has negative or non-finite scores",
                self.pair_id
            )));
        }
        Ok(())
    }
}

pub fn read_attention<R: BufRead>(reader: R) -> Result<Vec<AttentionMatrix>, AlignmentError> {
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| AlignmentError::Format { line: index + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

/// One link per requested source row to its highest-scoring target column
/// (lowest column on ties).
pub fn attention_align(
    matrix: &AttentionMatrix,
    slot_source_indices: &BTreeSet<usize>,
) -> Result<AlignmentSet, AlignmentError> {
    let (n, m) = (matrix.source_len(), matrix.target_len());
    let mut set = AlignmentSet::empty(n, m);
    for &i in slot_source_indices {
        let row = matrix.scores.get(i).ok_or(AlignmentError::IndexOutOfRange { index: i, len: n })?;
        let best = row.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (j, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((j, s)),
        });
        if let Some((j, _)) = best {
            set.links.insert((i, j));
        }
    }
    Ok(set)
}

/// Writes `id<TAB>i-j i-j ...` lines.
pub fn write_alignments<W: Write>(mut writer: W, rows: &[(String, AlignmentSet)]) -> io::Result<()> {
    for (id, set) in rows {
        writeln!(writer, "{id}\t{set}")?;
    }
    Ok(())
}

/// Reads `id<TAB>links` lines, taking dimensions from the matching pairs.
pub fn read_alignments<R: BufRead>(
    reader: R,
    pairs: &[ParallelPair],
) -> Result<Vec<(String, AlignmentSet)>, AlignmentError> {
    let dims: HashMap<&str, (usize, usize)> =
        pairs.iter().map(|p| (p.pair_id.as_str(), (p.source_tokens.len(), p.target_tokens.len()))).collect();
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = index + 1;
        let (id, links) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        let &(n, m) = dims.get(id).ok_or_else(|| AlignmentError::Format {
            line: lineno,
            message: format!("no parallel pair with id {id:?}"),
        })?;
        let set = AlignmentSet::parse(n, m, links).map_err(|e| match e {
            AlignmentError::Format { message, .. } => AlignmentError::Format { line: lineno, message },
            other => other,
        })?;
        out.push((id.to_owned(), set));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_corpus() -> Vec<ParallelPair> {
        vec![ParallelPair::new("1", "the house", "la casa"), ParallelPair::new("2", "the", "la")]
    }

    fn flat() -> AlignmentConfig {
        AlignmentConfig { diagonal_tension: 0.0, ..AlignmentConfig::default() }
    }

    fn set(n: usize, m: usize, links: &[(usize, usize)]) -> AlignmentSet {
        AlignmentSet::new(n, m, links.iter().copied()).unwrap()
    }

    #[test]
    fn toy_corpus_learns_translations() {
        let table = train_translation_table(&toy_corpus(), &flat()).unwrap();
        assert_eq!(table.best_translation(Some("the")).unwrap().0, "la");
        assert_eq!(table.best_translation(Some("house")).unwrap().0, "casa");
    }

    #[test]
    fn single_pair_without_null() {
        let config = AlignmentConfig { null_prob: 0.0, ..flat() };
        let table = train_translation_table(&[ParallelPair::new("1", "a", "b")], &config).unwrap();
        assert_eq!(table.prob(Some("a"), "b"), 1.0);
    }

    #[test]
    fn rows_sum_to_one() {
        let corpus = vec![
            ParallelPair::new("1", "show me the weather", "dime el clima"),
            ParallelPair::new("2", "the weather tomorrow", "el clima mañana"),
            ParallelPair::new("3", "open maps", "abre maps"),
        ];
        for iterations in 1..6 {
            let config = AlignmentConfig { em_iterations: iterations, ..AlignmentConfig::default() };
            let table = train_translation_table(&corpus, &config).unwrap();
            for (word, sum) in table.row_sums() {
                assert!((sum - 1.0).abs() < 1e-6, "{word}: {sum}");
            }
        }
    }

    #[test]
    fn likelihood_never_decreases() {
        let config = AlignmentConfig { em_iterations: 10, ..flat() };
        let table = train_translation_table(&toy_corpus(), &config).unwrap();
        let ll = table.log_likelihood_history();
        assert_eq!(ll.len(), 11);
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{ll:?}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(train_translation_table(&[], &flat()), Err(AlignmentError::EmptyCorpus)));
        let bad = AlignmentConfig { null_prob: 1.0, ..flat() };
        assert!(train_translation_table(&toy_corpus(), &bad).is_err());
        let empty_side = ParallelPair::new("x", "", "la");
        assert!(matches!(train_translation_table(&[empty_side], &flat()), Err(AlignmentError::EmptySide(_))));
    }

    #[test]
    fn asymmetric_alignment() {
        let config = flat();
        let table = train_translation_table(&toy_corpus(), &config).unwrap();
        let links = align_asymmetric(&toy_corpus()[0], &table, &config);
        assert_eq!(links, set(2, 2, &[(0, 0), (1, 1)]));

        let single = ParallelPair::new("s", "hola", "hola");
        let table = train_translation_table(std::slice::from_ref(&single), &config).unwrap();
        assert_eq!(align_asymmetric(&single, &table, &config), set(1, 1, &[(0, 0)]));
    }

    #[test]
    fn null_wins_with_high_null_prob() {
        let config = AlignmentConfig { null_prob: 0.9, ..flat() };
        let pair = ParallelPair::new("1", "a b", "x");
        let table = train_translation_table(std::slice::from_ref(&pair), &config).unwrap();
        // every row is uniform over the single target, so prior mass decides:
        // NULL 0.9 vs 0.05 per source position
        assert!(align_asymmetric(&pair, &table, &config).is_empty());
    }

    #[test]
    fn diagonal_prior_prefers_diagonal() {
        let config = AlignmentConfig::default();
        let prior = position_prior(0, 3, 3, &config);
        assert!(prior[0] > prior[1] && prior[1] > prior[2]);
        assert!((prior.iter().sum::<f64>() - (1.0 - config.null_prob)).abs() < 1e-12);
        let flat_prior = position_prior(0, 4, 2, &flat());
        assert!(flat_prior.iter().all(|&p| (p - 0.92 / 4.0).abs() < 1e-12));
    }

    #[test]
    fn gdfa_hand_cases() {
        let a = set(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(symmetrize_gdfa(&a, &a).unwrap(), a);

        let fwd = set(2, 3, &[(0, 0), (1, 1)]);
        let rev = set(2, 3, &[(0, 0), (1, 2)]);
        assert_eq!(symmetrize_gdfa(&fwd, &rev).unwrap(), set(2, 3, &[(0, 0), (1, 1), (1, 2)]));

        let fwd = set(3, 3, &[(0, 0)]);
        let rev = set(3, 3, &[(2, 2)]);
        assert_eq!(symmetrize_gdfa(&fwd, &rev).unwrap(), set(3, 3, &[(0, 0), (2, 2)]));

        assert!(matches!(
            symmetrize_gdfa(&set(2, 2, &[]), &set(2, 3, &[])),
            Err(AlignmentError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn attention_argmax() {
        let m = AttentionMatrix { pair_id: "p".into(), scores: vec![vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]] };
        m.check(2, 3).unwrap();
        assert_eq!(attention_align(&m, &[0, 1].into()).unwrap(), set(2, 3, &[(0, 1), (1, 2)]));
        assert!(attention_align(&m, &BTreeSet::new()).unwrap().is_empty());
        let flat = AttentionMatrix { pair_id: "q".into(), scores: vec![vec![0.5, 0.5, 0.5]] };
        assert_eq!(attention_align(&flat, &[0].into()).unwrap(), set(1, 3, &[(0, 0)]));
        assert!(matches!(attention_align(&m, &[5].into()), Err(AlignmentError::IndexOutOfRange { index: 5, .. })));
        assert!(m.check(3, 3).is_err());
    }

    #[test]
    fn alignment_file_round_trip() {
        let pairs = toy_corpus();
        let rows = vec![("1".to_owned(), set(2, 2, &[(0, 0), (1, 1)])), ("2".to_owned(), set(1, 1, &[]))];
        let mut buf = Vec::new();
        write_alignments(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "1\t0-0 1-1\n2\t\n");
        assert_eq!(read_alignments(buf.as_slice(), &pairs).unwrap(), rows);
        assert!(read_alignments("1\t0-5\n".as_bytes(), &pairs).is_err());
    }

    #[test]
    fn parallel_file_round_trip() {
        let mut buf = Vec::new();
        write_parallel(&mut buf, &toy_corpus()).unwrap();
        assert_eq!(read_parallel(buf.as_slice()).unwrap(), toy_corpus());
    }

    fn arb_links(n: usize, m: usize) -> impl Strategy<Value = AlignmentSet> {
        prop::collection::btree_set((0..n, 0..m), 0..=n * m)
            .prop_map(move |links| AlignmentSet::new(n, m, links).unwrap())
    }

    fn arb_pair() -> impl Strategy<Value = (AlignmentSet, AlignmentSet)> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| (arb_links(n, m), arb_links(n, m)))
    }

    proptest! {
        #[test]
        fn gdfa_between_intersection_and_union((fwd, rev) in arb_pair()) {
            let out = symmetrize_gdfa(&fwd, &rev).unwrap();
            for link in fwd.links().intersection(rev.links()) {
                prop_assert!(out.links().contains(link));
            }
            for link in out.links() {
                prop_assert!(fwd.links().contains(link) || rev.links().contains(link));
            }
        }

        #[test]
        fn gdfa_symmetric_under_transpose((fwd, rev) in arb_pair()) {
            let out = symmetrize_gdfa(&fwd, &rev).unwrap();
            let swapped = symmetrize_gdfa(&rev.transpose(), &fwd.transpose()).unwrap();
            prop_assert_eq!(swapped, out.transpose());
        }

        #[test]
        fn attention_emits_one_link_per_index(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..6),
            pick in prop::collection::btree_set(0usize..6, 0..6),
        ) {
            let n = rows.len();
            let indices: BTreeSet<usize> = pick.into_iter().filter(|&i| i < n).collect();
            let m = AttentionMatrix { pair_id: "x".into(), scores: rows };
            prop_assert_eq!(attention_align(&m, &indices).unwrap().len(), indices.len());
        }
    }
}
