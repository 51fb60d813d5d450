//! Token and utterance feature extraction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ParserError;

pub const BIAS: &str = "bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub use_word_identity: bool,
    /// Inclusive `[min, max]` character n-gram lengths.
    pub char_ngram_range: Option<[usize; 2]>,
    pub embedding_file: Option<PathBuf>,
    pub freeze_embeddings: bool,
    pub context_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            use_word_identity: true,
            char_ngram_range: Some([3, 4]),
            embedding_file: None,
            freeze_embeddings: true,
            context_window: 1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), ParserError> {
        self.validate_with(self.embedding_file.is_some())
    }

    fn validate_with(&self, has_embeddings: bool) -> Result<(), ParserError> {
        if !self.use_word_identity && self.char_ngram_range.is_none() && !has_embeddings {
            return Err(ParserError::InvalidConfig("no token representation enabled".into()));
        }
        if let Some([lo, hi]) = self.char_ngram_range {
            if lo == 0 || lo > hi {
                return Err(ParserError::InvalidConfig(format!("bad char_ngram_range [{lo}, {hi}]")));
            }
        }
        if self.embedding_file.is_some() && !self.freeze_embeddings {
            return Err(ParserError::InvalidConfig("only frozen embeddings are supported".into()));
        }
        Ok(())
    }
}

/// Pretrained vectors in the text format: a `<count> <dim>` header, then one
/// `<word> <floats>` line per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl Embeddings {
    pub fn parse(text: &str) -> Result<Self, ParserError> {
        let malformed =
            |line: usize, message: &str| ParserError::MalformedEmbeddingLine { line, message: message.into() };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| malformed(1, "missing header"))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(1, "header must be \"<count> <dim>\""))?;
        let [count, dim] = head[..] else {
            return Err(malformed(1, "header must be \"<count> <dim>\""));
        };
        let mut vectors = HashMap::with_capacity(count);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-blank line");
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| malformed(i + 1, "non-numeric component"))?;
            if v.len() != dim {
                return Err(malformed(i + 1, &format!("expected {dim} components, found {}", v.len())));
            }
            vectors.entry(word.to_owned()).or_insert(v);
        }
        if vectors.len() != count {
            log::warn!("embedding header announces {count} vectors, file has {}", vectors.len());
        }
        Ok(Embeddings { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self, ParserError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ParserError::EmbeddingFileMissing(path.to_path_buf()),
            _ => ParserError::Io(e),
        })?;
        Self::parse(&text)
    }

    /// Exact match first, then lowercase.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).or_else(|| self.vectors.get(&word.to_lowercase())).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Character n-grams of `word` padded with `<` and `>`.
pub fn char_ngrams(word: &str, lo: usize, hi: usize) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('<').chain(word.chars()).chain(std::iter::once('>')).collect();
    let mut out = Vec::new();
    for len in lo..=hi {
        for w in chars.windows(len) {
            out.push(w.iter().collect());
        }
    }
    out
}

pub type FeatureVec = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub tokens: Vec<FeatureVec>,
    pub utterance: FeatureVec,
}

#[derive(Debug, Clone)]
pub struct Featurizer {
    config: FeatureConfig,
    embeddings: Option<Embeddings>,
}

impl Featurizer {
    pub fn new(config: FeatureConfig) -> Result<Self, ParserError> {
        config.validate()?;
        let embeddings = config.embedding_file.as_deref().map(Embeddings::load).transpose()?;
        Ok(Featurizer { config, embeddings })
    }

    pub fn with_embeddings(config: FeatureConfig, embeddings: Embeddings) -> Result<Self, ParserError> {
        config.validate_with(true)?;
        Ok(Featurizer { config, embeddings: Some(embeddings) })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    fn token_own(&self, word: &str, offset: isize, out: &mut FeatureVec) {
        let lower = word.to_lowercase();
        if self.config.use_word_identity {
            out.push((format!("w{offset}={lower}"), 1.0));
        }
        if let Some([lo, hi]) = self.config.char_ngram_range {
            for g in char_ngrams(&lower, lo, hi) {
                out.push((format!("c{offset}={g}"), 1.0));
            }
        }
        if let Some(emb) = &self.embeddings {
            // Out-of-vocabulary words contribute the zero vector.
            if let Some(v) = emb.get(word) {
                for (d, &x) in v.iter().enumerate() {
                    if x != 0.0 {
                        out.push((format!("e{offset}:{d}"), x));
                    }
                }
            }
        }
    }

    pub fn featurize(&self, tokens: &[String]) -> Featurized {
        let w = self.config.context_window as isize;
        let n = tokens.len() as isize;
        let per_token: Vec<FeatureVec> = (0..n)
            .map(|t| {
                let mut f = vec![(BIAS.to_owned(), 1.0)];
                for o in -w..=w {
                    let p = t + o;
                    if (0..n).contains(&p) {
                        self.token_own(&tokens[p as usize], o, &mut f);
                    } else if self.config.use_word_identity {
                        let pad = if p < 0 { "<s>" } else { "</s>" };
                        f.push((format!("w{o}={pad}"), 1.0));
                    }
                }
                f
            })
            .collect();

        let mut sum: BTreeMap<&str, f64> = BTreeMap::new();
        for f in &per_token {
            for (name, v) in f {
                *sum.entry(name).or_insert(0.0) += v;
            }
        }
        let utterance = sum.into_iter().map(|(k, v)| (k.to_owned(), v / n.max(1) as f64)).collect();
        Featurized { tokens: per_token, utterance }
    }
}
