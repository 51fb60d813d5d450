//! End-to-end augmentation runs driven by one TOML config.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    align_corpus, attention_align, read_attention, read_parallel, write_alignments, AlignmentConfig, AlignmentError,
    AlignmentSet, AttentionMatrix, ParallelPair,
};
use crate::dataset::{load_dataset, sample_fewshot, Dataset, DatasetError, Format, Split};
use crate::matchfilter::{
    build_parallel_corpus, filter_candidates, generate_candidates, parallel_sources, skeleton_index, write_jsonl,
    FilterOutcome, GenCandidate, GenerationConfig, MatchConfig, MatchFilterError, ParallelExample,
};
use crate::parser::{FeatureConfig, ParserError, TrainConfig};
use crate::projection::{project_annotations, ProjectionStatus, Rejection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Data,
    Config,
    Generator,
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

impl PipelineError {
    pub fn new(stage: &str, kind: FailureKind, message: impl fmt::Display) -> Self {
        PipelineError { stage: stage.into(), kind, message: message.to_string() }
    }

    pub fn config(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(stage, FailureKind::Config, message)
    }

    pub fn data(stage: &str, message: impl fmt::Display) -> Self {
        Self::new(stage, FailureKind::Data, message)
    }
}

/// Attaches a stage name and failure class to module errors.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T, PipelineError>;
}

impl<T> StageContext<T> for Result<T, MatchFilterError> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| {
            let kind = match e {
                MatchFilterError::GeneratorFailure(_) => FailureKind::Generator,
                MatchFilterError::InvalidConfig(_) => FailureKind::Config,
                _ => FailureKind::Data,
            };
            PipelineError::new(stage, kind, e)
        })
    }
}

impl<T> StageContext<T> for Result<T, AlignmentError> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| {
            let kind = match e {
                AlignmentError::InvalidConfig(_) => FailureKind::Config,
                _ => FailureKind::Data,
            };
            PipelineError::new(stage, kind, e)
        })
    }
}

impl<T> StageContext<T> for Result<T, DatasetError> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::data(stage, e))
    }
}

impl<T> StageContext<T> for Result<T, ParserError> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| {
            let kind = match e {
                ParserError::InvalidConfig(_)
                | ParserError::EmbeddingFileMissing(_)
                | ParserError::MalformedEmbeddingLine { .. } => FailureKind::Config,
                _ => FailureKind::Data,
            };
            PipelineError::new(stage, kind, e)
        })
    }
}

impl<T> StageContext<T> for Result<T, std::io::Error> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::data(stage, e))
    }
}

/// Derives a stage seed from the global seed and a fixed stage label.
pub fn stage_seed(global: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{global}:{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Code-switched seeds; enables match-and-filter.
    pub seeds_path: Option<PathBuf>,
    /// Draw this many seeds from `seeds_path` instead of using all of it.
    pub seed_sample_size: Option<usize>,
    /// Annotated source-language examples: the neighbor pool, and the
    /// annotations projected by translate-and-align (looked up by pair id).
    pub en_pool_path: Option<PathBuf>,
    /// Translated pairs; enables translate-and-align.
    pub parallel_path: Option<PathBuf>,
    pub attention_path: Option<PathBuf>,
    pub matching: MatchConfig,
    pub generation: GenerationConfig,
    pub alignment: AlignmentConfig,
    pub training: TrainConfig,
    pub features: FeatureConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: "out".into(),
            seeds_path: None,
            seed_sample_size: None,
            en_pool_path: None,
            parallel_path: None,
            attention_path: None,
            matching: MatchConfig::default(),
            generation: GenerationConfig::default(),
            alignment: AlignmentConfig::default(),
            training: TrainConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::config("config", e))
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.seeds_path, &mut self.en_pool_path, &mut self.parallel_path, &mut self.attention_path]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(p) = self.features.embedding_file.as_mut() {
            fix(p);
        }
        let work_dir = &mut self.generation.generator.work_dir;
        if work_dir.is_relative() {
            *work_dir = self.output_dir.join(&*work_dir);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let stage = "config";
        self.matching.validate().stage(stage)?;
        self.generation.validate().stage(stage)?;
        self.alignment.validate().stage(stage)?;
        self.training.validate().stage(stage)?;
        self.features.validate().stage(stage)?;
        if self.seeds_path.is_none() && self.parallel_path.is_none() {
            return Err(PipelineError::config(stage, "set seeds_path, parallel_path, or both"));
        }
        if self.en_pool_path.is_none() {
            return Err(PipelineError::config(stage, "en_pool_path is required"));
        }
        if self.attention_path.is_some() && self.parallel_path.is_none() {
            return Err(PipelineError::config(stage, "attention_path needs parallel_path"));
        }
        if self.seed_sample_size.is_some() && self.seeds_path.is_none() {
            return Err(PipelineError::config(stage, "seed_sample_size needs seeds_path"));
        }
        for p in [&self.seeds_path, &self.en_pool_path, &self.parallel_path, &self.attention_path].into_iter().flatten()
        {
            if !p.exists() {
                return Err(PipelineError::config(stage, format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(toml::to_string(self).expect("config serializes").as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub lines: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<String>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    /// Writes `bytes` to `dir/name` and records its checksum and line count.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        fs::write(dir.join(name), bytes).stage("write")?;
        self.artifacts.insert(
            name.to_owned(),
            ArtifactEntry { sha256: hex(&Sha256::digest(bytes)), lines: bytecount_lines(bytes) },
        );
        Ok(())
    }
}

fn bytecount_lines(bytes: &[u8]) -> usize {
    bytes.iter().filter(|&&b| b == b'\n').count()
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, rows).expect("in-memory write");
    buf
}

#[derive(Debug, Clone)]
pub struct TranslateOutput {
    pub alignments: Vec<(String, AlignmentSet)>,
    pub projected: Dataset,
    pub rejections: Vec<Rejection>,
    pub fragments_created: usize,
}

/// Aligns translated pairs and projects each source annotation. With
/// attention matrices the alignment is their per-row argmax over slot tokens;
/// otherwise it is the symmetrized EM alignment.
pub fn translate_and_align(
    pairs: &[ParallelPair],
    sources: &Dataset,
    attention: Option<&[AttentionMatrix]>,
    config: &AlignmentConfig,
) -> Result<TranslateOutput, PipelineError> {
    let stage = "translate_align";
    let mut annotated = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let ex = sources
            .get(&pair.pair_id)
            .ok_or_else(|| PipelineError::data(stage, format!("no annotation for pair {:?}", pair.pair_id)))?;
        if ex.utterance.tokens != pair.source_tokens {
            return Err(PipelineError::data(
                stage,
                format!("pair {:?} source tokens differ from its annotation", pair.pair_id),
            ));
        }
        annotated.push(ex);
    }

    let sets: Vec<AlignmentSet> = match attention {
        None => align_corpus(pairs, config).stage(stage)?,
        Some(matrices) => {
            let by_id: HashMap<&str, &AttentionMatrix> = matrices.iter().map(|m| (m.pair_id.as_str(), m)).collect();
            pairs
                .iter()
                .zip(&annotated)
                .map(|(pair, ex)| {
                    let m = by_id.get(pair.pair_id.as_str()).ok_or_else(|| {
                        PipelineError::data(stage, format!("no attention matrix for pair {:?}", pair.pair_id))
                    })?;
                    m.check(pair.source_tokens.len(), pair.target_tokens.len()).stage(stage)?;
                    let rows: BTreeSet<usize> = ex.parse.slots.iter().flat_map(|s| s.start..s.end).collect();
                    attention_align(m, &rows).stage(stage)
                })
                .collect::<Result<_, _>>()?
        }
    };

    let mut projected = Vec::new();
    let mut rejections = Vec::new();
    let mut fragments_created = 0;
    for ((pair, ex), set) in pairs.iter().zip(&annotated).zip(&sets) {
        let outcome = project_annotations(ex, &pair.target_tokens, set).map_err(|e| PipelineError::data(stage, e))?;
        fragments_created += outcome.fragments_created;
        match outcome.status {
            ProjectionStatus::Projected => projected.push(outcome.example.expect("projected example")),
            ProjectionStatus::Rejected(reason) => {
                rejections.push(Rejection { id: pair.pair_id.clone(), reason: reason.to_string() })
            }
        }
    }
    let alignments = pairs.iter().map(|p| p.pair_id.clone()).zip(sets).collect();
    Ok(TranslateOutput {
        alignments,
        projected: Dataset::new(projected, Split::Train).stage(stage)?,
        rejections,
        fragments_created,
    })
}

#[derive(Debug, Clone)]
pub struct MatchFilterOutput {
    pub parallel: Vec<ParallelExample>,
    pub candidates: Vec<GenCandidate>,
    pub outcome: FilterOutcome,
}

pub fn match_and_filter(
    seeds: &Dataset,
    pool: &Dataset,
    matching: &MatchConfig,
    generation: &GenerationConfig,
) -> Result<MatchFilterOutput, PipelineError> {
    matching.validate().stage("match")?;
    let parallel = build_parallel_corpus(seeds, pool, matching);
    let sources = parallel_sources(&parallel, pool);
    let candidates = if sources.is_empty() {
        Vec::new()
    } else {
        generate_candidates(&sources, &parallel, generation).stage("generate")?
    };
    let outcome = filter_candidates(&candidates, seeds, &skeleton_index(pool)).stage("filter")?;
    Ok(MatchFilterOutput { parallel, candidates, outcome })
}

pub fn load_jsonl_dataset(path: &Path, stage: &str) -> Result<Dataset, PipelineError> {
    load_dataset(path, Format::from_path(path))
        .map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))
}

pub fn load_pairs(path: &Path, stage: &str) -> Result<Vec<ParallelPair>, PipelineError> {
    let f = fs::File::open(path).map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))?;
    read_parallel(BufReader::new(f)).stage(stage)
}

pub fn load_attention(path: &Path, stage: &str) -> Result<Vec<AttentionMatrix>, PipelineError> {
    let f = fs::File::open(path).map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))?;
    read_attention(BufReader::new(f)).stage(stage)
}

/// Runs every enabled pipeline, writing intermediate artifacts and a
/// manifest under `output_dir`.
pub fn run_augment_pipeline(config: &PipelineConfig) -> Result<Manifest, PipelineError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::config("config", format!("{}: {e}", out.display())))?;
    let mut manifest = Manifest { config_sha256: config.digest(), seed: config.seed, ..Manifest::default() };
    let pool = load_jsonl_dataset(config.en_pool_path.as_deref().expect("validated"), "load")?;
    let mut parts: Vec<Dataset> = Vec::new();

    if let Some(path) = &config.parallel_path {
        let stage = "translate_align";
        let pairs = load_pairs(path, stage)?;
        let attention = config.attention_path.as_deref().map(|p| load_attention(p, stage)).transpose()?;
        let ta = translate_and_align(&pairs, &pool, attention.as_deref(), &config.alignment)?;
        let mut buf = Vec::new();
        write_alignments(&mut buf, &ta.alignments).stage(stage)?;
        manifest.write(out, "ta_alignments.txt", &buf)?;
        manifest.write(out, "ta_projected.jsonl", ta.projected.to_jsonl_string().as_bytes())?;
        manifest.write(out, "ta_rejections.jsonl", &jsonl(&ta.rejections))?;
        manifest.stages.push(stage.into());
        parts.push(ta.projected);
    }

    if let Some(path) = &config.seeds_path {
        let stage = "match_filter";
        let all = load_jsonl_dataset(path, stage)?;
        let seeds = match config.seed_sample_size {
            Some(n) => sample_fewshot(&all, n, stage_seed(config.seed, "sample")).stage("sample")?,
            None => all,
        };
        let mf = match_and_filter(&seeds, &pool, &config.matching, &config.generation)?;
        manifest.write(out, "mf_seeds.jsonl", seeds.to_jsonl_string().as_bytes())?;
        manifest.write(out, "mf_parallel.jsonl", &jsonl(&mf.parallel))?;
        manifest.write(out, "mf_candidates.jsonl", &jsonl(&mf.candidates))?;
        manifest.write(out, "mf_kept.jsonl", mf.outcome.kept.to_jsonl_string().as_bytes())?;
        manifest.write(out, "mf_drops.jsonl", &jsonl(&mf.outcome.drops()))?;
        let report = serde_json::to_string_pretty(&mf.outcome.report).expect("report serializes") + "\n";
        manifest.write(out, "mf_filter_report.json", report.as_bytes())?;
        manifest.stages.push(stage.into());
        parts.push(mf.outcome.kept);
    }

    let refs: Vec<&Dataset> = parts.iter().collect();
    let augmented = Dataset::concat(&refs).stage("emit")?;
    manifest.write(out, "augmented.jsonl", augmented.to_jsonl_string().as_bytes())?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(out.join("manifest.json"), text).stage("write")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::write_parallel;
    use crate::dataset::Example;

    #[test]
    fn stage_seeds_differ_by_label() {
        assert_ne!(stage_seed(0, "sample"), stage_seed(0, "train"));
        assert_eq!(stage_seed(5, "sample"), stage_seed(5, "sample"));
    }

    #[test]
    fn config_round_trip_and_validation() {
        let text = "seed = 3\noutput_dir = \"o\"\n[matching]\nk = 4\n";
        let config = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(config.matching.k, 4);
        assert_eq!(config.generation.beam_size, 5);
        assert!(config.validate().is_err());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert_eq!(config.digest(), PipelineConfig::from_toml(text).unwrap().digest());
    }

    #[test]
    fn toy_translate_and_align() {
        let pairs = vec![ParallelPair::new("p0", "the house", "la casa"), ParallelPair::new("p1", "the", "la")];
        let sources = Dataset::new(
            vec![
                Example::from_seqlogical("p0", "d", "[IN:FIND [SL:PLACE the house ] ]").unwrap(),
                Example::from_seqlogical("p1", "d", "[IN:FIND [SL:PLACE the ] ]").unwrap(),
            ],
            Split::Unsplit,
        )
        .unwrap();
        let config = AlignmentConfig { diagonal_tension: 0.0, ..AlignmentConfig::default() };
        let out = translate_and_align(&pairs, &sources, None, &config).unwrap();
        assert_eq!(out.projected.len(), 2);
        assert!(out.rejections.is_empty());
        assert_eq!(out.projected.examples[0].seqlogical(), "[IN:FIND [SL:PLACE la casa ] ]");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let corpus =
            crate::synth::generate_corpus(9, crate::synth::SynthSizes { train: 60, valid: 0, test: 0, en_pool: 120 });
        corpus.train.save(dir.path().join("seeds.jsonl")).unwrap();
        corpus.en_pool.save(dir.path().join("pool.jsonl")).unwrap();
        let pairs: Vec<ParallelPair> = corpus
            .en_pool
            .iter()
            .take(5)
            .map(|e| ParallelPair::new(e.id.clone(), &e.utterance.text(), &e.utterance.text()))
            .collect();
        let mut buf = Vec::new();
        write_parallel(&mut buf, &pairs).unwrap();
        fs::write(dir.path().join("pairs.jsonl"), buf).unwrap();

        let run = |name: &str| {
            let text = format!(
                "seed = 1\noutput_dir = \"{name}\"\nseeds_path = \"seeds.jsonl\"\nseed_sample_size = 20\n\
                 en_pool_path = \"pool.jsonl\"\nparallel_path = \"pairs.jsonl\"\n"
            );
            fs::write(dir.path().join(format!("{name}.toml")), &text).unwrap();
            let config = PipelineConfig::load(&dir.path().join(format!("{name}.toml"))).unwrap();
            let manifest = run_augment_pipeline(&config).unwrap();
            (manifest, fs::read(dir.path().join(name).join("manifest.json")).unwrap())
        };
        let (a, a_bytes) = run("a");
        let (b, _) = run("b");
        assert_eq!(a.artifacts, b.artifacts);
        assert_eq!(a.stages, vec!["translate_align", "match_filter"]);
        for (name, entry) in &a.artifacts {
            let body = fs::read(dir.path().join("a").join(name)).unwrap();
            assert_eq!(entry.lines, bytecount_lines(&body));
        }
        let (_, again) = run("a");
        assert_eq!(a_bytes, again);
        assert!(a.artifacts["ta_projected.jsonl"].lines == 5);
        assert!(a.artifacts["mf_parallel.jsonl"].lines <= 20 * 10);
    }
}
