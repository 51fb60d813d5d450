use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use csparse::alignment::{align_corpus, attention_align, read_alignments, write_alignments, AlignmentSet};
use csparse::dataset::{dataset_stats, language_ratio, sample_fewshot, Dataset, DomainStats, Split, VocabRankTable};
use csparse::eval::{correctness, evaluate_run, paired_permutation_test, read_predictions, EvalError};
use csparse::matchfilter::{
    build_parallel_corpus, filter_candidates, generate_candidates, parallel_sources, read_jsonl, skeleton_index,
    write_jsonl, GenCandidate, ParallelExample,
};
use csparse::parser::{predict_parse, train_joint_model, JointModel};
use csparse::pipeline::{
    load_attention, load_jsonl_dataset, load_pairs, run_augment_pipeline, stage_seed, FailureKind, PipelineConfig,
    PipelineError, StageContext,
};
use csparse::projection::{project_annotations, write_rejections, ProjectionStatus, Rejection};

/// Code-switched semantic parsing data toolkit.
#[derive(Parser)]
#[command(name = "csparse", version)]
struct Cli {
    /// TOML config supplying module settings and the global seed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-domain intent, slot and utterance counts.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Rank-ordered vocabularies for a token language ratio (a over b).
        #[arg(long, requires = "vocab_b")]
        vocab_a: Option<PathBuf>,
        #[arg(long, requires = "vocab_a")]
        vocab_b: Option<PathBuf>,
    },
    /// Draw a label-covering few-shot sample.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Word-align translated pairs.
    Align {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use attention argmax over slot tokens instead of EM alignment.
        #[arg(long, requires = "annotations")]
        attention: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Project source annotations through alignments.
    Project {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        alignments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejections: Option<PathBuf>,
    },
    /// Pair seeds with their nearest same-skeleton pool neighbors.
    Match {
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate candidates from a parallel corpus.
    Generate {
        #[arg(long)]
        parallel: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Filter generated candidates.
    Filter {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drops: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the configured augmentation pipelines end to end.
    Augment,
    /// Train the joint intent and slot model.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Parse utterances with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired permutation test between two prediction files.
    Significance {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred_a: PathBuf,
        #[arg(long)]
        pred_b: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        permutations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type Result<T> = std::result::Result<T, PipelineError>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).stage("write")?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::data("write", format!("{}: {e}", path.display())))
}

fn json_out<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, rows).expect("in-memory write");
    buf
}

fn read_text(path: &Path, stage: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))
}

fn eval_error(stage: &str, e: EvalError) -> PipelineError {
    PipelineError::data(stage, e)
}

#[derive(Serialize)]
struct StatsReport {
    files: BTreeMap<String, usize>,
    total: usize,
    domains: BTreeMap<String, DomainStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    language_ratio: Option<RatioSummary>,
}

#[derive(Serialize)]
struct RatioSummary {
    a_tokens: usize,
    b_tokens: usize,
    ties: usize,
    unknown: usize,
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct SignificanceReport {
    n: usize,
    accuracy_a: f64,
    accuracy_b: f64,
    permutations: usize,
    seed: u64,
    p_value: f64,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match cli.command {
        Command::Stats { inputs, vocab_a, vocab_b } => {
            let stage = "stats";
            let mut files = BTreeMap::new();
            let mut parts = Vec::new();
            for path in &inputs {
                let ds = load_jsonl_dataset(path, stage)?;
                files.insert(path.display().to_string(), ds.len());
                parts.push(ds);
            }
            let all = Dataset { examples: parts.into_iter().flat_map(|d| d.examples).collect(), split: Split::Unsplit };
            let language_ratio = match (vocab_a, vocab_b) {
                (Some(a), Some(b)) => {
                    let a = VocabRankTable::load(&a).stage(stage)?;
                    let b = VocabRankTable::load(&b).stage(stage)?;
                    let r = language_ratio(&all, &a, &b).stage(stage)?;
                    Some(RatioSummary {
                        a_tokens: r.a_tokens,
                        b_tokens: r.b_tokens,
                        ties: r.ties,
                        unknown: r.unknown,
                        ratio: r.ratio,
                    })
                }
                _ => None,
            };
            let report = StatsReport { files, total: all.len(), domains: dataset_stats(&all), language_ratio };
            json_out(&report, None)
        }

        Command::Sample { input, n, out } => {
            let ds = load_jsonl_dataset(&input, "sample")?;
            let sample = sample_fewshot(&ds, n, stage_seed(config.seed, "sample")).stage("sample")?;
            write_file(&out, sample.to_jsonl_string().as_bytes())
        }

        Command::Align { pairs, out, attention, annotations } => {
            let stage = "align";
            let pairs = load_pairs(&pairs, stage)?;
            let sets: Vec<AlignmentSet> = match (attention, annotations) {
                (Some(att), Some(ann)) => {
                    let annotations = load_jsonl_dataset(&ann, stage)?;
                    let matrices = load_attention(&att, stage)?;
                    let by_id: BTreeMap<&str, _> = matrices.iter().map(|m| (m.pair_id.as_str(), m)).collect();
                    pairs
                        .iter()
                        .map(|p| {
                            let missing =
                                |what: &str| PipelineError::data(stage, format!("no {what} for pair {:?}", p.pair_id));
                            let m = by_id.get(p.pair_id.as_str()).ok_or_else(|| missing("attention matrix"))?;
                            let ex = annotations.get(&p.pair_id).ok_or_else(|| missing("annotation"))?;
                            m.check(p.source_tokens.len(), p.target_tokens.len()).stage(stage)?;
                            let rows = ex.parse.slots.iter().flat_map(|s| s.start..s.end).collect();
                            attention_align(m, &rows).stage(stage)
                        })
                        .collect::<Result<_>>()?
                }
                _ => align_corpus(&pairs, &config.alignment).stage(stage)?,
            };
            let rows: Vec<(String, AlignmentSet)> = pairs.iter().map(|p| p.pair_id.clone()).zip(sets).collect();
            let mut buf = Vec::new();
            write_alignments(&mut buf, &rows).stage(stage)?;
            write_file(&out, &buf)
        }

        Command::Project { annotations, pairs, alignments, out, rejections } => {
            let stage = "project";
            let annotations = load_jsonl_dataset(&annotations, stage)?;
            let pairs = load_pairs(&pairs, stage)?;
            let f = fs::File::open(&alignments)
                .map_err(|e| PipelineError::data(stage, format!("{}: {e}", alignments.display())))?;
            let links: BTreeMap<String, AlignmentSet> =
                read_alignments(BufReader::new(f), &pairs).stage(stage)?.into_iter().collect();
            let mut projected = Vec::new();
            let mut rejected = Vec::new();
            for pair in &pairs {
                let missing = |what: &str| PipelineError::data(stage, format!("no {what} for pair {:?}", pair.pair_id));
                let ex = annotations.get(&pair.pair_id).ok_or_else(|| missing("annotation"))?;
                let set = links.get(&pair.pair_id).ok_or_else(|| missing("alignment"))?;
                let outcome =
                    project_annotations(ex, &pair.target_tokens, set).map_err(|e| PipelineError::data(stage, e))?;
                match outcome.status {
                    ProjectionStatus::Projected => projected.push(outcome.example.expect("projected")),
                    ProjectionStatus::Rejected(r) => {
                        rejected.push(Rejection { id: pair.pair_id.clone(), reason: r.to_string() })
                    }
                }
            }
            let ds = Dataset::new(projected, Split::Train).stage(stage)?;
            write_file(&out, ds.to_jsonl_string().as_bytes())?;
            if let Some(path) = rejections {
                let mut buf = Vec::new();
                write_rejections(&mut buf, &rejected).stage(stage)?;
                write_file(&path, &buf)?;
            }
            eprintln!("projected {}, rejected {}", ds.len(), rejected.len());
            Ok(())
        }

        Command::Match { seeds, pool, out, k } => {
            let stage = "match";
            if let Some(k) = k {
                config.matching.k = k;
            }
            config.matching.validate().stage(stage)?;
            let seeds = load_jsonl_dataset(&seeds, stage)?;
            let pool = load_jsonl_dataset(&pool, stage)?;
            let pairs = build_parallel_corpus(&seeds, &pool, &config.matching);
            write_file(&out, &jsonl_bytes(&pairs))
        }

        Command::Generate { parallel, pool, out, beam } => {
            let stage = "generate";
            if let Some(beam) = beam {
                config.generation.beam_size = beam;
            }
            let parallel: Vec<ParallelExample> = read_jsonl(&read_text(&parallel, stage)?).stage(stage)?;
            let pool = load_jsonl_dataset(&pool, stage)?;
            let sources = parallel_sources(&parallel, &pool);
            let cands = generate_candidates(&sources, &parallel, &config.generation).stage(stage)?;
            write_file(&out, &jsonl_bytes(&cands))
        }

        Command::Filter { candidates, seeds, pool, out, drops, report } => {
            let stage = "filter";
            let cands: Vec<GenCandidate> = read_jsonl(&read_text(&candidates, stage)?).stage(stage)?;
            let seeds = load_jsonl_dataset(&seeds, stage)?;
            let pool = load_jsonl_dataset(&pool, stage)?;
            let outcome = filter_candidates(&cands, &seeds, &skeleton_index(&pool)).stage(stage)?;
            write_file(&out, outcome.kept.to_jsonl_string().as_bytes())?;
            if let Some(path) = drops {
                write_file(&path, &jsonl_bytes(&outcome.drops()))?;
            }
            json_out(&outcome.report, report.as_deref())
        }

        Command::Augment => {
            if cli.config.is_none() {
                return Err(PipelineError::config("augment", "--config is required"));
            }
            let manifest = run_augment_pipeline(&config)?;
            eprintln!("wrote {} artifacts to {}", manifest.artifacts.len(), config.output_dir.display());
            Ok(())
        }

        Command::Train { train, dev, out, epochs } => {
            let stage = "train";
            if let Some(e) = epochs {
                config.training.epochs = e;
            }
            config.training.seed = stage_seed(config.seed, "train");
            let train = load_jsonl_dataset(&train, stage)?;
            let dev = match dev {
                Some(p) => load_jsonl_dataset(&p, stage)?,
                None => Dataset::default(),
            };
            let outcome = train_joint_model(&train, &dev, &config.features, &config.training).stage(stage)?;
            outcome.model.save(&out).stage(stage)?;
            eprintln!(
                "trained {} epochs, best epoch {}, final loss {:.4}",
                outcome.report.epoch_losses.len(),
                outcome.report.best_epoch,
                outcome.report.epoch_losses.last().copied().unwrap_or_default()
            );
            Ok(())
        }

        Command::Predict { model, input, out } => {
            let stage = "predict";
            let model = JointModel::load(&model).stage(stage)?;
            let input = load_jsonl_dataset(&input, stage)?;
            let examples = input
                .iter()
                .map(|ex| {
                    let mut p = ex.clone();
                    p.parse = predict_parse(&model, &ex.utterance);
                    p.provenance = None;
                    p
                })
                .collect();
            let ds = Dataset::new(examples, input.split).stage(stage)?;
            write_file(&out, ds.to_jsonl_string().as_bytes())
        }

        Command::Evaluate { gold, pred, out } => {
            let run = evaluate_run(&gold, &pred).map_err(|e| eval_error("evaluate", e))?;
            json_out(&run, out.as_deref())
        }

        Command::Significance { gold, pred_a, pred_b, permutations, out } => {
            let stage = "significance";
            let gold = load_jsonl_dataset(&gold, stage)?;
            let vector = |path: &Path| -> Result<Vec<bool>> {
                let preds = read_predictions(&read_text(path, stage)?).map_err(|e| eval_error(stage, e))?;
                let parses: Vec<_> = preds.into_iter().map(|(_, p)| p).collect();
                correctness(&gold, &parses).map_err(|e| eval_error(stage, e))
            };
            let (a, b) = (vector(&pred_a)?, vector(&pred_b)?);
            let seed = stage_seed(config.seed, "significance");
            let p_value = paired_permutation_test(&a, &b, permutations, seed).map_err(|e| match e {
                EvalError::TooFewPermutations(_) => PipelineError::config(stage, e),
                e => eval_error(stage, e),
            })?;
            let acc =
                |v: &[bool]| if v.is_empty() { 0.0 } else { v.iter().filter(|&&c| c).count() as f64 / v.len() as f64 };
            let report = SignificanceReport {
                n: a.len(),
                accuracy_a: acc(&a),
                accuracy_b: acc(&b),
                permutations,
                seed,
                p_value,
            };
            json_out(&report, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind {
                FailureKind::Data => 1,
                FailureKind::Config => 2,
                FailureKind::Generator => 3,
            })
        }
    }
}
