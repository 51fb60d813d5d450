//! Joint intent classifier and linear-chain CRF slot tagger.

pub mod crf;
pub mod features;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Example};
use crate::seqlogical::{BioTag, SemanticParse, Utterance};
use crf::{bio_masks, Lattice};
pub use features::{Embeddings, FeatureConfig, Featurizer};

pub const MODEL_FORMAT: &str = "csparse-joint-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding file {0} not found")]
    EmbeddingFileMissing(PathBuf),
    #[error("embedding file line {line}: {message}")]
    MalformedEmbeddingLine { line: usize, message: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("example {id:?}: {source}")]
    BadExample { id: String, source: crate::seqlogical::SeqlogicalError },
    #[error("not a model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 15, learning_rate: 0.1, l2: 1e-4, seed: 0, early_stop_patience: 4 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ParserError> {
        if self.epochs == 0 {
            return Err(ParserError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ParserError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(ParserError::InvalidConfig("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Serialized form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub format: String,
    pub version: u32,
    pub feature_config: FeatureConfig,
    pub intents: Vec<String>,
    pub tags: Vec<String>,
    pub features: Vec<String>,
    /// `features × intents`.
    pub intent_weights: Vec<f64>,
    /// `features × tags`.
    pub emission_weights: Vec<f64>,
    pub start_weights: Vec<f64>,
    /// `tags × tags`.
    pub transition_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub params: ModelParams,
    index: HashMap<String, usize>,
    bio: Vec<BioTag>,
    start_mask: Vec<f64>,
    trans_mask: Vec<f64>,
    featurizer: Featurizer,
}

struct Encoded {
    tokens: Vec<Vec<(usize, f64)>>,
    utterance: Vec<(usize, f64)>,
}

impl JointModel {
    fn from_params(params: ModelParams, featurizer: Featurizer) -> Result<Self, ParserError> {
        let (f, i, k) = (params.features.len(), params.intents.len(), params.tags.len());
        let consistent = params.intent_weights.len() == f * i
            && params.emission_weights.len() == f * k
            && params.start_weights.len() == k
            && params.transition_weights.len() == k * k
            && i > 0
            && k > 0;
        if !consistent {
            return Err(ParserError::ModelFormat("weight dimensions disagree with inventories".into()));
        }
        let bio: Vec<BioTag> = params
            .tags
            .iter()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| ParserError::ModelFormat(format!("{e}")))?;
        let (start_mask, trans_mask) = bio_masks(&bio);
        let index = params.features.iter().enumerate().map(|(n, f)| (f.clone(), n)).collect();
        Ok(JointModel { params, index, bio, start_mask, trans_mask, featurizer })
    }

    pub fn intents(&self) -> &[String] {
        &self.params.intents
    }

    pub fn tags(&self) -> &[String] {
        &self.params.tags
    }

    fn encode(&self, tokens: &[String]) -> Encoded {
        let f = self.featurizer.featurize(tokens);
        let lookup = |fv: &features::FeatureVec| -> Vec<(usize, f64)> {
            fv.iter().filter_map(|(name, v)| self.index.get(name).map(|&i| (i, *v))).collect()
        };
        Encoded { tokens: f.tokens.iter().map(lookup).collect(), utterance: lookup(&f.utterance) }
    }

    fn intent_scores(&self, utt: &[(usize, f64)]) -> Vec<f64> {
        let ni = self.params.intents.len();
        let mut s = vec![0.0; ni];
        for &(f, v) in utt {
            for (c, sc) in s.iter_mut().enumerate() {
                *sc += v * self.params.intent_weights[f * ni + c];
            }
        }
        s
    }

    fn lattice(&self, enc: &Encoded) -> Lattice {
        let k = self.params.tags.len();
        let n = enc.tokens.len();
        let mut emissions = vec![0.0; n * k];
        for (t, feats) in enc.tokens.iter().enumerate() {
            for &(f, v) in feats {
                for j in 0..k {
                    emissions[t * k + j] += v * self.params.emission_weights[f * k + j];
                }
            }
        }
        let start = self.params.start_weights.iter().zip(&self.start_mask).map(|(w, m)| w + m).collect();
        let trans = self.params.transition_weights.iter().zip(&self.trans_mask).map(|(w, m)| w + m).collect();
        Lattice::new(n, k, emissions, start, trans)
    }

    fn predict_encoded(&self, enc: &Encoded) -> (usize, Vec<usize>) {
        let scores = self.intent_scores(&enc.utterance);
        let mut intent = 0;
        for c in 1..scores.len() {
            if scores[c] > scores[intent] {
                intent = c;
            }
        }
        let (path, _) = self.lattice(enc).viterbi();
        (intent, path)
    }

    pub fn predict_tags(&self, utterance: &Utterance) -> (String, Vec<BioTag>) {
        if utterance.is_empty() {
            return (self.params.intents[0].clone(), Vec::new());
        }
        let (intent, path) = self.predict_encoded(&self.encode(&utterance.tokens));
        (self.params.intents[intent].clone(), path.into_iter().map(|j| self.bio[j].clone()).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.params).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ParserError> {
        let params: ModelParams = serde_json::from_str(text).map_err(|e| ParserError::ModelFormat(e.to_string()))?;
        if params.format != MODEL_FORMAT {
            return Err(ParserError::ModelFormat(format!("unexpected format {:?}", params.format)));
        }
        if params.version != MODEL_VERSION {
            return Err(ParserError::ModelFormat(format!("unsupported version {}", params.version)));
        }
        let featurizer = Featurizer::new(params.feature_config.clone())?;
        Self::from_params(params, featurizer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ParserError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParserError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn predict_parse(model: &JointModel, utterance: &Utterance) -> SemanticParse {
    let (intent, tags) = model.predict_tags(utterance);
    SemanticParse::from_bio(intent, &tags)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainWarning {
    LabelNotInTrain { id: String, label: String },
}

impl fmt::Display for TrainWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainWarning::LabelNotInTrain { id, label } => {
                write!(f, "dev example {id:?} uses label {label:?} unseen in training; it will score as wrong")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Summed intent and tagging loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub dev_exact_match: Vec<f64>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub warnings: Vec<TrainWarning>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: JointModel,
    pub report: TrainReport,
}

struct TrainItem {
    enc: Encoded,
    intent: usize,
    gold: Vec<usize>,
}

fn exact_match(model: &JointModel, data: &[&Example]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data.iter().filter(|ex| predict_parse(model, &ex.utterance) == ex.parse).count();
    correct as f64 / data.len() as f64
}

fn sgd_step(model: &mut JointModel, item: &TrainItem, lr: f64, l2: f64) -> f64 {
    let ni = model.params.intents.len();
    let k = model.params.tags.len();

    let scores = model.intent_scores(&item.enc.utterance);
    let z = crf::log_sum_exp(scores.iter().copied());
    let mut loss = z - scores[item.intent];
    let probs: Vec<f64> = scores.iter().map(|s| (s - z).exp()).collect();
    for &(f, v) in &item.enc.utterance {
        for (c, p) in probs.iter().enumerate() {
            let g = v * (p - f64::from(u8::from(c == item.intent)));
            let w = &mut model.params.intent_weights[f * ni + c];
            *w -= lr * (g + l2 * *w);
        }
    }

    let lattice = model.lattice(&item.enc);
    let (nll, grad) = lattice.nll_and_grad(&item.gold);
    loss += nll;
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (t, feats) in item.enc.tokens.iter().enumerate() {
        for &(f, v) in feats {
            let row = rows.entry(f).or_insert_with(|| vec![0.0; k]);
            for j in 0..k {
                row[j] += v * grad.emissions[t * k + j];
            }
        }
    }
    for (f, row) in rows {
        for (j, g) in row.into_iter().enumerate() {
            let w = &mut model.params.emission_weights[f * k + j];
            *w -= lr * (g + l2 * *w);
        }
    }
    for (j, g) in grad.start.iter().enumerate() {
        if model.start_mask[j] == 0.0 {
            let w = &mut model.params.start_weights[j];
            *w -= lr * (g + l2 * *w);
        }
    }
    for (j, g) in grad.trans.iter().enumerate() {
        if model.trans_mask[j] == 0.0 {
            let w = &mut model.params.transition_weights[j];
            *w -= lr * (g + l2 * *w);
        }
    }
    loss
}

/// Trains both heads by per-example SGD and returns the checkpoint with the
/// best dev exact match (the last epoch when `dev` is empty).
pub fn train_joint_model(
    train: &Dataset,
    dev: &Dataset,
    fc: &FeatureConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome, ParserError> {
    tc.validate()?;
    let featurizer = Featurizer::new(fc.clone())?;
    train_with_featurizer(train, dev, featurizer, tc)
}

pub fn train_with_featurizer(
    train: &Dataset,
    dev: &Dataset,
    featurizer: Featurizer,
    tc: &TrainConfig,
) -> Result<TrainOutcome, ParserError> {
    tc.validate()?;
    if train.is_empty() {
        return Err(ParserError::EmptyTrainingSet);
    }

    let intents: Vec<String> = train.intents().into_iter().map(str::to_owned).collect();
    let labels = train.slot_labels();
    let mut tags: Vec<String> = labels
        .iter()
        .flat_map(|l| [BioTag::Begin((*l).into()), BioTag::Inside((*l).into())])
        .chain(std::iter::once(BioTag::Outside))
        .map(|t| t.to_string())
        .collect();
    tags.sort();

    let mut warnings = Vec::new();
    for ex in dev.iter() {
        let unseen = std::iter::once(&ex.parse.intent)
            .filter(|i| !intents.contains(i))
            .chain(ex.parse.slots.iter().map(|s| &s.label).filter(|l| !labels.contains(l.as_str())));
        for label in unseen.collect::<BTreeSet<_>>() {
            let w = TrainWarning::LabelNotInTrain { id: ex.id.clone(), label: label.clone() };
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    let featurized: Vec<features::Featurized> =
        train.iter().map(|ex| featurizer.featurize(&ex.utterance.tokens)).collect();
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for f in &featurized {
        for (name, _) in f.tokens.iter().flatten().chain(&f.utterance) {
            names.insert(name);
        }
    }
    let feature_names: Vec<String> = names.into_iter().map(str::to_owned).collect();
    let (nf, ni, k) = (feature_names.len(), intents.len(), tags.len());
    let params = ModelParams {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        feature_config: featurizer.config().clone(),
        intents,
        tags,
        features: feature_names,
        intent_weights: vec![0.0; nf * ni],
        emission_weights: vec![0.0; nf * k],
        start_weights: vec![0.0; k],
        transition_weights: vec![0.0; k * k],
    };
    let mut model = JointModel::from_params(params, featurizer)?;

    let tag_index: HashMap<&str, usize> = model.params.tags.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let items: Vec<TrainItem> = train
        .iter()
        .zip(&featurized)
        .map(|(ex, f)| {
            let lookup = |fv: &features::FeatureVec| -> Vec<(usize, f64)> {
                fv.iter().map(|(name, v)| (model.index[name], *v)).collect()
            };
            let bio = ex
                .parse
                .to_bio(ex.utterance.len())
                .map_err(|source| ParserError::BadExample { id: ex.id.clone(), source })?;
            Ok(TrainItem {
                enc: Encoded { tokens: f.tokens.iter().map(lookup).collect(), utterance: lookup(&f.utterance) },
                intent: model.params.intents.binary_search(&ex.parse.intent).expect("intent inventory from train"),
                gold: bio.iter().map(|t| tag_index[t.to_string().as_str()]).collect(),
            })
        })
        .collect::<Result<_, ParserError>>()?;
    drop(featurized);

    let dev_examples: Vec<&Example> = dev.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut dev_scores = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let loss: f64 = order.iter().map(|&i| sgd_step(&mut model, &items[i], tc.learning_rate, tc.l2)).sum();
        epoch_losses.push(loss);
        log::debug!("epoch {epoch}: loss {loss:.4}");
        if dev_examples.is_empty() {
            continue;
        }
        let score = exact_match(&model, &dev_examples);
        dev_scores.push(score);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if tc.early_stop_patience > 0 && epoch - best_epoch >= tc.early_stop_patience {
            log::info!("early stop after epoch {epoch}; best dev exact match at epoch {best_epoch}");
            break;
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => epoch_losses.len(),
    };
    Ok(TrainOutcome { model, report: TrainReport { epoch_losses, dev_exact_match: dev_scores, best_epoch, warnings } })
}
