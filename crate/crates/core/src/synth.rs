//! Deterministic Spanglish-style fixture corpus.
//!
//! Carriers are templates with `{LABEL}` holes; holes are filled from value
//! lists. Code-switched utterances draw Spanish-leaning carriers and values
//! from both languages, the English pool draws English carriers and values
//! only.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Example, Split};

pub const FIXTURE_SEED: u64 = 20_221_014;

struct Intent {
    name: &'static str,
    domain: &'static str,
    weight: u32,
    cs: &'static [&'static str],
    en: &'static [&'static str],
}

const INTENTS: &[Intent] = &[
    Intent {
        name: "GET_WEATHER",
        domain: "weather",
        weight: 6,
        cs: &[
            "Dime el clima {DATE_TIME}",
            "Quiero saber el clima {DATE_TIME}",
            "cómo está el weather en {LOCATION}",
            "va a haber {WEATHER_ATTRIBUTE} {DATE_TIME}",
            "cuál es el forecast para {LOCATION} {DATE_TIME}",
            "habrá {WEATHER_ATTRIBUTE} en {LOCATION}",
            "dime el pronóstico {DATE_TIME}",
            "qué temperatura hace en {LOCATION}",
        ],
        en: &[
            "show me the weather {DATE_TIME}",
            "what is the weather {DATE_TIME}",
            "how is the weather in {LOCATION}",
            "will there be {WEATHER_ATTRIBUTE} {DATE_TIME}",
            "what is the forecast for {LOCATION} {DATE_TIME}",
            "is there {WEATHER_ATTRIBUTE} in {LOCATION}",
            "what is the temperature in {LOCATION}",
        ],
    },
    Intent {
        name: "UNSUPPORTED_WEATHER",
        domain: "weather",
        weight: 2,
        cs: &[
            "cuál es el índice de polen {DATE_TIME}",
            "hay alerta de huracán en {LOCATION}",
            "cómo está la calidad del aire",
        ],
        en: &[
            "what is the pollen count {DATE_TIME}",
            "is there a hurricane warning in {LOCATION}",
            "how is the air quality",
        ],
    },
    Intent {
        name: "SET_BRIGHTNESS",
        domain: "device",
        weight: 2,
        cs: &["pon el brillo al {PERCENT}", "cambia el brightness a {PERCENT}"],
        en: &["set brightness to {PERCENT}", "change the brightness to {PERCENT}"],
    },
    Intent {
        name: "INCREASE_VOLUME",
        domain: "device",
        weight: 2,
        cs: &["sube el volumen", "sube el volume un poco", "pon el volumen más alto"],
        en: &["turn up the volume", "make it louder"],
    },
    Intent {
        name: "MUTE_VOLUME",
        domain: "device",
        weight: 2,
        cs: &["silencia el phone", "pon el teléfono en mute", "quita el sonido"],
        en: &["mute the phone", "turn off the sound"],
    },
    Intent {
        name: "OPEN_RESOURCE",
        domain: "device",
        weight: 3,
        cs: &["abre {RESOURCE}", "abre la app de {RESOURCE}", "puedes abrir {RESOURCE}"],
        en: &["open {RESOURCE}", "launch {RESOURCE}", "can you open {RESOURCE}"],
    },
    Intent {
        name: "PAUSE_MUSIC",
        domain: "device",
        weight: 2,
        cs: &["pausa la música", "pon pausa a la canción", "detén la music"],
        en: &["pause the music", "stop the song"],
    },
];

struct Values {
    label: &'static str,
    en: &'static [&'static str],
    es: &'static [&'static str],
}

const VALUES: &[Values] = &[
    Values {
        label: "DATE_TIME",
        en: &[
            "for next Friday",
            "for next Monday",
            "tomorrow",
            "tonight",
            "this weekend",
            "next week",
            "on Sunday",
            "for tomorrow morning",
            "this afternoon",
            "for the 15th",
            "on Saturday night",
            "for next Tuesday",
            "later today",
            "in the evening",
            "for Thursday",
            "next month",
            "for the weekend",
            "right now",
        ],
        es: &[
            "para mañana",
            "para el lunes",
            "hoy",
            "esta noche",
            "para el fin de semana",
            "la próxima semana",
            "para next Friday",
            "hasta el 15",
            "el domingo",
            "para el viernes",
        ],
    },
    Values {
        label: "LOCATION",
        en: &[
            "Miami",
            "New York",
            "Los Angeles",
            "Chicago",
            "Houston",
            "San Juan",
            "Boston",
            "Seattle",
            "San Antonio",
            "Orlando",
            "Dallas",
            "Phoenix",
            "Denver",
        ],
        es: &["Nueva York", "Madrid", "Ciudad de México", "Puerto Rico", "Miami", "Bogotá", "Lima"],
    },
    Values {
        label: "WEATHER_ATTRIBUTE",
        en: &["rain", "snow", "wind", "sun", "storms", "fog", "hail", "thunder"],
        es: &["lluvia", "nieve", "viento", "tormentas", "neblina"],
    },
    Values {
        label: "PERCENT",
        en: &["50 percent", "20 percent", "the max", "75 percent", "10 percent", "30 percent", "the minimum"],
        es: &["50 por ciento", "cien por ciento", "20 por ciento", "la mitad"],
    },
    Values {
        label: "RESOURCE",
        en: &[
            "Spotify",
            "YouTube",
            "the camera",
            "Netflix",
            "my email",
            "the calendar",
            "Instagram",
            "the gallery",
            "Google Maps",
            "my notes",
            "the clock",
        ],
        es: &["la cámara", "el calendario", "mi correo", "WhatsApp", "Spotify", "la galería"],
    },
];

const CS_PREFIXES: &[&str] = &["", "", "oye", "por favor", "hey", "porfa"];
const CS_SUFFIXES: &[&str] = &["", "", "por favor", "please", "ahora"];
const EN_PREFIXES: &[&str] = &["", "", "hey", "please"];
const EN_SUFFIXES: &[&str] = &["", "", "please", "now"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    CodeSwitched,
    English,
}

fn fill(intent: &Intent, side: Side, rng: &mut ChaCha8Rng) -> String {
    let (carriers, prefixes, suffixes) = match side {
        Side::CodeSwitched => (intent.cs, CS_PREFIXES, CS_SUFFIXES),
        Side::English => (intent.en, EN_PREFIXES, EN_SUFFIXES),
    };
    let carrier = *carriers.choose(rng).expect("non-empty carriers");
    let mut body = carrier.to_owned();
    for v in VALUES {
        let hole = format!("{{{}}}", v.label);
        if body.contains(&hole) {
            let pool = if side == Side::CodeSwitched && rng.random_bool(0.5) { v.es } else { v.en };
            let value = *pool.choose(rng).expect("non-empty values");
            body = body.replacen(&hole, &format!("[SL:{} {} ]", v.label, value), 1);
        }
    }
    let prefix = *prefixes.choose(rng).expect("non-empty");
    let suffix = *suffixes.choose(rng).expect("non-empty");
    let words: Vec<&str> = [prefix, body.as_str(), suffix].into_iter().filter(|s| !s.is_empty()).collect();
    format!("[IN:{} {} ]", intent.name, words.join(" "))
}

fn draw(n: usize, side: Side, tag: &str, rng: &mut ChaCha8Rng, seen: &mut HashSet<String>) -> Vec<Example> {
    let weights = WeightedIndex::new(INTENTS.iter().map(|i| i.weight)).expect("positive weights");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let intent = &INTENTS[weights.sample(rng)];
        let text = fill(intent, side, rng);
        if !seen.insert(text.clone()) {
            continue;
        }
        let mut ex = Example::from_seqlogical(format!("{tag}-{:04}", out.len()), intent.domain, &text)
            .expect("templates produce valid parses");
        ex.language = Some(if side == Side::English { "en" } else { "cs" }.to_owned());
        out.push(ex);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub en_pool: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub en_pool: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes { train: 400, valid: 100, test: 200, en_pool: 800 }
    }
}

/// Builds the corpus. Utterances are distinct across all four parts.
pub fn generate_corpus(seed: u64, sizes: SynthSizes) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut part = |n, side, tag: &str, split| {
        Dataset::new(draw(n, side, tag, &mut rng, &mut seen), split).expect("ids are unique")
    };
    SynthCorpus {
        train: part(sizes.train, Side::CodeSwitched, "cs-train", Split::Train),
        valid: part(sizes.valid, Side::CodeSwitched, "cs-valid", Split::Valid),
        test: part(sizes.test, Side::CodeSwitched, "cs-test", Split::Test),
        en_pool: part(sizes.en_pool, Side::English, "en", Split::Train),
    }
}

pub fn fixture_corpus() -> SynthCorpus {
    generate_corpus(FIXTURE_SEED, SynthSizes::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqlogical::{validate_tree, DEFAULT_MAX_DEPTH};
    use std::path::PathBuf;

    #[test]
    fn corpus_shape() {
        let c = fixture_corpus();
        assert_eq!(c.train.len() + c.valid.len() + c.test.len(), 700);
        assert!(c.train.intents().len() >= 5);
        for ex in c.train.iter().chain(c.en_pool.iter()) {
            assert!(validate_tree(&ex.seqlogical(), DEFAULT_MAX_DEPTH).is_ok());
        }
        assert_eq!(generate_corpus(FIXTURE_SEED, SynthSizes::default()), c);
    }

    #[test]
    fn shipped_fixtures_match_generator() {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/spanglish");
        let c = fixture_corpus();
        let parts = [("train", &c.train), ("valid", &c.valid), ("test", &c.test), ("en_pool", &c.en_pool)];
        if std::env::var_os("CSPARSE_REGENERATE_FIXTURES").is_some() {
            std::fs::create_dir_all(&dir).unwrap();
            for (name, ds) in parts {
                ds.save(dir.join(format!("{name}.jsonl"))).unwrap();
            }
        }
        for (name, ds) in parts {
            let shipped = std::fs::read_to_string(dir.join(format!("{name}.jsonl"))).unwrap();
            assert_eq!(shipped, ds.to_jsonl_string(), "{name}.jsonl is stale");
        }
    }
}
