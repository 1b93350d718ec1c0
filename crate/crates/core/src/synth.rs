//! Seeded synthetic corpus and dialogues for smoke tests and experiments.
//!
//! Each cluster is one document about a named product with sections split by
//! `## ` headers. Sections come in pairs that use the same words with the two
//! colors swapped between the parts, so a bag-of-words model cannot tell the
//! pair apart while a model that sees word order can. Every section carries a
//! unique price and a store city, which the dialogues ask about.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, DialogueTurn, Document, Grounding};
use crate::error::{Error, Result};

const NAMES: [&str; 24] = [
    "falcon", "otter", "maple", "comet", "harbor", "juniper", "quartz", "tundra", "willow", "ember",
    "glacier", "meadow", "canyon", "orchid", "pebble", "summit", "lagoon", "cedar", "aurora", "bramble",
    "cobalt", "dune", "fjord", "grove",
];
const PARTS: [&str; 10] = [
    "battery", "screen", "handle", "wheel", "lid", "cable", "lamp", "strap", "button", "fan",
];
const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"];
const CITIES: [&str; 12] = [
    "oslo", "lima", "cairo", "dublin", "quito", "perth", "austin", "nagoya", "porto", "tunis", "riga", "boise",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: usize,
    /// Even; sections are generated in swapped pairs.
    pub sections_per_cluster: usize,
    pub dialogues: usize,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 20,
            sections_per_cluster: 10,
            dialogues: 300,
            dev_fraction: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub documents: Vec<Document>,
    pub dialogues: Vec<Dialogue>,
}

struct Section {
    part: [&'static str; 2],
    color: [&'static str; 2],
    price: usize,
    city: &'static str,
}

fn section(cluster: usize, s: usize, price: usize, city: &'static str) -> Section {
    let j = s / 2;
    let part_a = PARTS[(cluster + 2 * j) % PARTS.len()];
    let part_b = PARTS[(cluster + 2 * j + 1) % PARTS.len()];
    let cx = COLORS[(cluster * 3 + j) % COLORS.len()];
    let cy = COLORS[(cluster * 3 + j + 3) % COLORS.len()];
    let color = if s % 2 == 0 { [cx, cy] } else { [cy, cx] };
    Section {
        part: [part_a, part_b],
        color,
        price,
        city,
    }
}

fn span_sentence(sec: &Section) -> String {
    format!("it sells for {} dollars at the {} store.", sec.price, sec.city)
}

fn answer_sentence(sec: &Section) -> String {
    format!("that one is {} dollars in {}.", sec.price, sec.city)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.clusters == 0 || cfg.clusters > NAMES.len() {
        return Err(Error::Config(format!("clusters must be in 1..={}", NAMES.len())));
    }
    if cfg.sections_per_cluster == 0 || cfg.sections_per_cluster % 2 != 0 {
        return Err(Error::Config("sections_per_cluster must be a positive even number".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sections: Vec<Vec<Section>> = Vec::with_capacity(cfg.clusters);
    let mut documents = Vec::with_capacity(cfg.clusters);
    for c in 0..cfg.clusters {
        let name = NAMES[c];
        let mut body = String::new();
        let mut secs = Vec::with_capacity(cfg.sections_per_cluster);
        for s in 0..cfg.sections_per_cluster {
            let price = 10 + 3 * (c * cfg.sections_per_cluster + s);
            let city = *CITIES.choose(&mut rng).expect("non-empty");
            let sec = section(c, s, price, city);
            if s > 0 {
                body.push('\n');
            }
            body.push_str(&format!(
                "## {name} {} and {}\nthe {name} comes with a {} {} and a {} {}. {}\n",
                sec.part[0],
                sec.part[1],
                sec.color[0],
                sec.part[0],
                sec.color[1],
                sec.part[1],
                span_sentence(&sec)
            ));
            secs.push(sec);
        }
        documents.push(Document {
            doc_id: format!("doc{c:02}"),
            title: format!("{name} product notes"),
            body,
            source_meta: [("generator".to_string(), "synthetic".to_string())].into(),
        });
        sections.push(secs);
    }

    let mut dialogues = Vec::with_capacity(cfg.dialogues);
    for d in 0..cfg.dialogues {
        let c = rng.random_range(0..cfg.clusters);
        let s = rng.random_range(0..cfg.sections_per_cluster);
        let sec = &sections[c][s];
        let name = NAMES[c];
        let which = rng.random_range(0..2);
        let (color, part) = (sec.color[which], sec.part[which]);
        let (turns, turn_index) = if rng.random_bool(0.5) {
            (
                vec![
                    DialogueTurn::user(format!("i have a question about the {name}.")),
                    DialogueTurn::agent(format!("sure, what would you like to know about the {name}?")),
                    DialogueTurn::user(format!("how much does the {color} {part} cost?")),
                ],
                2,
            )
        } else {
            (
                vec![DialogueTurn::user(format!(
                    "how much does the {name} with the {color} {part} cost?"
                ))],
                0,
            )
        };
        dialogues.push(Dialogue {
            dial_id: format!("synth{d:04}"),
            turns,
            grounding: vec![Grounding {
                turn_index,
                positive_passage_ids: vec![format!("doc{c:02}#{s}")],
                span: span_sentence(sec),
                answer: answer_sentence(sec),
                hard_negative_ids: Vec::new(),
            }],
        });
    }
    Ok(SynthData {
        documents,
        dialogues,
    })
}

/// Whether `dial_id` falls in the dev split; stable across runs and machines.
pub fn is_dev(dial_id: &str, dev_fraction: f64, seed: u64) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(dial_id.as_bytes());
    let digest = h.finalize();
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (x as f64 / u64::MAX as f64) < dev_fraction
}

/// `(train, dev)` dialogues by [`is_dev`].
pub fn split_dialogues(dialogues: &[Dialogue], dev_fraction: f64, seed: u64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    dialogues
        .iter()
        .cloned()
        .partition(|d| !is_dev(&d.dial_id, dev_fraction, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, SplitPolicy};

    #[test]
    fn default_sizes_and_grounding_resolve() {
        let data = generate(&SynthConfig::default()).unwrap();
        let corpus = Corpus::from_documents(data.documents.clone(), &SplitPolicy::Structural).unwrap();
        assert_eq!(corpus.len(), 200);
        assert_eq!(data.dialogues.len(), 300);
        let examples: Vec<_> = data
            .dialogues
            .iter()
            .flat_map(|d| d.examples().unwrap())
            .collect();
        assert_eq!(examples.len(), 300);
        assert!(corpus.validate_examples(&examples).is_empty());
        for ex in &examples {
            let p = corpus.passage(&ex.positive_passage_ids[0]).unwrap();
            assert!(p.find_span(&ex.gold_span).is_some());
        }
    }

    #[test]
    fn paired_sections_share_a_bag_of_words() {
        let data = generate(&SynthConfig::default()).unwrap();
        let corpus = Corpus::from_documents(data.documents, &SplitPolicy::Structural).unwrap();
        let bag = |id: &str| {
            let text = &corpus.passage(id).unwrap().text;
            let head = &text[..text.find("it sells").unwrap()];
            let mut w: Vec<&str> = head.split_whitespace().collect();
            w.sort();
            w.into_iter().map(str::to_string).collect::<Vec<_>>()
        };
        assert_eq!(bag("doc03#4"), bag("doc03#5"));
        assert_ne!(corpus.passage("doc03#4").unwrap().text, corpus.passage("doc03#5").unwrap().text);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a, generate(&SynthConfig::default()).unwrap());
        let b = generate(&SynthConfig {
            seed: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a.dialogues, b.dialogues);
    }

    #[test]
    fn dev_split_is_stable_and_roughly_sized() {
        let data = generate(&SynthConfig::default()).unwrap();
        let (train, dev) = split_dialogues(&data.dialogues, 0.2, 1);
        assert_eq!(train.len() + dev.len(), 300);
        assert!((30..=90).contains(&dev.len()), "{}", dev.len());
        assert_eq!(split_dialogues(&data.dialogues, 0.2, 1).1, dev);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig {
            sections_per_cluster: 3,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            clusters: 99,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
