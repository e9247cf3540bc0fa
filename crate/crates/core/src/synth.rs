//! Synthetic benchmark corpora.
//!
//! Far regime: a two-class sentiment grammar for ID, and two unrelated
//! grammars (news-style topics, questions) as OOD sets. ID and OOD word
//! vocabularies are disjoint by construction.
//!
//! Near regime: one banking-intent grammar with eight intents. A seeded
//! shuffle picks half of them as ID classes; the rest are OOD. All intents
//! share the same carrier phrases.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Regime, Shots};
use crate::dump::EmbeddingDump;
use crate::error::{Error, Result};
use crate::toylm::Example;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub ood_per_set: usize,
}

impl SplitSizes {
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Far => SplitSizes {
                train_per_class: 48,
                val_per_class: 12,
                test_per_class: 48,
                ood_per_set: 96,
            },
            Regime::Near => SplitSizes {
                train_per_class: 48,
                val_per_class: 8,
                test_per_class: 24,
                ood_per_set: 96,
            },
        }
    }
}

/// An unlabeled OOD sentence set.
#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub sentences: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub regime: Regime,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Near regime only: the held-out intents used as OOD.
    pub ood_class_names: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub ood: Vec<OodSet>,
}

impl SyntheticTask {
    /// Word vocabulary of the ID splits.
    pub fn id_vocabulary(&self) -> BTreeSet<String> {
        words(
            self.train
                .iter()
                .chain(&self.val)
                .chain(&self.test)
                .map(|e| e.text.as_str()),
        )
    }

    pub fn ood_vocabulary(&self) -> BTreeSet<String> {
        words(self.ood.iter().flat_map(|o| o.sentences.iter().map(|s| s.1.as_str())))
    }
}

/// Splits on whitespace and strips a trailing `?`.
pub fn words<'a>(texts: impl Iterator<Item = &'a str>) -> BTreeSet<String> {
    texts
        .flat_map(|t| t.split_whitespace())
        .map(|w| w.trim_end_matches('?').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

type Filler = &'static [&'static str];

/// A sentence template: literal parts interleaved with slot fillers.
struct Template(&'static [Part]);

enum Part {
    Lit(&'static str),
    Slot(Filler),
}

use Part::{Lit, Slot};

impl Template {
    fn sample(&self, rng: &mut ChaCha8Rng) -> String {
        let mut s = String::new();
        for p in self.0 {
            match p {
                Lit(t) => s.push_str(t),
                Slot(f) => s.push_str(f.choose(rng).expect("non-empty filler")),
            }
        }
        s
    }
}

fn sample_from(templates: &[Template], rng: &mut ChaCha8Rng) -> String {
    templates[rng.random_range(0..templates.len())].sample(rng)
}

// --- far regime: sentiment (ID) ---

const FILM: Filler = &[
    "film", "movie", "plot", "cast", "story", "script", "ending", "score", "sequel", "premise",
];
const GOOD: Filler = &[
    "great",
    "lovely",
    "superb",
    "brilliant",
    "charming",
    "wonderful",
    "clever",
    "moving",
    "witty",
    "gorgeous",
];
const BAD: Filler = &[
    "dull", "awful", "boring", "weak", "messy", "bland", "tedious", "clumsy", "lifeless", "dreadful",
];
const LIKED: Filler = &["loved", "enjoyed", "adored", "treasured", "admired"];
const HATED: Filler = &["hated", "disliked", "regretted", "resented", "loathed"];
const INTENS: Filler = &["so", "truly", "really", "quite", "very"];

const POSITIVE: &[Template] = &[
    Template(&[
        Lit("this "),
        Slot(FILM),
        Lit(" was "),
        Slot(INTENS),
        Lit(" "),
        Slot(GOOD),
    ]),
    Template(&[Lit("i "), Slot(LIKED), Lit(" this "), Slot(GOOD), Lit(" "), Slot(FILM)]),
    Template(&[Lit("such a "), Slot(GOOD), Lit(" "), Slot(FILM)]),
    Template(&[Slot(INTENS), Lit(" "), Slot(GOOD), Lit(" and "), Slot(GOOD)]),
];

const NEGATIVE: &[Template] = &[
    Template(&[
        Lit("this "),
        Slot(FILM),
        Lit(" was "),
        Slot(INTENS),
        Lit(" "),
        Slot(BAD),
    ]),
    Template(&[Lit("i "), Slot(HATED), Lit(" this "), Slot(BAD), Lit(" "), Slot(FILM)]),
    Template(&[Lit("such a "), Slot(BAD), Lit(" "), Slot(FILM)]),
    Template(&[Slot(INTENS), Lit(" "), Slot(BAD), Lit(" and "), Slot(BAD)]),
];

// --- far regime: topic and question grammars (OOD) ---

const NAME: Filler = &["Alice", "Bruno", "Chen", "Dmitri", "Elena", "Farah", "Goran", "Hiro"];
const NUM: Filler = &["2", "3", "7", "12", "19", "40", "85", "300"];
const PLACE: Filler = &["Berlin", "Lagos", "Oslo", "Lima", "Seoul", "Quebec", "Madrid", "Cairo"];
const DAY: Filler = &["Monday", "Tuesday", "Friday", "Sunday"];
const GROUP: Filler = &["Stocks", "Shares", "Bonds", "Prices", "Rates"];

const TOPIC: &[Template] = &[
    Template(&[Slot(NAME), Lit(" scored "), Slot(NUM), Lit(" goals at "), Slot(PLACE)]),
    Template(&[Slot(GROUP), Lit(" fell "), Slot(NUM), Lit(" points on "), Slot(DAY)]),
    Template(&[Slot(NAME), Lit(" won the race in "), Slot(PLACE)]),
    Template(&[Slot(GROUP), Lit(" rose "), Slot(NUM), Lit("% in "), Slot(PLACE)]),
];

const THING: Filler = &["capital", "river", "height", "author", "price", "origin", "size", "age"];
const OBJ: Filler = &["Peru", "Nepal", "Kenya", "Chile", "Egypt", "Fiji", "Oman", "Laos"];

const QUESTION: &[Template] = &[
    Template(&[Lit("what is the "), Slot(THING), Lit(" of "), Slot(OBJ), Lit("?")]),
    Template(&[Lit("who named "), Slot(OBJ), Lit("?")]),
    Template(&[Lit("how big is "), Slot(OBJ), Lit("?")]),
    Template(&[Lit("where does "), Slot(NAME), Lit(" live?")]),
];

// --- near regime: banking intents ---

const OPEN: Filler = &[
    "please",
    "can you",
    "i want to",
    "help me",
    "i need to",
    "could you",
    "i would like to",
    "kindly",
];
const CLOSE: Filler = &[
    "today",
    "now",
    "for me",
    "soon",
    "right away",
    "quickly",
    "this week",
    "if possible",
    "thanks",
];

struct Intent {
    name: &'static str,
    phrases: Filler,
}

const INTENTS: [Intent; 8] = [
    Intent {
        name: "balance",
        phrases: &["check my balance", "see my balance", "show my account balance"],
    },
    Intent {
        name: "deposit",
        phrases: &["deposit a cheque", "deposit my cash", "make a deposit"],
    },
    Intent {
        name: "exchange",
        phrases: &["exchange my euros", "convert my dollars", "exchange some currency"],
    },
    Intent {
        name: "freeze",
        phrases: &["freeze my card", "block my card", "freeze my account"],
    },
    Intent {
        name: "interest",
        phrases: &["see my interest rate", "check the interest", "raise my interest"],
    },
    Intent {
        name: "loan",
        phrases: &["apply for a loan", "get a loan", "repay my loan"],
    },
    Intent {
        name: "pin",
        phrases: &["reset my pin", "change my pin", "unlock my pin"],
    },
    Intent {
        name: "transfer",
        phrases: &["transfer money", "send my money", "make a transfer"],
    },
];

fn intent_sentence(intent: &Intent, rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {}",
        OPEN.choose(rng).unwrap(),
        intent.phrases.choose(rng).unwrap(),
        CLOSE.choose(rng).unwrap()
    )
}

fn examples(
    prefix: &str,
    per_class: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
    gen: &dyn Fn(usize, &mut ChaCha8Rng) -> String,
) -> Vec<Example> {
    let mut out = Vec::with_capacity(per_class * num_classes);
    for _ in 0..per_class {
        for class in 0..num_classes {
            out.push(Example {
                id: format!("{prefix}-{:04}", out.len()),
                text: gen(class, rng),
                label: class,
            });
        }
    }
    out
}

fn unlabeled(
    prefix: &str,
    n: usize,
    rng: &mut ChaCha8Rng,
    gen: &dyn Fn(&mut ChaCha8Rng) -> String,
) -> Vec<(String, String)> {
    (0..n).map(|i| (format!("{prefix}-{i:04}"), gen(rng))).collect()
}

/// Generates a task; deterministic in `(regime, seed, sizes)`.
pub fn generate_task_with(regime: Regime, seed: u64, sizes: &SplitSizes) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5359_4e54);
    match regime {
        Regime::Far => {
            let gen =
                |class: usize, rng: &mut ChaCha8Rng| sample_from(if class == 0 { POSITIVE } else { NEGATIVE }, rng);
            let train = examples("train", sizes.train_per_class, 2, &mut rng, &gen);
            let val = examples("val", sizes.val_per_class, 2, &mut rng, &gen);
            let test = examples("test", sizes.test_per_class, 2, &mut rng, &gen);
            let ood = vec![
                OodSet {
                    name: "topic".into(),
                    sentences: unlabeled("topic", sizes.ood_per_set, &mut rng, &|r| sample_from(TOPIC, r)),
                },
                OodSet {
                    name: "question".into(),
                    sentences: unlabeled("question", sizes.ood_per_set, &mut rng, &|r| sample_from(QUESTION, r)),
                },
            ];
            SyntheticTask {
                regime,
                seed,
                class_names: vec!["positive".into(), "negative".into()],
                ood_class_names: vec![],
                train,
                val,
                test,
                ood,
            }
        }
        Regime::Near => {
            let mut order: Vec<usize> = (0..INTENTS.len()).collect();
            order.shuffle(&mut rng);
            let (mut id, mut held_out) = (order[..4].to_vec(), order[4..].to_vec());
            id.sort_unstable();
            held_out.sort_unstable();
            let gen = |class: usize, rng: &mut ChaCha8Rng| intent_sentence(&INTENTS[id[class]], rng);
            let train = examples("train", sizes.train_per_class, id.len(), &mut rng, &gen);
            let val = examples("val", sizes.val_per_class, id.len(), &mut rng, &gen);
            let test = examples("test", sizes.test_per_class, id.len(), &mut rng, &gen);
            let ood_gen = |r: &mut ChaCha8Rng| {
                let pick = held_out[r.random_range(0..held_out.len())];
                intent_sentence(&INTENTS[pick], r)
            };
            let ood = vec![OodSet {
                name: "held_out".into(),
                sentences: unlabeled("held_out", sizes.ood_per_set, &mut rng, &ood_gen),
            }];
            SyntheticTask {
                regime,
                seed,
                class_names: id.iter().map(|&i| INTENTS[i].name.to_string()).collect(),
                ood_class_names: held_out.iter().map(|&i| INTENTS[i].name.to_string()).collect(),
                train,
                val,
                test,
                ood,
            }
        }
    }
}

pub fn generate_task(regime: Regime, seed: u64) -> SyntheticTask {
    generate_task_with(regime, seed, &SplitSizes::for_regime(regime))
}

/// One pretraining document: a bare sentence, or a templated prompt whose
/// answer is the name of the sentence's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainDoc {
    pub text: String,
    pub domain: Option<&'static str>,
}

/// Domain names used as answers in templated pretraining documents. Their
/// first bytes differ from every class name of both regimes.
pub const DOMAINS: [&str; 4] = ["review", "headline", "query", "chat"];

/// A general pretraining corpus covering every grammar of both regimes.
/// Each document is templated with probability `templated` and a bare
/// sentence otherwise.
pub fn pretraining_corpus(n: usize, templated: f64, seed: u64) -> Vec<PretrainDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5052_4554);
    (0..n)
        .map(|_| {
            let (text, domain) = match rng.random_range(0..4) {
                0 => (
                    sample_from(if rng.random_bool(0.5) { POSITIVE } else { NEGATIVE }, &mut rng),
                    DOMAINS[0],
                ),
                1 => (sample_from(TOPIC, &mut rng), DOMAINS[1]),
                2 => (sample_from(QUESTION, &mut rng), DOMAINS[2]),
                _ => {
                    let i = rng.random_range(0..INTENTS.len());
                    (intent_sentence(&INTENTS[i], &mut rng), DOMAINS[3])
                }
            };
            let domain = rng.random_bool(templated).then_some(domain);
            PretrainDoc { text, domain }
        })
        .collect()
}

/// Seeded random choice of `k` indices per label (sorted), or `None` for
/// full shots.
fn pick_per_class(labels: &[Option<usize>], num_classes: usize, shots: Shots, seed: u64) -> Result<Option<Vec<usize>>> {
    let Some(k) = shots.per_class() else {
        return Ok(None);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_4f54);
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut rng);
    let mut taken = vec![0usize; num_classes];
    let mut keep = Vec::new();
    for i in idx {
        if let Some(c) = labels[i] {
            if c < num_classes && taken[c] < k {
                taken[c] += 1;
                keep.push(i);
            }
        }
    }
    if let Some(c) = taken.iter().position(|&t| t < k) {
        return Err(Error::Config(format!("class {c} has fewer than {k} examples")));
    }
    keep.sort_unstable();
    Ok(Some(keep))
}

/// Keeps `k` examples of each class (in a seeded random order).
pub fn few_shot(examples: &[Example], num_classes: usize, shots: Shots, seed: u64) -> Result<Vec<Example>> {
    let labels: Vec<Option<usize>> = examples.iter().map(|e| Some(e.label)).collect();
    Ok(match pick_per_class(&labels, num_classes, shots, seed)? {
        None => examples.to_vec(),
        Some(keep) => keep.into_iter().map(|i| examples[i].clone()).collect(),
    })
}

/// Few-shot subsample of the labeled records of a dump; unlabeled records
/// are dropped when `shots` is a count.
pub fn few_shot_dump(dump: &EmbeddingDump, shots: Shots, seed: u64) -> Result<EmbeddingDump> {
    if dump.num_classes() == 0 && shots.per_class().is_some() {
        return Err(Error::Config("few-shot selection needs a dump with class names".into()));
    }
    let labels: Vec<Option<usize>> = dump.records.iter().map(|r| r.label.map(|l| l as usize)).collect();
    Ok(match pick_per_class(&labels, dump.num_classes(), shots, seed)? {
        None => dump.clone(),
        Some(keep) => EmbeddingDump {
            records: keep.into_iter().map(|i| dump.records[i].clone()).collect(),
            ..dump.clone()
        },
    })
}

/// Fraction of OOD word types that also occur in the ID splits.
pub fn vocabulary_overlap(task: &SyntheticTask) -> f64 {
    let id = task.id_vocabulary();
    let ood = task.ood_vocabulary();
    if ood.is_empty() {
        return 0.0;
    }
    ood.intersection(&id).count() as f64 / ood.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for regime in [Regime::Far, Regime::Near] {
            assert_eq!(generate_task(regime, 3), generate_task(regime, 3));
            assert_ne!(generate_task(regime, 3).train, generate_task(regime, 4).train);
        }
    }

    #[test]
    fn far_vocabularies_are_disjoint() {
        for seed in 1..=5 {
            let t = generate_task(Regime::Far, seed);
            assert!(t.id_vocabulary().is_disjoint(&t.ood_vocabulary()));
            assert_eq!(vocabulary_overlap(&t), 0.0);
        }
    }

    #[test]
    fn near_split_is_half_and_overlaps() {
        for seed in 1..=5 {
            let t = generate_task(Regime::Near, seed);
            assert_eq!(t.class_names.len(), 4);
            assert_eq!(t.ood_class_names.len(), 4);
            assert!(t.class_names.iter().all(|c| !t.ood_class_names.contains(c)));
            assert!(vocabulary_overlap(&t) >= 0.5, "{}", vocabulary_overlap(&t));
        }
    }

    #[test]
    fn class_first_bytes_are_distinct() {
        let firsts: BTreeSet<u8> = INTENTS.iter().map(|i| i.name.as_bytes()[0]).collect();
        assert_eq!(firsts.len(), INTENTS.len());
    }

    #[test]
    fn few_shot_takes_k_per_class() {
        let t = generate_task(Regime::Far, 1);
        let s = few_shot(&t.train, 2, Shots::K(5), 9).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.iter().filter(|e| e.label == 0).count(), 5);
        assert_eq!(few_shot(&t.train, 2, Shots::Full, 9).unwrap(), t.train);
        assert_eq!(s, few_shot(&t.train, 2, Shots::K(5), 9).unwrap());
    }
}
