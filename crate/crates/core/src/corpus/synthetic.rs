//! Synthetic worlds, two-hop QA and sentence-pair NLI generators.
//!
//! A two-hop question names two anchors and asks for the entity linked to
//! both: `c` is the answer when the passage states `c is <r1> by a` and
//! `c <r2> z`. Each wrong choice gets one distractor that matches exactly one
//! half of its hypothesis, so every choice has an equally good single
//! supporting sentence and only the correct one is supported by a pair.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{NliLabel, NliRecord, QaRecord, TaskType};
use super::text::marked_hypothesis;
use crate::error::{MulteeError, Result};

/// Verb in third-person active form and passive participle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub active: String,
    pub passive: String,
}

const LEXICON: [(&str, &str); 12] = [
    ("likes", "liked"),
    ("helps", "helped"),
    ("calls", "called"),
    ("trusts", "trusted"),
    ("visits", "visited"),
    ("follows", "followed"),
    ("teaches", "taught"),
    ("admires", "admired"),
    ("hires", "hired"),
    ("praises", "praised"),
    ("blames", "blamed"),
    ("greets", "greeted"),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pseudo-word for entity `i`, independent of any seed so that
/// separately seeded splits share one entity lexicon.
pub fn entity_name(i: usize) -> String {
    let syllables = CONSONANTS.len() * VOWELS.len();
    // multiplier coprime with syllables^2 scatters neighbouring ids
    let code = (i * 1_277 + 311) % (syllables * syllables);
    let mut s = String::with_capacity(4);
    for part in [code / syllables, code % syllables] {
        s.push(CONSONANTS[part / VOWELS.len()] as char);
        s.push(VOWELS[part % VOWELS.len()] as char);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub seed: u64,
}

impl SyntheticWorld {
    /// Entities and relations are fixed by their counts; `seed` only drives fact sampling.
    /// Facts are functional in `(subject, relation)`.
    pub fn generate(n_entities: usize, n_relations: usize, n_facts: usize, seed: u64) -> Result<Self> {
        if n_entities < 4 {
            return Err(MulteeError::Generation(format!(
                "need at least 4 entities, got {n_entities}"
            )));
        }
        if n_relations == 0 || n_relations > LEXICON.len() {
            return Err(MulteeError::Generation(format!(
                "n_relations must be in 1..={}, got {n_relations}",
                LEXICON.len()
            )));
        }
        let syllables = CONSONANTS.len() * VOWELS.len();
        if n_entities > syllables * syllables {
            return Err(MulteeError::Generation(format!(
                "at most {} entities are available",
                syllables * syllables
            )));
        }
        let entities = (0..n_entities).map(entity_name).collect();
        let relations = LEXICON[..n_relations]
            .iter()
            .map(|(a, p)| Relation {
                active: a.to_string(),
                passive: p.to_string(),
            })
            .collect();
        let capacity = n_entities * n_relations;
        if n_facts > capacity {
            return Err(MulteeError::Generation(format!(
                "{n_facts} facts requested, only {capacity} (subject, relation) slots"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut used = HashSet::new();
        let mut facts = Vec::with_capacity(n_facts);
        while facts.len() < n_facts {
            let subject = rng.gen_range(0..n_entities);
            let relation = rng.gen_range(0..n_relations);
            if !used.insert((subject, relation)) {
                continue;
            }
            let object = loop {
                let o = rng.gen_range(0..n_entities);
                if o != subject {
                    break o;
                }
            };
            facts.push(Fact {
                subject,
                relation,
                object,
            });
        }
        Ok(SyntheticWorld {
            entities,
            relations,
            facts,
            seed,
        })
    }

    pub fn active(&self, subject: usize, relation: usize, object: usize) -> String {
        format!(
            "{} {} {} .",
            self.entities[subject], self.relations[relation].active, self.entities[object]
        )
    }

    pub fn passive(&self, subject: usize, relation: usize, object: usize) -> String {
        format!(
            "{} is {} by {} .",
            self.entities[object], self.relations[relation].passive, self.entities[subject]
        )
    }

    fn render(&self, f: Fact, passive: bool) -> String {
        if passive {
            self.passive(f.subject, f.relation, f.object)
        } else {
            self.active(f.subject, f.relation, f.object)
        }
    }
}

fn default_choices() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQaConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_questions: usize,
    pub n_distractors: usize,
    /// When set, each question draws its distractor count uniformly from
    /// `n_distractors..=max_distractors`.
    #[serde(default)]
    pub max_distractors: Option<usize>,
    #[serde(default = "default_choices")]
    pub n_choices: usize,
    pub seed: u64,
    #[serde(default)]
    pub contiguous: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Half {
    /// `x is <r1> by a`
    Left,
    /// `x <r2> z`
    Right,
}

/// Generates two-hop questions; see the module docs for the construction.
pub fn gen_synthetic_qa(config: &SyntheticQaConfig) -> Result<Vec<QaRecord>> {
    if config.n_distractors < 1 {
        return Err(MulteeError::Generation("need at least one distractor".into()));
    }
    if config.n_choices < 2 {
        return Err(MulteeError::Generation("need at least two choices".into()));
    }
    if config.n_relations < 3 {
        return Err(MulteeError::Generation(format!(
            "need at least 3 relations, got {}",
            config.n_relations
        )));
    }
    let world = SyntheticWorld::generate(config.n_entities, config.n_relations, 0, config.seed)?;
    let max_distractors = config.max_distractors.unwrap_or(config.n_distractors);
    if max_distractors < config.n_distractors {
        return Err(MulteeError::Generation(format!(
            "max_distractors {max_distractors} is below n_distractors {}",
            config.n_distractors
        )));
    }
    let n_wrong = config.n_choices - 1;
    let n_noise = max_distractors.saturating_sub(n_wrong);
    let needed = 2 + config.n_choices + 2 * n_noise;
    if config.n_entities < needed {
        return Err(MulteeError::Generation(format!(
            "{} entities cannot keep {} choices, 2 anchors and {} noise sentences distinct (need {needed})",
            config.n_entities, config.n_choices, n_noise
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_9a);
    let ent = |i: usize| world.entities[i].as_str();
    let mut out = Vec::with_capacity(config.n_questions);
    for q in 0..config.n_questions {
        let n_distractors = match config.max_distractors {
            Some(max) => rng.gen_range(config.n_distractors..=max),
            None => config.n_distractors,
        };
        let n_noise = n_distractors.saturating_sub(n_wrong);
        let mut pool: Vec<usize> = (0..config.n_entities).collect();
        pool.shuffle(&mut rng);
        let (a, z, answer) = (pool[0], pool[1], pool[2]);
        let wrong = &pool[3..3 + n_wrong];
        let fresh = &pool[3 + n_wrong..];

        let mut rels: Vec<usize> = (0..config.n_relations).collect();
        rels.shuffle(&mut rng);
        let (r1, r2, r3) = (rels[0], rels[1], rels[2]);
        let rel = &world.relations;
        let left = |x: usize| format!("{} is {} by {} .", ent(x), rel[r1].passive, ent(a));
        let right = |x: usize| format!("{} {} {} .", ent(x), rel[r2].active, ent(z));

        let mut premises: Vec<(String, u8)> = vec![(left(answer), 1), (right(answer), 1)];

        let supported = n_wrong.min(n_distractors);
        let mut halves: Vec<Half> = (0..supported)
            .map(|i| match i {
                0 => Half::Left,
                1 => Half::Right,
                _ if rng.gen_bool(0.5) => Half::Left,
                _ => Half::Right,
            })
            .collect();
        halves.shuffle(&mut rng);
        for (&d, half) in wrong.iter().zip(&halves) {
            let text = match half {
                Half::Left => left(d),
                Half::Right => right(d),
            };
            premises.push((text, 0));
        }
        for k in 0..n_noise {
            let (e, f) = (fresh[2 * k], fresh[2 * k + 1]);
            let text = match rng.gen_range(0..4) {
                0 => format!("{} is {} by {} .", ent(e), rel[r1].passive, ent(f)),
                1 => format!("{} {} {} .", ent(e), rel[r2].active, ent(f)),
                2 => format!("{} is {} by {} .", ent(e), rel[r3].passive, ent(a)),
                _ => format!("{} {} {} .", ent(e), rel[r3].active, ent(z)),
            };
            premises.push((text, 0));
        }
        premises.shuffle(&mut rng);

        let mut choices: Vec<usize> = std::iter::once(answer).chain(wrong.iter().copied()).collect();
        choices.shuffle(&mut rng);
        let gold = choices.iter().position(|&c| c == answer).expect("answer is a choice");
        let question = format!(
            "Who is {} by {} and {} {}?",
            rel[r1].passive,
            ent(a),
            rel[r2].active,
            ent(z)
        );
        let choice_texts: Vec<String> = choices.iter().map(|&c| ent(c).to_string()).collect();
        let hypotheses = choice_texts
            .iter()
            .map(|c| marked_hypothesis(&question, c))
            .collect::<Result<Vec<_>>>()?;
        out.push(QaRecord {
            id: Some(format!("syn-{}-{q}", config.seed)),
            question,
            choices: choice_texts,
            premises: premises.iter().map(|(p, _)| p.clone()).collect(),
            gold: vec![gold],
            relevance_labels: Some(premises.iter().map(|&(_, y)| y).collect()),
            hypotheses: Some(hypotheses),
            contiguous: config.contiguous,
            task_type: TaskType::SingleCorrect,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNliConfig {
    pub n_examples: usize,
    pub seed: u64,
}

/// Class-balanced sentence pairs over the facts of `world`.
pub fn gen_synthetic_nli(config: &SyntheticNliConfig, world: &SyntheticWorld) -> Result<Vec<NliRecord>> {
    if world.facts.len() < 2 || world.entities.len() < 3 {
        return Err(MulteeError::Generation(
            "world needs at least 2 facts and 3 entities".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.n_examples);
    for i in 0..config.n_examples {
        let label = NliLabel::ALL[i % 3];
        let fact = *world.facts.choose(&mut rng).expect("non-empty");
        let premise_passive = rng.gen_bool(0.5);
        let premise = world.render(fact, premise_passive);
        let hyp_fact = match label {
            NliLabel::Entailment => fact,
            NliLabel::Contradiction => {
                let object = loop {
                    let o = rng.gen_range(0..world.entities.len());
                    if o != fact.object && o != fact.subject {
                        break o;
                    }
                };
                Fact { object, ..fact }
            }
            NliLabel::Neutral => loop {
                let other = *world.facts.choose(&mut rng).expect("non-empty");
                if (other.subject, other.relation) != (fact.subject, fact.relation) {
                    break other;
                }
            },
        };
        let hyp_passive = match label {
            // paraphrase: flip the template half of the time
            NliLabel::Entailment => premise_passive ^ rng.gen_bool(0.5),
            _ => rng.gen_bool(0.5),
        };
        out.push(NliRecord {
            premise,
            hypothesis: world.render(hyp_fact, hyp_passive),
            label,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}
