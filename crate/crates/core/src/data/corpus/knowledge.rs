//! Knowledge-grounded grammar.
//!
//! The user asks about a person. Three facts are attached: two about that
//! person and one about somebody else, one fact per relation. The response
//! restates one of the two applicable facts, so its slot value can only be
//! known by reading the knowledge segment.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::sample::DialogueSample;

pub const PEOPLE: [&str; 12] = [
    "alice", "bruno", "chloe", "dmitri", "elena", "farid", "greta", "hugo", "ines", "jonas",
    "kemal", "lucia",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Origin,
    Instrument,
    Food,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Origin, Relation::Instrument, Relation::Food];

    pub fn values(self) -> [&'static str; 8] {
        match self {
            Relation::Origin => ["lima", "oslo", "quito", "dakar", "hanoi", "perth", "kyiv", "accra"],
            Relation::Instrument => [
                "violin", "drums", "flute", "cello", "harp", "banjo", "tuba", "piano",
            ],
            Relation::Food => [
                "mango", "bagels", "tofu", "lentils", "dumplings", "waffles", "olives", "figs",
            ],
        }
    }

    fn template(self) -> &'static str {
        match self {
            Relation::Origin => "{p} comes from {v}",
            Relation::Instrument => "{p} plays the {v}",
            Relation::Food => "{p} eats {v} every day",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub person: &'static str,
    pub relation: Relation,
    pub value: &'static str,
}

impl Fact {
    pub fn text(&self) -> String {
        self.relation
            .template()
            .replace("{p}", self.person)
            .replace("{v}", self.value)
    }
}

fn question(person: &str) -> String {
    format!("tell me something about {person}")
}

fn answer(fact: &Fact) -> String {
    format!("i heard that {}", fact.text())
}

/// Person named in the final context turn.
pub fn asked_person(context: &[String]) -> Option<&'static str> {
    let last = context.last()?;
    PEOPLE.into_iter().find(|p| *last == question(p))
}

/// Slot values that count as grounded for this sample: the values of the
/// attached facts about the asked person.
pub fn applicable_values(sample: &DialogueSample) -> Vec<&'static str> {
    let Some(person) = asked_person(&sample.context) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for k in &sample.knowledge {
        for r in Relation::ALL {
            for v in r.values() {
                let f = Fact {
                    person,
                    relation: r,
                    value: v,
                };
                if *k == f.text() {
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Slot values mentioned by a response, in word order.
pub fn mentioned_values(response: &str) -> Vec<&'static str> {
    response
        .split_whitespace()
        .filter_map(|w| Relation::ALL.iter().flat_map(|r| r.values()).find(|v| *v == w))
        .collect()
}

/// First slot value mentioned by a response, if any.
pub fn mentioned_value(response: &str) -> Option<&'static str> {
    mentioned_values(response).into_iter().next()
}

pub fn all_texts() -> Vec<String> {
    let mut out: Vec<String> = PEOPLE.iter().map(|p| question(p)).collect();
    for r in Relation::ALL {
        for v in r.values() {
            out.push(answer(&Fact {
                person: PEOPLE[0],
                relation: r,
                value: v,
            }));
        }
    }
    out.extend(PEOPLE.iter().map(|p| p.to_string()));
    out
}

pub fn gen_knowledge_corpus(seed: u64, n: usize) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| one_sample(&mut rng)).collect()
}

fn one_sample<R: Rng>(rng: &mut R) -> DialogueSample {
    let mut people: Vec<&'static str> = PEOPLE.to_vec();
    people.shuffle(rng);
    let (person, other) = (people[0], people[1]);
    let mut rels = Relation::ALL.to_vec();
    rels.shuffle(rng);
    let fact = |p: &'static str, r: Relation, rng: &mut R| Fact {
        person: p,
        relation: r,
        value: *r.values().choose(rng).expect("values"),
    };
    let applicable = [fact(person, rels[0], rng), fact(person, rels[1], rng)];
    // The distractor takes the relation the asked person lacks, so each
    // relation occurs once per sample.
    let distractor = fact(other, rels[2], rng);
    let chosen = &applicable[rng.gen_range(0..2)];
    let response = answer(chosen);
    let mut knowledge: Vec<String> = applicable
        .iter()
        .chain(std::iter::once(&distractor))
        .map(Fact::text)
        .collect();
    knowledge.shuffle(rng);
    DialogueSample::new(vec![question(person)], response).with_knowledge(knowledge)
}
