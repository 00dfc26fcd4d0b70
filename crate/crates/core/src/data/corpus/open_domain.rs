//! One-to-many chit-chat grammar.
//!
//! A context is a statement or question about one topic. Its family fixes
//! four admissible response acts; the sampled act is the ground-truth
//! cluster. An optional leading cue turn names the act, which turns the
//! sample into a one-to-one mapping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::sample::DialogueSample;

pub const CLUSTERS: usize = 4;

pub const TOPICS: [&str; 16] = [
    "jazz", "rock", "blues", "opera", "pizza", "sushi", "curry", "noodles", "tennis", "soccer",
    "chess", "hockey", "paris", "tokyo", "rome", "cairo",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Preference,
    Experience,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Preference, Family::Experience];

    fn context_templates(self) -> [&'static str; 3] {
        match self {
            Family::Preference => [
                "do you like {t}",
                "what do you think about {t}",
                "how do you feel about {t}",
            ],
            Family::Experience => [
                "i spent the weekend with {t}",
                "yesterday i tried {t} for the first time",
                "my friend keeps talking about {t}",
            ],
        }
    }

    /// Response template per local cluster. First words are unique across
    /// all eight acts.
    fn response_templates(self) -> [&'static str; CLUSTERS] {
        match self {
            Family::Preference => [
                "absolutely i love {t} so much",
                "nope {t} bores me",
                "why ask me about {t}",
                "maybe {t} is okay sometimes",
            ],
            Family::Experience => [
                "wow {t} sounds great",
                "oh no not {t} again",
                "tell me more about {t} please",
                "cool i also enjoy {t}",
            ],
        }
    }

    fn cues(self) -> [&'static str; CLUSTERS] {
        ["be warm", "be grumpy", "be curious", "be calm"]
    }
}

fn fill(template: &str, topic: &str) -> String {
    template.replace("{t}", topic)
}

/// A parsed context: family, template index and topic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContextKind {
    pub family: Family,
    pub template: usize,
    pub topic: &'static str,
}

impl ContextKind {
    /// Every distinct context of the grammar.
    pub fn all() -> Vec<ContextKind> {
        let mut out = Vec::new();
        for family in Family::ALL {
            for template in 0..3 {
                for topic in TOPICS {
                    out.push(ContextKind {
                        family,
                        template,
                        topic,
                    });
                }
            }
        }
        out
    }

    pub fn text(&self) -> String {
        fill(self.family.context_templates()[self.template], self.topic)
    }

    pub fn response(&self, cluster: usize) -> String {
        fill(self.family.response_templates()[cluster], self.topic)
    }

    /// Recovers the kind from the final context turn.
    pub fn parse(turn: &str) -> Option<ContextKind> {
        ContextKind::all().into_iter().find(|k| k.text() == turn)
    }

    /// Cluster of `response` if it is admissible for this context.
    pub fn cluster_of(&self, response: &str) -> Option<usize> {
        let norm = response.split_whitespace().collect::<Vec<_>>().join(" ");
        (0..CLUSTERS).find(|&c| self.response(c) == norm)
    }

    pub fn sample(&self, cluster: usize, cued: bool) -> DialogueSample {
        let mut context = Vec::with_capacity(2);
        if cued {
            context.push(self.family.cues()[cluster].to_string());
        }
        context.push(self.text());
        let mut s = DialogueSample::new(context, self.response(cluster));
        s.cluster_id = Some(cluster);
        s
    }
}

/// Cluster of `response` given the sample's context, or `None` when the
/// response is not admissible there.
pub fn response_cluster(context: &[String], response: &str) -> Option<usize> {
    ContextKind::parse(context.last()?)?.cluster_of(response)
}

/// Any surface form of any response act; used to build vocabularies.
pub fn all_texts() -> Vec<String> {
    let mut out = Vec::new();
    for k in ContextKind::all() {
        out.push(k.text());
        out.extend((0..CLUSTERS).map(|c| k.response(c)));
    }
    out.extend(Family::Preference.cues().iter().map(|s| s.to_string()));
    out
}

/// `n` samples; each carries a cue turn with probability `cue_fraction`.
/// Contexts are drawn uniformly from `kinds`, clusters uniformly.
pub fn gen_open_domain_from(
    seed: u64,
    n: usize,
    kinds: &[ContextKind],
    cue_fraction: f64,
) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let kind = kinds.choose(&mut rng).expect("non-empty context set");
            let cluster = rng.gen_range(0..CLUSTERS);
            let cued = rng.gen::<f64>() < cue_fraction;
            kind.sample(cluster, cued)
        })
        .collect()
}

/// Train and held-out context kinds. A quarter of the kinds is held out;
/// each topic and each template still occurs in both parts.
pub fn split_kinds() -> (Vec<ContextKind>, Vec<ContextKind>) {
    ContextKind::all().into_iter().partition(|k| {
        let topic = TOPICS.iter().position(|t| *t == k.topic).expect("known topic");
        topic % 4 != k.template
    })
}

/// Replaces the response of each sample, with probability `fraction`, by
/// the response of a uniformly drawn sample. `cluster_id` is recomputed and
/// is `None` wherever the swapped response is inadmissible.
pub fn with_response_noise(
    mut samples: Vec<DialogueSample>,
    fraction: f64,
    seed: u64,
) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responses: Vec<String> = samples.iter().map(|s| s.response.clone()).collect();
    for s in &mut samples {
        if rng.gen::<f64>() < fraction {
            s.response = responses[rng.gen_range(0..responses.len())].clone();
            s.cluster_id = response_cluster(&s.context, &s.response);
        }
    }
    samples
}

/// Uncued one-to-many samples over every context.
pub fn gen_open_domain_corpus(seed: u64, n: usize) -> Vec<DialogueSample> {
    gen_open_domain_from(seed, n, &ContextKind::all(), 0.0)
}

/// Cued samples only: the response is a function of the context.
pub fn gen_open_domain_deterministic(seed: u64, n: usize) -> Vec<DialogueSample> {
    gen_open_domain_from(seed, n, &ContextKind::all(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn acts_have_unique_first_words() {
        let firsts: HashSet<&str> = Family::ALL
            .iter()
            .flat_map(|f| f.response_templates())
            .map(|t| t.split(' ').next().unwrap())
            .collect();
        assert_eq!(firsts.len(), 2 * CLUSTERS);
    }

    #[test]
    fn every_response_is_admissible() {
        for s in gen_open_domain_corpus(3, 2000) {
            assert_eq!(response_cluster(&s.context, &s.response), s.cluster_id);
            assert!(s.cluster_id.is_some());
        }
    }

    #[test]
    fn cluster_frequencies_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut counts = [0f64; CLUSTERS];
        for s in gen_open_domain_corpus(11, 10_000) {
            counts[s.cluster_id.unwrap()] += 1.0;
        }
        let expect = 10_000.0 / CLUSTERS as f64;
        let stat: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
        let p = 1.0 - ChiSquared::new((CLUSTERS - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn enough_distinct_contexts() {
        let distinct: HashSet<String> = gen_open_domain_corpus(5, 5000)
            .into_iter()
            .map(|s| s.context.join(" | "))
            .collect();
        assert!(distinct.len() >= 50, "{}", distinct.len());
    }

    #[test]
    fn cue_determines_the_response() {
        for s in gen_open_domain_deterministic(7, 500) {
            let cue = Family::Preference.cues()[s.cluster_id.unwrap()];
            assert_eq!(s.context[0], cue);
        }
    }

    #[test]
    fn split_is_a_partition_sharing_topics_and_templates() {
        let (train, held) = split_kinds();
        assert_eq!(train.len() + held.len(), 96);
        assert_eq!(held.len(), 24);
        assert!(held.iter().all(|k| !train.contains(k)));
        // Held-out kinds are new combinations of seen parts.
        for h in &held {
            assert!(train.iter().any(|k| k.topic == h.topic));
            assert!(train.iter().any(|k| k.family == h.family && k.template == h.template));
        }
        for t in TOPICS {
            assert!(train.iter().any(|k| k.topic == t));
        }
    }

    #[test]
    fn noise_keeps_contexts_and_marks_swaps() {
        let clean = gen_open_domain_corpus(4, 2000);
        let noisy = with_response_noise(clean.clone(), 0.25, 1);
        let mut swapped = 0;
        for (a, b) in clean.iter().zip(&noisy) {
            assert_eq!(a.context, b.context);
            assert_eq!(response_cluster(&b.context, &b.response), b.cluster_id);
            swapped += usize::from(b.cluster_id.is_none());
        }
        // Swaps land on another context kind almost always.
        assert!((350..650).contains(&swapped), "{swapped}");
        assert_eq!(with_response_noise(clean.clone(), 0.0, 1), clean);
    }

    #[test]
    fn seed_determinism() {
        assert_eq!(gen_open_domain_corpus(9, 50), gen_open_domain_corpus(9, 50));
        assert_ne!(gen_open_domain_corpus(9, 50), gen_open_domain_corpus(10, 50));
    }
}
