use rand::Rng;

use crate::error::{Error, Result};

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Distinct responses of a corpus, for corpus-uniform negative sampling.
#[derive(Clone, Debug)]
pub struct NegativePool {
    responses: Vec<String>,
}

impl NegativePool {
    pub fn new<'a>(responses: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for r in responses {
            let n = normalize(r);
            if seen.insert(n.clone()) {
                out.push(n);
            }
        }
        if out.len() < 2 {
            return Err(Error::Data("need at least two distinct responses".into()));
        }
        Ok(Self { responses: out })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Uniform over pool entries whose token sequence differs from
    /// `positive`; draws again on a collision.
    pub fn sample<R: Rng + ?Sized>(&self, positive: &str, rng: &mut R) -> &str {
        let positive = normalize(positive);
        loop {
            let r = &self.responses[rng.gen_range(0..self.responses.len())];
            if *r != positive {
                return r;
            }
        }
    }
}

/// One-shot form of [`NegativePool::sample`].
pub fn sample_negative<'a, R: Rng + ?Sized>(
    corpus: &'a [String],
    positive: &str,
    rng: &mut R,
) -> Result<String> {
    let pool = NegativePool::new(corpus.iter().map(String::as_str))?;
    Ok(pool.sample(positive, rng).to_string())
}
