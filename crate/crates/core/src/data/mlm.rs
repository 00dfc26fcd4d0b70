use rand::Rng;

use super::encode::EncodedInput;
use super::vocab::{Vocab, MASK};

/// A masked copy of an input with the positions to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub input: EncodedInput,
    pub positions: Vec<usize>,
    /// Original token at each masked position.
    pub targets: Vec<usize>,
}

/// Selects each non-reserved token with probability `rate`. A selected
/// token becomes `[MASK]` with probability 0.8, a uniformly drawn
/// non-reserved token with probability 0.1, and stays unchanged otherwise.
pub fn mlm_mask<R: Rng + ?Sized>(
    input: &EncodedInput,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Masked {
    let first_word = super::vocab::SPECIALS.len();
    let mut out = input.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, tok) in out.token_ids.iter_mut().enumerate() {
        if Vocab::is_special(*tok) || rng.gen::<f64>() >= rate {
            continue;
        }
        positions.push(i);
        targets.push(*tok);
        let u: f64 = rng.gen();
        if u < 0.8 {
            *tok = MASK;
        } else if u < 0.9 && vocab_size > first_word {
            *tok = rng.gen_range(first_word..vocab_size);
        }
    }
    Masked {
        input: out,
        positions,
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode::{encode_ids, SegmentScheme, Slot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn long_input(n: usize) -> EncodedInput {
        let words: Vec<usize> = (0..n).map(|i| 12 + i % 50).collect();
        encode_ids(&[], &[words], &[12], &SegmentScheme::default(), n + 8, Slot::Cls).unwrap()
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let inp = long_input(100);
        let m = mlm_mask(&inp, 0.0, 62, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(m.positions.is_empty());
        assert_eq!(m.input, inp);
    }

    #[test]
    fn masked_fraction_tracks_rate() {
        let inp = long_input(10_000);
        let m = mlm_mask(&inp, 0.15, 62, &mut ChaCha8Rng::seed_from_u64(1));
        let words = inp.token_ids.iter().filter(|&&t| !Vocab::is_special(t)).count();
        let frac = m.positions.len() as f64 / words as f64;
        assert!((frac - 0.15).abs() < 0.02, "{frac}");
        let replaced = m.positions.iter().filter(|&&p| m.input.token_ids[p] == MASK).count();
        let share = replaced as f64 / m.positions.len() as f64;
        assert!((share - 0.8).abs() < 0.05, "{share}");
    }

    #[test]
    fn specials_are_never_masked() {
        let inp = long_input(200);
        let m = mlm_mask(&inp, 0.99, 62, &mut ChaCha8Rng::seed_from_u64(2));
        for (i, &t) in inp.token_ids.iter().enumerate() {
            if Vocab::is_special(t) {
                assert!(!m.positions.contains(&i));
                assert_eq!(m.input.token_ids[i], t);
            }
        }
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(inp.token_ids[p], t);
        }
    }
}
