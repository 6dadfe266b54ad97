//! Frozen bag-of-tokens sentence encoder.
//!
//! Every token id owns a fixed pseudo-random code vector drawn from a seeded
//! stream; a sentence is the L2-normalized mean of its token codes. Nothing
//! here is trainable.

use std::hash::{Hash, Hasher};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seeding;

/// Unit-norm sentence embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding(pub Vec<f64>);

impl SentenceEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecialSentence {
    Cls,
    Sep,
    Mask,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    dim: usize,
    seed: u64,
    codes: Vec<Vec<f64>>,
    specials: [SentenceEmbedding; 3],
}

impl TextEncoder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, seeding::TAG_TEXT_TABLE, 0);
        let mut draw = || -> Vec<f64> {
            (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let codes = (0..vocab_size).map(|_| draw()).collect();
        let specials = [normalized(draw()), normalized(draw()), normalized(draw())];
        Self {
            dim,
            seed,
            codes,
            specials,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.codes.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<SentenceEmbedding> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty sentence".into()));
        }
        let mut sum = vec![0.0; self.dim];
        for &t in tokens {
            let code = self.codes.get(t as usize).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "token {t} outside vocabulary of {}",
                    self.codes.len()
                ))
            })?;
            for (s, c) in sum.iter_mut().zip(code) {
                *s += c;
            }
        }
        let n = tokens.len() as f64;
        Ok(normalized(sum.into_iter().map(|v| v / n).collect()))
    }

    pub fn special(&self, kind: SpecialSentence) -> &SentenceEmbedding {
        match kind {
            SpecialSentence::Cls => &self.specials[0],
            SpecialSentence::Sep => &self.specials[1],
            SpecialSentence::Mask => &self.specials[2],
        }
    }

    /// Hash over the exact bits of the code table and special vectors.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.codes.iter().chain(self.specials.iter().map(|s| &s.0)) {
            for x in v {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn normalized(mut v: Vec<f64>) -> SentenceEmbedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    SentenceEmbedding(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enc() -> TextEncoder {
        TextEncoder::new(64, 64, 0x5EED)
    }

    #[test]
    fn single_token_is_its_normalized_code() {
        let e = enc();
        let s = e.encode(&[7]).unwrap();
        let code = normalized(e.codes[7].clone());
        assert_eq!(s, code);
    }

    #[test]
    fn order_does_not_matter() {
        let e = enc();
        assert_eq!(e.encode(&[3, 9]).unwrap(), e.encode(&[9, 3]).unwrap());
    }

    #[test]
    fn errors() {
        let e = enc();
        assert!(e.encode(&[]).is_err());
        assert!(e.encode(&[64]).is_err());
    }

    #[test]
    fn specials_are_fixed_distinct_unit_vectors() {
        let e = enc();
        let again = enc();
        assert_eq!(e.special(SpecialSentence::Cls), again.special(SpecialSentence::Cls));
        let kinds = [SpecialSentence::Cls, SpecialSentence::Sep, SpecialSentence::Mask];
        for (i, a) in kinds.iter().enumerate() {
            assert!((e.special(*a).norm() - 1.0).abs() < 1e-12);
            for b in &kinds[i + 1..] {
                let c = cosine(&e.special(*a).0, &e.special(*b).0);
                assert!(c < 0.99, "{a:?}/{b:?} cosine {c}");
            }
        }
    }

    #[test]
    fn same_seed_same_table() {
        assert_eq!(enc().checksum(), enc().checksum());
        assert_ne!(enc().checksum(), TextEncoder::new(64, 64, 1).checksum());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn encoded_sentences_have_unit_norm(tokens in proptest::collection::vec(0u32..64, 1..12)) {
            let s = enc().encode(&tokens).unwrap();
            prop_assert!((s.norm() - 1.0).abs() <= 1e-6);
        }
    }
}
