//! Seeded multi-domain Markov token streams.

use moue_core::Seed;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

/// Successor weights of every token in a domain, sparse and peaked so the
/// streams are learnable.
const SUCCESSOR_WEIGHTS: [f64; 3] = [0.7, 0.2, 0.1];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    vocab: usize,
    seed: Seed,
    /// `tables[domain][token]` lists `(successor, weight)`.
    tables: Vec<Vec<(Vec<usize>, WeightedIndex<f64>)>>,
}

/// Token sequences plus the domain each was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub domains: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn new(vocab: usize, domains: usize, seed: Seed) -> Self {
        let mut rng = seed.derive(0).rng();
        let width = SUCCESSOR_WEIGHTS.len().min(vocab);
        let tables = (0..domains)
            .map(|_| {
                (0..vocab)
                    .map(|_| {
                        let mut all: Vec<usize> = (0..vocab).collect();
                        all.shuffle(&mut rng);
                        all.truncate(width);
                        let dist = WeightedIndex::new(&SUCCESSOR_WEIGHTS[..width]).expect("positive weights");
                        (all, dist)
                    })
                    .collect()
            })
            .collect();
        Self { vocab, seed, tables }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_domains(&self) -> usize {
        self.tables.len()
    }

    /// Batch `index` of a stream; the same index always yields the same batch.
    pub fn batch(&self, stream: u64, index: u64, size: usize, seq_len: usize) -> Batch {
        let mut rng = self.seed.derive(1 + stream).derive(index).rng();
        let mut tokens = Vec::with_capacity(size);
        let mut domains = Vec::with_capacity(size);
        for _ in 0..size {
            let domain = rng.gen_range(0..self.tables.len());
            tokens.push(self.sequence(domain, seq_len, &mut rng));
            domains.push(domain);
        }
        Batch { tokens, domains }
    }

    /// One sequence of a fixed domain.
    pub fn sequence(&self, domain: usize, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let table = &self.tables[domain];
        let mut seq = Vec::with_capacity(len);
        let mut tok = rng.gen_range(0..self.vocab);
        for _ in 0..len {
            seq.push(tok);
            let (succ, dist) = &table[tok];
            tok = succ[dist.sample(rng)];
        }
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_in_range() {
        let a = SyntheticCorpus::new(20, 3, Seed(5));
        let b = SyntheticCorpus::new(20, 3, Seed(5));
        assert_eq!(a.batch(0, 7, 4, 12), b.batch(0, 7, 4, 12));
        assert_ne!(a.batch(0, 7, 4, 12), a.batch(0, 8, 4, 12));
        assert_ne!(a.batch(0, 7, 4, 12), a.batch(1, 7, 4, 12));
        let batch = a.batch(0, 0, 16, 30);
        assert!(batch.tokens.iter().flatten().all(|&t| t < 20));
        assert!(batch.domains.iter().all(|&d| d < 3));
    }

    #[test]
    fn domains_differ() {
        let c = SyntheticCorpus::new(16, 2, Seed(9));
        let succ = |d: usize| c.tables[d].iter().map(|(s, _)| s.clone()).collect::<Vec<_>>();
        assert_ne!(succ(0), succ(1));
    }

    #[test]
    fn tiny_vocab() {
        let c = SyntheticCorpus::new(1, 1, Seed(0));
        assert_eq!(c.batch(0, 0, 2, 3).tokens, vec![vec![0; 3]; 2]);
    }
}
