use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{CoreMode, InteractionCorpus, RawSequence, DEFAULT_MIN_CORE};

/// Probability of following the primary successor.
pub const PRIMARY_PROB: f64 = 0.9;

/// Sparse first-order chain: item `i` moves to `primary[i]` with
/// probability 0.9 and to `secondary[i]` otherwise.
///
/// The primary successors form a single cycle through every item, so a
/// long walk visits the whole catalog. Index 0 is unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkovChain {
    pub num_items: usize,
    pub primary: Vec<u32>,
    pub secondary: Vec<u32>,
}

impl MarkovChain {
    pub fn new<R: Rng + ?Sized>(num_items: usize, rng: &mut R) -> Self {
        let mut cycle: Vec<u32> = (1..=num_items as u32).collect();
        cycle.shuffle(rng);
        let mut primary = vec![0; num_items + 1];
        for w in 0..num_items {
            primary[cycle[w] as usize] = cycle[(w + 1) % num_items];
        }
        let mut secondary = vec![0; num_items + 1];
        for i in 1..=num_items {
            secondary[i] = loop {
                let c = rng.random_range(1..=num_items as u32);
                if c as usize != i && c != primary[i] {
                    break c;
                }
            };
        }
        MarkovChain {
            num_items,
            primary,
            secondary,
        }
    }

    /// Transition probabilities out of `item`, indexed by item id.
    pub fn transition_row(&self, item: u32) -> Vec<f64> {
        let mut row = vec![0.0; self.num_items + 1];
        row[self.primary[item as usize] as usize] += PRIMARY_PROB;
        row[self.secondary[item as usize] as usize] += 1.0 - PRIMARY_PROB;
        row
    }

    pub fn step<R: Rng + ?Sized>(&self, from: u32, rng: &mut R) -> u32 {
        if rng.random::<f64>() < PRIMARY_PROB {
            self.primary[from as usize]
        } else {
            self.secondary[from as usize]
        }
    }

    /// Walk of `len` items from a uniformly drawn start.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.random_range(1..=self.num_items as u32);
        for _ in 0..len {
            out.push(cur);
            cur = self.step(cur, rng);
        }
        out
    }
}

/// Synthetic corpus of Markov walks, passed through the default 5-core
/// filter so it satisfies the usual corpus invariants.
pub fn synth_markov(num_users: usize, num_items: usize, seq_len: usize, seed: u64) -> Result<InteractionCorpus> {
    if num_items < 10 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 10 items, got {num_items}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::new(num_items, &mut rng);
    let seqs = (0..num_users)
        .map(|u| RawSequence {
            user: format!("u{u}"),
            items: chain
                .sample(seq_len, &mut rng)
                .into_iter()
                .map(|i| i.to_string())
                .collect(),
        })
        .collect();
    InteractionCorpus::build(seqs, DEFAULT_MIN_CORE, CoreMode::Fixpoint)
}

/// Replaces each training-portion interaction with a uniformly random item
/// with probability `rate`. The last two items of every user (the
/// validation and test targets) are left untouched.
pub fn inject_noise(corpus: &InteractionCorpus, rate: f64, seed: u64) -> InteractionCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = corpus.clone();
    for u in &mut out.users {
        let n = u.items.len();
        for it in u.items.iter_mut().take(n.saturating_sub(2)) {
            if rng.random::<f64>() < rate {
                *it = rng.random_range(1..=corpus.num_items as u32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_rows_are_distributions() {
        let chain = MarkovChain::new(25, &mut ChaCha8Rng::seed_from_u64(1));
        for i in 1..=25 {
            let row = chain.transition_row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert_eq!(row[0], 0.0);
        }
    }

    #[test]
    fn primary_successors_form_one_cycle() {
        let chain = MarkovChain::new(30, &mut ChaCha8Rng::seed_from_u64(2));
        let mut cur = 1u32;
        let mut seen = std::collections::HashSet::new();
        for _ in 0..30 {
            assert!(seen.insert(cur));
            cur = chain.primary[cur as usize];
        }
        assert_eq!(cur, 1);
    }

    #[test]
    fn empirical_bigrams_match_transition_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = MarkovChain::new(50, &mut rng);
        let walk = chain.sample(100_001, &mut rng);
        let mut primary = 0usize;
        let mut secondary = 0usize;
        for w in walk.windows(2) {
            if w[1] == chain.primary[w[0] as usize] {
                primary += 1;
            } else {
                assert_eq!(w[1], chain.secondary[w[0] as usize]);
                secondary += 1;
            }
        }
        let total = (primary + secondary) as f64;
        assert!((primary as f64 / total - 0.9).abs() < 0.02);
        assert!((secondary as f64 / total - 0.1).abs() < 0.02);
    }

    #[test]
    fn regeneration_is_identical() {
        let a = synth_markov(40, 20, 12, 7).unwrap();
        let b = synth_markov(40, 20, 12, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_markov(40, 20, 12, 8).unwrap());
    }

    #[test]
    fn standard_synthetic_corpus_survives_filtering() {
        let c = synth_markov(200, 50, 20, 7).unwrap();
        assert_eq!(c.users.len(), 200);
        assert_eq!(c.num_items, 50);
        assert_eq!(c.num_actions(), 4000);
    }

    #[test]
    fn noise_spares_held_out_items() {
        let c = synth_markov(50, 20, 10, 1).unwrap();
        let noisy = inject_noise(&c, 1.0, 2);
        for (a, b) in c.users.iter().zip(&noisy.users) {
            assert_eq!(a.items[8..], b.items[8..]);
        }
        assert_ne!(c, noisy);
    }
}
