//! Domain-balanced batch sampling.
//!
//! Every training batch must contain the same number of samples from each
//! domain, whatever the per-domain dataset sizes are; smaller domains cycle
//! (with a fresh shuffle per pass) rather than truncating larger ones. The
//! sampler hands out *indices* — group your loaded samples with
//! [`crate::manifest::indices_by_domain`] and look the batch entries up in
//! the same `Vec`.
//!
//! State is serialisable so a checkpointed run resumes the stream at the
//! exact batch where it stopped.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DomainCursor {
    /// Sample indices belonging to this domain, in manifest order.
    indices: Vec<usize>,
    /// Current pass through `indices`, shuffled.
    order: Vec<usize>,
    /// Next position within `order`.
    cursor: usize,
    /// How many passes have been started; keys the per-pass shuffle stream.
    round: u64,
}

/// Emits an endless stream of balanced batches over per-domain index lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSampler {
    seed: u64,
    per_domain: usize,
    domains: Vec<DomainCursor>,
}

impl BalancedSampler {
    /// `by_domain[d]` lists the sample indices of domain `d`. The batch size
    /// must divide evenly across domains and every domain must be non-empty.
    pub fn new(by_domain: &[Vec<usize>], batch_size: usize, seed: u64) -> Result<Self> {
        let n_domains = by_domain.len();
        if n_domains < 2 {
            return Err(Error::TooFewDomains(n_domains));
        }
        if batch_size == 0 {
            return Err(Error::ZeroField { field: "batch_size" });
        }
        if batch_size % n_domains != 0 {
            return Err(Error::BatchNotDivisible { batch_size, n_domains });
        }
        let per_domain = batch_size / n_domains;
        for (d, indices) in by_domain.iter().enumerate() {
            if indices.is_empty() {
                return Err(Error::DomainTooSmall {
                    domain: d.to_string(),
                    split: "train",
                    n: 0,
                    need: per_domain,
                });
            }
        }
        Ok(BalancedSampler {
            seed,
            per_domain,
            domains: by_domain
                .iter()
                .map(|indices| DomainCursor {
                    indices: indices.clone(),
                    order: Vec::new(),
                    cursor: 0,
                    round: 0,
                })
                .collect(),
        })
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// Samples drawn from each domain per batch.
    pub fn per_domain(&self) -> usize {
        self.per_domain
    }

    /// Batches needed for one pass over the *largest* domain — the natural
    /// epoch length when every sample should be seen at least once.
    pub fn batches_per_pass(&self) -> usize {
        let largest = self.domains.iter().map(|d| d.indices.len()).max().unwrap();
        largest.div_ceil(self.per_domain)
    }

    /// The next batch: domain-major, `per_domain` indices from domain 0,
    /// then domain 1, and so on. Exhausted domains reshuffle and continue,
    /// so a batch may straddle two passes of a small domain.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.per_domain * self.domains.len());
        for d in 0..self.domains.len() {
            for _ in 0..self.per_domain {
                batch.push(self.draw(d));
            }
        }
        batch
    }

    fn draw(&mut self, d: usize) -> usize {
        let seed = self.seed;
        let dom = &mut self.domains[d];
        if dom.cursor >= dom.order.len() {
            let mut rng = stream(seed, "sampler", &[d as u64, dom.round]);
            dom.order = dom.indices.clone();
            dom.order.shuffle(&mut rng);
            dom.cursor = 0;
            dom.round += 1;
        }
        let index = dom.order[dom.cursor];
        dom.cursor += 1;
        index
    }
}
