//! Additive-smoothed n-gram next-token model.
//!
//! Deterministic by construction: counting is exact, tables iterate in key
//! order, and prediction is closed-form. Used where transfer behavior must
//! not depend on gradient-training noise.

use super::{Predictor, PredictorSession};
use crate::remi::TokenSequence;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    delta: f64,
    vocab_size: usize,
    /// (n-1)-token context -> next token -> count
    counts: BTreeMap<Vec<u32>, BTreeMap<u32, u32>>,
}

impl NGramModel {
    pub fn new(order: usize, delta: f64, vocab_size: usize) -> Self {
        assert!((2..=5).contains(&order), "order must be in 2..=5");
        assert!(delta > 0.0, "smoothing constant must be positive");
        NGramModel {
            order,
            delta,
            vocab_size,
            counts: BTreeMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Count all (context, next) transitions in the given sequences.
    pub fn fit(&mut self, sequences: &[TokenSequence]) {
        let k = self.order - 1;
        for seq in sequences {
            if seq.len() <= k {
                continue;
            }
            for i in k..seq.len() {
                let context = seq.ids[i - k..i].to_vec();
                *self
                    .counts
                    .entry(context)
                    .or_default()
                    .entry(seq.ids[i])
                    .or_insert(0) += 1;
            }
        }
    }

    /// Flatten the count table as (context tokens..., next token, count) rows
    /// in key order, for checkpoint serialization.
    pub fn rows(&self) -> Vec<(Vec<u32>, u32, u32)> {
        let mut out = Vec::new();
        for (context, nexts) in &self.counts {
            for (&token, &count) in nexts {
                out.push((context.clone(), token, count));
            }
        }
        out
    }

    pub fn from_rows(
        order: usize,
        delta: f64,
        vocab_size: usize,
        rows: &[(Vec<u32>, u32, u32)],
    ) -> Self {
        let mut model = NGramModel::new(order, delta, vocab_size);
        for (context, token, count) in rows {
            *model
                .counts
                .entry(context.clone())
                .or_default()
                .entry(*token)
                .or_insert(0) += count;
        }
        model
    }

    fn distribution_for(&self, context: &[u32]) -> Vec<f64> {
        let k = self.order - 1;
        let c = self.vocab_size as f64;
        if context.len() < k {
            return vec![1.0 / c; self.vocab_size];
        }
        let key = &context[context.len() - k..];
        let empty = BTreeMap::new();
        let nexts = self.counts.get(key).unwrap_or(&empty);
        let total: f64 = nexts.values().map(|&v| v as f64).sum();
        let denom = total + self.delta * c;
        (0..self.vocab_size as u32)
            .map(|t| (nexts.get(&t).copied().unwrap_or(0) as f64 + self.delta) / denom)
            .collect()
    }
}

impl Predictor for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn session(&self) -> Box<dyn PredictorSession + '_> {
        Box::new(NGramSession {
            model: self,
            recent: Vec::new(),
        })
    }

    fn predict(&self, context: &[u32]) -> Vec<f64> {
        self.distribution_for(context)
    }
}

struct NGramSession<'a> {
    model: &'a NGramModel,
    recent: Vec<u32>,
}

impl PredictorSession for NGramSession<'_> {
    fn push(&mut self, token: u32) {
        self.recent.push(token);
        let k = self.model.order - 1;
        if self.recent.len() > k {
            self.recent.drain(..self.recent.len() - k);
        }
    }

    fn next_distribution(&mut self) -> Vec<f64> {
        self.model.distribution_for(&self.recent)
    }
}
