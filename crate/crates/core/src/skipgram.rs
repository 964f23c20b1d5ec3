//! Skip-gram word embeddings with negative sampling.
//!
//! Pretrains the dense word vectors the rationale model consumes. Training is
//! single-threaded and fully determined by the seed: documents and positions
//! are visited in order, and the only randomness is the negative-sample draw.

use rand::Rng;

use crate::tensor::seeded_rng;
use crate::text::{Document, EmbeddingMatrix, Vocab, FIRST_WORD_ID, PAD_ID};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig { dim: 100, window: 5, negatives: 5, epochs: 5, lr: 0.05, seed: 0 }
    }
}

#[derive(Debug)]
pub struct SkipgramOutput {
    pub embeddings: EmbeddingMatrix,
    /// Mean pair loss per epoch.
    pub epoch_losses: Vec<f64>,
}

const SKIPGRAM_STREAM: u64 = 0x7367_6e73; // "sgns"

/// Train input vectors on (center, context) pairs within `window`, against
/// `negatives` samples drawn from the unigram^0.75 distribution. Returns the
/// input-vector matrix; the PAD row stays zero.
pub fn train_skipgram(docs: &[Document], vocab: &Vocab, cfg: &SkipgramConfig) -> Result<SkipgramOutput> {
    if cfg.window < 1 {
        return Err(Error::contract("skip-gram window must be >= 1"));
    }
    if cfg.negatives < 1 {
        return Err(Error::contract("skip-gram negatives must be >= 1"));
    }
    if cfg.dim == 0 {
        return Err(Error::contract("embedding dim must be >= 1"));
    }
    for doc in docs {
        if doc.tokens.is_empty() {
            return Err(Error::contract(format!("document {} is not encoded", doc.doc_id)));
        }
    }

    let n = vocab.len();
    let mut rng = seeded_rng(cfg.seed, SKIPGRAM_STREAM);

    // Unigram counts over trainable ids only; reserved ids never train.
    let mut counts = vec![0usize; n];
    let mut n_pairs_possible = 0usize;
    for doc in docs {
        let ids: Vec<u32> = doc.tokens.iter().copied().filter(|&t| t >= FIRST_WORD_ID).collect();
        for &t in &ids {
            counts[t as usize] += 1;
        }
        if ids.len() >= 2 {
            n_pairs_possible += 1;
        }
    }
    if n_pairs_possible == 0 {
        return Err(Error::contract(
            "corpus too small for skip-gram: no document yields a (center, context) pair",
        ));
    }

    // Negative-sampling table: cumulative unigram^0.75 weights.
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let total_weight: f64 = weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(Error::contract("no in-vocabulary tokens to train on"));
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let draw_negative = move |rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
        let x: f64 = rng.gen_range(0.0..total_weight);
        match cumulative.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
            Ok(i) | Err(i) => i.min(n - 1) as u32,
        }
    };

    let bound = 0.5 / cfg.dim as f64;
    let mut input = EmbeddingMatrix::zeros(n, cfg.dim);
    let mut output = EmbeddingMatrix::zeros(n, cfg.dim);
    for id in FIRST_WORD_ID..n as u32 {
        for v in input.row_mut(id) {
            *v = rng.gen_range(-bound..bound);
        }
        for v in output.row_mut(id) {
            *v = rng.gen_range(-bound..bound);
        }
    }

    let sigmoid = crate::graph::sigmoid;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad_center = vec![0.0; cfg.dim];

    for _epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        for doc in docs {
            let ids: Vec<u32> =
                doc.tokens.iter().copied().filter(|&t| t >= FIRST_WORD_ID).collect();
            for i in 0..ids.len() {
                let center = ids[i];
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(ids.len());
                for j in lo..hi {
                    if j == i {
                        continue;
                    }
                    let context = ids[j];
                    grad_center.iter_mut().for_each(|g| *g = 0.0);
                    let mut loss = 0.0;

                    // positive pair
                    {
                        let dot: f64 = input
                            .row(center)
                            .iter()
                            .zip(output.row(context))
                            .map(|(a, b)| a * b)
                            .sum();
                        let p = sigmoid(dot);
                        loss -= p.max(1e-10).ln();
                        let err = p - 1.0;
                        for (gc, &o) in grad_center.iter_mut().zip(output.row(context)) {
                            *gc += err * o;
                        }
                        let center_row: Vec<f64> = input.row(center).to_vec();
                        for (o, &c) in output.row_mut(context).iter_mut().zip(&center_row) {
                            *o -= cfg.lr * err * c;
                        }
                    }

                    // negatives
                    for _ in 0..cfg.negatives {
                        let neg = draw_negative(&mut rng);
                        if neg == center {
                            continue;
                        }
                        let dot: f64 = input
                            .row(center)
                            .iter()
                            .zip(output.row(neg))
                            .map(|(a, b)| a * b)
                            .sum();
                        let p = sigmoid(dot);
                        loss -= (1.0 - p).max(1e-10).ln();
                        let err = p; // gradient of -ln(sigmoid(-dot)) w.r.t. dot
                        for (gc, &o) in grad_center.iter_mut().zip(output.row(neg)) {
                            *gc += err * o;
                        }
                        let center_row: Vec<f64> = input.row(center).to_vec();
                        for (o, &c) in output.row_mut(neg).iter_mut().zip(&center_row) {
                            *o -= cfg.lr * err * c;
                        }
                    }

                    for (c, g) in input.row_mut(center).iter_mut().zip(&grad_center) {
                        *c -= cfg.lr * g;
                    }
                    loss_sum += loss;
                    pair_count += 1;
                }
            }
        }
        epoch_losses.push(if pair_count > 0 { loss_sum / pair_count as f64 } else { 0.0 });
    }

    // PAD row is all-zero by construction; enforce regardless.
    for v in input.row_mut(PAD_ID) {
        *v = 0.0;
    }
    if !input.all_finite() {
        return Err(Error::Numeric("skip-gram embeddings".into()));
    }
    Ok(SkipgramOutput { embeddings: input, epoch_losses })
}
