//! Synthetic clinical-note corpora with planted rationales.
//!
//! Positives carry a contiguous span of signal-vocabulary tokens; negatives
//! carry at most rationale_len.0 - 1 scattered signal tokens (the noise), so
//! the label is a deterministic function of signal-token count and the
//! planted span is an objective ground-truth rationale.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortDataset;
use crate::tensor::seeded_rng;
use crate::text::Document;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    /// Total distinct tokens: background plus signal.
    pub vocab_size: usize,
    /// Inclusive (min, max) document length in tokens.
    pub doc_len: (usize, usize),
    /// Inclusive (min, max) planted-span length.
    pub rationale_len: (usize, usize),
    pub positive_rate: f64,
    /// Probability that a position in a negative document carries a signal
    /// token; total signal in a negative is capped below rationale_len.0.
    pub noise_rate: f64,
    /// Size of the signal sub-vocabulary.
    pub signal_vocab: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 1000,
            vocab_size: 150,
            doc_len: (15, 30),
            rationale_len: (4, 7),
            positive_rate: 0.3,
            noise_rate: 0.05,
            signal_vocab: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 {
            return Err(Error::contract("n_docs must be >= 1"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::contract("positive_rate must be in (0, 1)"));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::contract("noise_rate must be in [0, 0.5)"));
        }
        if self.signal_vocab == 0 {
            return Err(Error::contract("signal_vocab must be >= 1"));
        }
        if self.vocab_size < 2 * self.signal_vocab {
            return Err(Error::contract(format!(
                "vocab_size {} must be at least twice the signal vocabulary {}",
                self.vocab_size, self.signal_vocab
            )));
        }
        if self.doc_len.0 == 0 || self.doc_len.0 > self.doc_len.1 {
            return Err(Error::contract(format!("bad doc_len range {:?}", self.doc_len)));
        }
        if self.rationale_len.0 == 0 || self.rationale_len.0 > self.rationale_len.1 {
            return Err(Error::contract(format!("bad rationale_len range {:?}", self.rationale_len)));
        }
        if self.doc_len.0 < self.rationale_len.1 {
            return Err(Error::contract(
                "doc_len min must be >= rationale_len max so every span fits",
            ));
        }
        Ok(())
    }

    pub fn signal_token(&self, i: usize) -> String {
        format!("sig{i:02}")
    }

    pub fn background_token(&self, i: usize) -> String {
        format!("w{i:03}")
    }

    /// The Bayes-optimal decision rule under this construction: a document is
    /// positive iff it contains at least rationale_len.0 signal tokens.
    pub fn bayes_label(&self, tokens: &[String]) -> u8 {
        let signal = tokens.iter().filter(|t| t.starts_with("sig")).count();
        u8::from(signal >= self.rationale_len.0)
    }
}

const SYNTH_STREAM: u64 = 0x73796e74; // "synt"

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<CohortDataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, SYNTH_STREAM);
    let n_background = cfg.vocab_size - cfg.signal_vocab;

    // Exact positive count by construction.
    let n_pos = (cfg.positive_rate * cfg.n_docs as f64).round() as usize;
    let mut is_positive = vec![false; cfg.n_docs];
    let mut order: Vec<usize> = (0..cfg.n_docs).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_pos) {
        is_positive[i] = true;
    }

    let mut documents = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let len = rng.gen_range(cfg.doc_len.0..=cfg.doc_len.1);
        let mut words: Vec<String> =
            (0..len).map(|_| cfg.background_token(rng.gen_range(0..n_background))).collect();

        let (label, planted) = if is_positive[i] {
            let span_len = rng.gen_range(cfg.rationale_len.0..=cfg.rationale_len.1);
            let start = rng.gen_range(0..=len - span_len);
            for w in words.iter_mut().skip(start).take(span_len) {
                *w = cfg.signal_token(rng.gen_range(0..cfg.signal_vocab));
            }
            (1u8, Some((start..start + span_len).collect::<Vec<usize>>()))
        } else {
            // Scattered signal noise, capped strictly below the shortest
            // possible planted span so the count rule stays exact.
            let cap = cfg.rationale_len.0 - 1;
            let mut k = 0usize;
            for _ in 0..len {
                if rng.gen_bool(cfg.noise_rate) {
                    k += 1;
                }
            }
            let k = k.min(cap);
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            for &p in positions.iter().take(k) {
                words[p] = cfg.signal_token(rng.gen_range(0..cfg.signal_vocab));
            }
            (0u8, None)
        };

        debug_assert_eq!(cfg.bayes_label(&words), label);
        let mut doc = Document::raw(format!("synth-{i:06}"), words.join(" "), label);
        doc.planted_rationale = planted;
        documents.push(doc);
    }

    Ok(CohortDataset::from_documents(documents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, write_corpus};

    #[test]
    fn positive_count_is_exact() {
        let cfg = SynthConfig { n_docs: 1000, positive_rate: 0.3, seed: 5, ..Default::default() };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(ds.counts.n_positive, 300);
        assert_eq!(ds.counts.n_negative, 700);
        assert_eq!(ds.counts.n_patients, 1000);
    }

    #[test]
    fn zero_noise_is_perfectly_separable() {
        let cfg = SynthConfig { n_docs: 400, noise_rate: 0.0, seed: 1, ..Default::default() };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        for doc in &ds.documents {
            let words = tokenize(&doc.raw_text);
            assert_eq!(cfg.bayes_label(&words), doc.label, "doc {}", doc.doc_id);
            if doc.label == 0 {
                assert!(words.iter().all(|w| !w.starts_with("sig")));
            }
        }
    }

    #[test]
    fn bayes_rule_is_exact_even_with_noise() {
        let cfg = SynthConfig { n_docs: 500, noise_rate: 0.2, seed: 2, ..Default::default() };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        for doc in &ds.documents {
            let words = tokenize(&doc.raw_text);
            assert_eq!(cfg.bayes_label(&words), doc.label);
        }
    }

    #[test]
    fn planted_positions_point_at_signal_tokens() {
        let cfg = SynthConfig { n_docs: 200, seed: 3, ..Default::default() };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        for doc in ds.documents.iter().filter(|d| d.label == 1) {
            let words = tokenize(&doc.raw_text);
            let planted = doc.planted_rationale.as_ref().unwrap();
            assert!(planted.len() >= cfg.rationale_len.0);
            assert!(planted.len() <= cfg.rationale_len.1);
            // contiguous
            for pair in planted.windows(2) {
                assert_eq!(pair[1], pair[0] + 1);
            }
            for &p in planted {
                assert!(p < words.len());
                assert!(words[p].starts_with("sig"), "position {p} in {}", doc.raw_text);
            }
        }
        for doc in ds.documents.iter().filter(|d| d.label == 0) {
            assert!(doc.planted_rationale.is_none());
        }
    }

    #[test]
    fn byte_identical_jsonl_across_runs() {
        let cfg = SynthConfig { n_docs: 50, seed: 11, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_corpus(&generate_synthetic_corpus(&cfg).unwrap().documents, &p1).unwrap();
        write_corpus(&generate_synthetic_corpus(&cfg).unwrap().documents, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SynthConfig { vocab_size: 20, signal_vocab: 12, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { positive_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { noise_rate: 0.5, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { doc_len: (5, 30), rationale_len: (4, 7), ..ok.clone() }
            .validate()
            .is_err());
        assert!(SynthConfig { n_docs: 0, ..ok }.validate().is_err());
    }
}
