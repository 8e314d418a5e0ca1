//! Deterministic synthetic utterances with a learnable text → mel mapping.
//!
//! Regular tokens occupy ids `0..vocab_size-2`; the last two ids stand for
//! `!` and `?`. Each character gets a duration, a smoothly varying pitch
//! (normalized over the whole corpus) and a per-token spectral template whose
//! tilt follows the pitch.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::mark_global_tokens;
use crate::error::{Error, Result};
use crate::model::Utterance;
use crate::numerics::Tensor;
use crate::pitch::WordSpan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_utts: usize,
    /// Inclusive character-count range.
    pub len_range: (usize, usize),
    pub mel_bins: usize,
    pub vocab_size: usize,
    /// Probability that a word ends in `!` or `?`.
    pub special_rate: f64,
    /// Inclusive per-character frame range.
    pub duration_range: (usize, usize),
    pub max_word_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_utts: 200,
            len_range: (4, 16),
            mel_bins: 20,
            vocab_size: 16,
            special_rate: 0.15,
            duration_range: (1, 6),
            max_word_len: 5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.len_range;
        if lo < 2 || hi > 128 || lo > hi {
            return Err(Error::config(format!("length range {lo}..={hi} must lie within 2..=128")));
        }
        let (dlo, dhi) = self.duration_range;
        if dlo > dhi || dhi == 0 {
            return Err(Error::config(format!("duration range {dlo}..={dhi} is empty")));
        }
        if self.n_utts == 0 || self.mel_bins == 0 || self.max_word_len == 0 {
            return Err(Error::config("n_utts, mel_bins and max_word_len must be positive"));
        }
        if self.vocab_size < 3 {
            return Err(Error::config("vocabulary needs at least one regular and two special tokens"));
        }
        if !(0.0..=1.0).contains(&self.special_rate) {
            return Err(Error::config(format!("special rate {} outside [0, 1]", self.special_rate)));
        }
        Ok(())
    }

    pub fn exclaim_id(&self) -> u32 {
        (self.vocab_size - 2) as u32
    }

    pub fn question_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn special_ids(&self) -> BTreeSet<u32> {
        BTreeSet::from([self.exclaim_id(), self.question_id()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub config: CorpusConfig,
    pub utterances: Vec<Utterance>,
    /// Raw pitch statistics used for normalization.
    pub pitch_mean: f64,
    pub pitch_std: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed-stable 10% held-out membership.
pub fn is_held_out(seed: u64, index: usize) -> bool {
    splitmix64(seed ^ splitmix64(index as u64)).is_multiple_of(10)
}

struct RawUtterance {
    tokens: Vec<u32>,
    spans: Vec<WordSpan>,
    durations: Vec<usize>,
    pitch: Vec<f64>,
}

fn raw_utterance(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> RawUtterance {
    let n = rng.random_range(cfg.len_range.0..=cfg.len_range.1);
    let n_regular = (cfg.vocab_size - 2) as u32;
    let mut tokens = Vec::with_capacity(n);
    let mut spans = Vec::new();
    while tokens.len() < n {
        let start = tokens.len();
        let len = rng.random_range(1..=cfg.max_word_len).min(n - start);
        for _ in 0..len {
            tokens.push(rng.random_range(0..n_regular));
        }
        if rng.random_bool(cfg.special_rate) {
            let last = tokens.len() - 1;
            tokens[last] = if rng.random_bool(0.5) { cfg.exclaim_id() } else { cfg.question_id() };
        }
        spans.push(WordSpan::new(start, tokens.len()));
    }
    let durations = (0..n).map(|_| rng.random_range(cfg.duration_range.0..=cfg.duration_range.1)).collect();

    let mut pitch = Vec::with_capacity(n);
    let mut level: f64 = rng.random_range(-1.0..1.0);
    for &t in &tokens {
        level = 0.7 * level + 0.5 * rng.random_range(-1.0..1.0);
        let lift = if t == cfg.question_id() {
            1.5
        } else if t == cfg.exclaim_id() {
            1.0
        } else {
            0.0
        };
        pitch.push(level + lift);
    }
    RawUtterance { tokens, spans, durations, pitch }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..cfg.mel_bins).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let tilt: Vec<f64> = (0..cfg.mel_bins)
        .map(|b| if cfg.mel_bins == 1 { 1.0 } else { 1.0 - 2.0 * b as f64 / (cfg.mel_bins - 1) as f64 })
        .collect();

    let raw: Vec<RawUtterance> = (0..cfg.n_utts).map(|_| raw_utterance(cfg, &mut rng)).collect();
    let all: Vec<f64> = raw.iter().flat_map(|r| r.pitch.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / all.len() as f64;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };

    let specials = cfg.special_ids();
    let utterances = raw
        .into_iter()
        .map(|r| {
            let char_pitch: Vec<f64> = r.pitch.iter().map(|p| (p - mean) / std).collect();
            let frames: usize = r.durations.iter().sum();
            let mut mel = Vec::with_capacity(frames * cfg.mel_bins);
            for ((&tok, &dur), &p) in r.tokens.iter().zip(&r.durations).zip(&char_pitch) {
                let template = &templates[tok as usize];
                for _ in 0..dur {
                    mel.extend(template.iter().zip(&tilt).map(|(&base, &tl)| base + 0.3 * p * tl));
                }
            }
            Ok(Utterance {
                global_marks: mark_global_tokens(&r.tokens, &specials),
                tokens: r.tokens,
                word_spans: r.spans,
                char_durations: r.durations,
                char_pitch,
                mel_target: Tensor::matrix(frames, cfg.mel_bins, mel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus { config: cfg.clone(), utterances, pitch_mean: mean, pitch_std: std })
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Indices of the training and held-out utterances.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !is_held_out(self.config.seed, i))
    }

    pub fn global_token_ids(&self) -> BTreeSet<u32> {
        self.config.special_ids()
    }
}
