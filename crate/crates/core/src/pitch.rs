//! Char → word → sentence pitch hierarchy and its decoder-length embeddings.
//!
//! The sentence value is the mean over all characters and the word values are
//! per-word means. They are embedded by an affine map and a kernel-3 convolution
//! respectively, then repeated to frame length using word durations (the sum
//! of each word's character durations).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Utterance;
use crate::numerics::{Tape, Tensor, Var};

/// Half-open character range `[start, end)` forming one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks that `spans` partition `[0, n)` into non-empty, ordered words.
pub fn validate_spans(spans: &[WordSpan], n: usize) -> Result<()> {
    let mut pos = 0;
    for (k, s) in spans.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::input(format!("word {k} has an empty span {}..{}", s.start, s.end)));
        }
        if s.start != pos {
            return Err(Error::input(format!("word {k} starts at {} but previous word ended at {pos}", s.start)));
        }
        pos = s.end;
    }
    if pos != n {
        return Err(Error::input(format!("word spans cover {pos} of {n} characters")));
    }
    Ok(())
}

pub fn aggregate_word(char_pitch: &[f64], spans: &[WordSpan]) -> Result<Vec<f64>> {
    validate_spans(spans, char_pitch.len())?;
    Ok(spans
        .iter()
        .map(|s| char_pitch[s.start..s.end].iter().sum::<f64>() / s.len() as f64)
        .collect())
}

pub fn aggregate_sentence(char_pitch: &[f64]) -> Result<f64> {
    if char_pitch.is_empty() {
        return Err(Error::input("sentence pitch of an empty utterance"));
    }
    Ok(char_pitch.iter().sum::<f64>() / char_pitch.len() as f64)
}

pub fn word_durations(char_durations: &[usize], spans: &[WordSpan]) -> Result<Vec<usize>> {
    validate_spans(spans, char_durations.len())?;
    Ok(spans.iter().map(|s| char_durations[s.start..s.end].iter().sum()).collect())
}

/// Embedding parameters: sentence map `w: [1×d]`, `b: [d]`; word conv
/// `w: [3×1×d]`, `b: [d]`.
#[derive(Clone, Debug)]
pub struct PitchEmbedParams {
    pub sentence_w: Tensor,
    pub sentence_b: Tensor,
    pub word_w: Tensor,
    pub word_b: Tensor,
}

impl PitchEmbedParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            sentence_w: Tensor::zeros(&[1, d]),
            sentence_b: Tensor::zeros(&[d]),
            word_w: Tensor::zeros(&[3, 1, d]),
            word_b: Tensor::zeros(&[d]),
        }
    }

    fn bind(&self, tape: &mut Tape) -> PitchEmbedVars {
        PitchEmbedVars {
            sentence_w: tape.constant(self.sentence_w.clone()),
            sentence_b: tape.constant(self.sentence_b.clone()),
            word_w: tape.constant(self.word_w.clone()),
            word_b: tape.constant(self.word_b.clone()),
        }
    }
}

/// Tape handles for [`PitchEmbedParams`].
#[derive(Clone, Copy, Debug)]
pub struct PitchEmbedVars {
    pub sentence_w: Var,
    pub sentence_b: Var,
    pub word_w: Var,
    pub word_b: Var,
}

/// `p_s = s · w + b`, as a `[1×d]` row.
pub fn embed_sentence_on(tape: &mut Tape, vars: &PitchEmbedVars, sentence_pitch: f64) -> Result<Var> {
    let s = tape.constant(Tensor::matrix(1, 1, vec![sentence_pitch])?);
    let proj = tape.matmul(s, vars.sentence_w)?;
    tape.add_row(proj, vars.sentence_b)
}

pub fn embed_word_on(tape: &mut Tape, vars: &PitchEmbedVars, word_pitch: &[f64]) -> Result<Var> {
    if word_pitch.is_empty() {
        return Err(Error::input("word pitch sequence is empty"));
    }
    let x = tape.constant(Tensor::matrix(word_pitch.len(), 1, word_pitch.to_vec())?);
    let conv = tape.conv1d(x, vars.word_w)?;
    tape.add_row(conv, vars.word_b)
}

fn repeat_indices(durations: &[usize]) -> Vec<usize> {
    durations.iter().enumerate().flat_map(|(k, &d)| std::iter::repeat_n(k, d)).collect()
}

/// Broadcasts a `[1×d]` sentence row to `t` rows.
pub fn replicate_sentence_on(tape: &mut Tape, p_s: Var, t: usize) -> Result<Var> {
    tape.gather_rows(p_s, &vec![0; t])
}

/// Repeats word row `k` of `p_w` `word_durations[k]` times.
pub fn replicate_word_on(tape: &mut Tape, p_w: Var, word_durations: &[usize], t: usize) -> Result<Var> {
    let total: usize = word_durations.iter().sum();
    if total != t {
        return Err(Error::input(format!("word durations sum to {total}, expected {t} frames")));
    }
    if tape.value(p_w).rows() != word_durations.len() {
        return Err(Error::dim(format!(
            "{} word durations for embedding {:?}",
            word_durations.len(),
            tape.value(p_w).shape()
        )));
    }
    tape.gather_rows(p_w, &repeat_indices(word_durations))
}

/// Frame-level conditions for the decoder, recorded on a tape.
#[derive(Clone, Debug)]
pub struct PitchConditions {
    pub sentence: Var,
    pub word: Var,
    pub p_s: Var,
    pub p_w: Var,
    pub word_pitch: Vec<f64>,
    pub sentence_pitch: f64,
    pub word_durations: Vec<usize>,
}

/// Aggregates, embeds and replicates on `tape`.
pub fn condition_on(
    tape: &mut Tape,
    vars: &PitchEmbedVars,
    char_pitch: &[f64],
    char_durations: &[usize],
    spans: &[WordSpan],
) -> Result<PitchConditions> {
    if char_pitch.len() != char_durations.len() {
        return Err(Error::input(format!(
            "{} pitch values for {} durations",
            char_pitch.len(),
            char_durations.len()
        )));
    }
    let word_pitch = aggregate_word(char_pitch, spans)?;
    let sentence_pitch = aggregate_sentence(char_pitch)?;
    let word_dur = word_durations(char_durations, spans)?;
    let t: usize = char_durations.iter().sum();

    let p_s = embed_sentence_on(tape, vars, sentence_pitch)?;
    let p_w = embed_word_on(tape, vars, &word_pitch)?;
    let sentence = replicate_sentence_on(tape, p_s, t)?;
    let word = replicate_word_on(tape, p_w, &word_dur, t)?;
    Ok(PitchConditions { sentence, word, p_s, p_w, word_pitch, sentence_pitch, word_durations: word_dur })
}

pub fn embed_sentence(sentence_pitch: f64, params: &PitchEmbedParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let v = embed_sentence_on(&mut tape, &vars, sentence_pitch)?;
    let d = tape.value(v).cols();
    tape.value(v).reshaped(&[d])
}

pub fn embed_word(word_pitch: &[f64], params: &PitchEmbedParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let v = embed_word_on(&mut tape, &vars, word_pitch)?;
    Ok(tape.value(v).clone())
}

/// Repeats an embedding to `t` rows: a 1-D `[d]` sentence vector goes to every
/// row; a `[n_words×d]` word matrix repeats row `k` `word_durations[k]` times.
pub fn replicate(embedding: &Tensor, word_durations: &[usize], t: usize) -> Result<Tensor> {
    let total: usize = word_durations.iter().sum();
    if total != t {
        return Err(Error::input(format!("word durations sum to {total}, expected {t} frames")));
    }
    let mut tape = Tape::new();
    let out = if embedding.shape().len() == 1 {
        let row = tape.constant(embedding.reshaped(&[1, embedding.len()])?);
        replicate_sentence_on(&mut tape, row, t)?
    } else {
        let e = tape.constant(embedding.clone());
        replicate_word_on(&mut tape, e, word_durations, t)?
    };
    Ok(tape.value(out).clone())
}

/// Where the char-level values feeding the hierarchy come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PitchSource {
    GroundTruth,
    Predicted { char_pitch: Vec<f64>, char_durations: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct PitchHierarchy {
    pub char_pitch: Vec<f64>,
    pub word_spans: Vec<WordSpan>,
    pub word_pitch: Vec<f64>,
    pub sentence_pitch: f64,
    pub word_durations: Vec<usize>,
    pub p_s: Tensor,
    pub p_w: Tensor,
    pub replicated_sentence: Tensor,
    pub replicated_word: Tensor,
}

pub fn build_hierarchy(utt: &Utterance, params: &PitchEmbedParams, source: &PitchSource) -> Result<PitchHierarchy> {
    let (char_pitch, char_durations) = match source {
        PitchSource::GroundTruth => (utt.char_pitch.clone(), utt.char_durations.clone()),
        PitchSource::Predicted { char_pitch, char_durations } => (char_pitch.clone(), char_durations.clone()),
    };
    if char_pitch.len() != utt.len() {
        return Err(Error::input(format!("{} pitch values for {} tokens", char_pitch.len(), utt.len())));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let c = condition_on(&mut tape, &vars, &char_pitch, &char_durations, &utt.word_spans)?;
    let p_s = tape.value(c.p_s);
    Ok(PitchHierarchy {
        p_s: p_s.reshaped(&[p_s.cols()])?,
        p_w: tape.value(c.p_w).clone(),
        replicated_sentence: tape.value(c.sentence).clone(),
        replicated_word: tape.value(c.word).clone(),
        char_pitch,
        word_spans: utt.word_spans.clone(),
        word_pitch: c.word_pitch,
        sentence_pitch: c.sentence_pitch,
        word_durations: c.word_durations,
    })
}

impl PitchHierarchy {
    /// Debug CSV: one row per character.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("char_index,char_pitch,word_index,word_pitch,sentence_pitch\n");
        for (w, span) in self.word_spans.iter().enumerate() {
            for c in span.start..span.end {
                let _ = writeln!(
                    out,
                    "{c},{},{w},{},{}",
                    self.char_pitch[c], self.word_pitch[w], self.sentence_pitch
                );
            }
        }
        out
    }
}
