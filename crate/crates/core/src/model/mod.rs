//! Non-autoregressive TTS skeleton: FFT-block encoder and decoder with
//! per-layer attention spans, duration and pitch predictors, length
//! regulation, and optional pitch-conditioned decoder layers.

mod config;
mod params;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use config::{HpcLayers, ModelConfig, ModelShape, Variant, DECODER_SCHEDULE, ENCODER_SCHEDULE, HPC_LAYERS};
pub use params::{init_params, read_checkpoint, write_checkpoint, BoundParams, ParamStore};

use crate::attention::{attend, mark_global_tokens, AttentionMask, AttentionWeights, WindowSpec};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::pitch::{self, PitchEmbedVars, WordSpan};

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub global_marks: BTreeSet<usize>,
    pub word_spans: Vec<WordSpan>,
    pub char_durations: Vec<usize>,
    /// Normalized char-level pitch.
    pub char_pitch: Vec<f64>,
    /// `[frames × mel_bins]`, `frames = Σ char_durations`.
    pub mel_target: Tensor,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.char_durations.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::input("utterance has no tokens"));
        }
        if self.char_durations.len() != n || self.char_pitch.len() != n {
            return Err(Error::input(format!(
                "{n} tokens but {} durations and {} pitch values",
                self.char_durations.len(),
                self.char_pitch.len()
            )));
        }
        pitch::validate_spans(&self.word_spans, n)?;
        if let Some(&g) = self.global_marks.iter().find(|&&g| g >= n) {
            return Err(Error::Index { index: g, len: n });
        }
        if self.mel_target.rows() != self.frames() {
            return Err(Error::input(format!(
                "mel target has {} frames, durations sum to {}",
                self.mel_target.rows(),
                self.frames()
            )));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[n×d]`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(n, d, data).expect("shape")
}

fn regulate_indices(durations: &[usize]) -> Vec<usize> {
    durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect()
}

/// Repeats row `i` of `hidden` `durations[i]` times.
pub fn length_regulate_on(tape: &mut Tape, hidden: Var, durations: &[usize]) -> Result<Var> {
    let rows = tape.value(hidden).rows();
    if durations.len() != rows {
        return Err(Error::dim(format!("{} durations for {rows} hidden rows", durations.len())));
    }
    if durations.iter().sum::<usize>() == 0 {
        return Err(Error::input("durations sum to zero; length regulation would be empty"));
    }
    tape.gather_rows(hidden, &regulate_indices(durations))
}

pub fn length_regulate(hidden: &Tensor, durations: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let out = length_regulate_on(&mut tape, h, durations)?;
    Ok(tape.value(out).clone())
}

/// Integer durations from predicted `log(1 + d)` values: round half up, clamp
/// at zero, and give the largest-output character one frame if all round to 0.
pub fn durations_from_log(log_durations: &[f64]) -> Vec<usize> {
    let mut d: Vec<usize> = log_durations
        .iter()
        .map(|&o| {
            let v = (o.exp() - 1.0 + 0.5).floor();
            if v.is_finite() && v > 0.0 {
                v as usize
            } else {
                0
            }
        })
        .collect();
    if !d.is_empty() && d.iter().sum::<usize>() == 0 {
        let mut best = 0;
        for (i, &o) in log_durations.iter().enumerate() {
            if o > log_durations[best] {
                best = i;
            }
        }
        d[best] = 1;
    }
    d
}

/// Attention weights recorded for one layer, one matrix per head.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub layer: usize,
    pub window: WindowSpec,
    pub heads: Vec<Arc<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub attention: Vec<LayerAttention>,
    pub masks: Vec<AttentionMask>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub mel: Var,
    pub attention: Vec<LayerAttention>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub mel: Var,
    /// Predicted `log(1 + duration)` per character.
    pub dur_pred: Var,
    pub pitch_pred: Var,
    /// Durations used for length regulation.
    pub durations: Vec<usize>,
    /// Char pitch fed to the pitch embedding and hierarchy.
    pub char_pitch_used: Vec<f64>,
    pub encoder_attention: Vec<LayerAttention>,
    pub decoder_attention: Vec<LayerAttention>,
}

/// Evaluated forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub mel: Tensor,
    pub dur_pred: Tensor,
    pub pitch_pred: Tensor,
    pub durations: Vec<usize>,
    pub encoder_attention: Vec<LayerAttention>,
    pub decoder_attention: Vec<LayerAttention>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        init_params(&self.cfg, seed)
    }

    fn attention_weights(p: &BoundParams, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: p.get(&format!("{prefix}.attn.wq"))?,
            wk: p.get(&format!("{prefix}.attn.wk"))?,
            wv: p.get(&format!("{prefix}.attn.wv"))?,
            wo: p.get(&format!("{prefix}.attn.wo"))?,
        })
    }

    /// Self-attention and a kernel-3 conv feed-forward, each with a residual
    /// connection followed by layer norm.
    fn fft_block(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        x: Var,
        mask: &AttentionMask,
        pitch: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let w = Self::attention_weights(p, prefix)?;
        let att = attend(tape, x, &w, mask, pitch, self.cfg.heads)?;
        let res = tape.add(x, att.output)?;
        let h = tape.layer_norm(res, p.get(&format!("{prefix}.ln1.g"))?, p.get(&format!("{prefix}.ln1.b"))?)?;

        let c1 = tape.conv1d(h, p.get(&format!("{prefix}.ffn.w1"))?)?;
        let c1 = tape.add_row(c1, p.get(&format!("{prefix}.ffn.b1"))?)?;
        let a1 = tape.relu(c1);
        let c2 = tape.conv1d(a1, p.get(&format!("{prefix}.ffn.w2"))?)?;
        let c2 = tape.add_row(c2, p.get(&format!("{prefix}.ffn.b2"))?)?;
        let res2 = tape.add(h, c2)?;
        let out = tape.layer_norm(res2, p.get(&format!("{prefix}.ln2.g"))?, p.get(&format!("{prefix}.ln2.b"))?)?;
        Ok((out, att.weights))
    }

    fn record(tape: &Tape, layer: usize, window: WindowSpec, weights: &[Var]) -> LayerAttention {
        LayerAttention { layer, window, heads: weights.iter().map(|&w| tape.shared_value(w)).collect() }
    }

    /// Encoder mask for layer `layer`: its window plus the global positions.
    pub fn encoder_mask(&self, layer: usize, n: usize, globals: &BTreeSet<usize>) -> Result<AttentionMask> {
        self.cfg.encoder_schedule[layer].build(n)?.with_global(globals)
    }

    pub fn global_positions(&self, utt: &Utterance) -> BTreeSet<usize> {
        mark_global_tokens(&utt.tokens, &self.cfg.global_token_ids)
    }

    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, utt: &Utterance) -> Result<Encoded> {
        let n = utt.len();
        if n == 0 {
            return Err(Error::input("cannot encode an empty utterance"));
        }
        let indices: Vec<usize> = utt
            .tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.cfg.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(Error::input(format!("token id {t} outside vocabulary of {}", self.cfg.vocab_size)))
                }
            })
            .collect::<Result<_>>()?;
        let emb = tape.gather_rows(p.get("enc.embed")?, &indices)?;
        let pos = tape.constant(positional_encoding(n, self.cfg.d_model));
        let mut x = tape.add(emb, pos)?;

        let globals = self.global_positions(utt);
        let mut attention = Vec::with_capacity(self.cfg.n_enc_layers);
        let mut masks = Vec::with_capacity(self.cfg.n_enc_layers);
        for l in 0..self.cfg.n_enc_layers {
            let mask = self.encoder_mask(l, n, &globals)?;
            let (out, w) = self.fft_block(tape, p, &format!("enc.{l}"), x, &mask, None)?;
            attention.push(Self::record(tape, l, self.cfg.encoder_schedule[l], &w));
            masks.push(mask);
            x = out;
        }
        Ok(Encoded { hidden: x, attention, masks })
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        regulated: Var,
        pitch_cond: &BTreeMap<usize, Var>,
    ) -> Result<Decoded> {
        if let Some(&layer) = pitch_cond.keys().find(|&&l| {
            self.cfg.hpc.is_none_or(|h| l != h.sentence_layer && l != h.word_layer)
        }) {
            return Err(Error::config(format!("pitch condition supplied for decoder layer {layer} without hpc")));
        }
        let (t, d) = tape.value(regulated).require_2d("decoder input")?;
        if d != self.cfg.d_model {
            return Err(Error::dim(format!("decoder input width {d}, model width {}", self.cfg.d_model)));
        }
        let pos = tape.constant(positional_encoding(t, d));
        let mut x = tape.add(regulated, pos)?;
        let mut attention = Vec::with_capacity(self.cfg.n_dec_layers);
        for l in 0..self.cfg.n_dec_layers {
            let window = self.cfg.decoder_schedule[l];
            let mask = window.build(t)?;
            let (out, w) = self.fft_block(tape, p, &format!("dec.{l}"), x, &mask, pitch_cond.get(&l).copied())?;
            attention.push(Self::record(tape, l, window, &w));
            x = out;
        }
        let proj = tape.matmul(x, p.get("mel_proj.w")?)?;
        let mel = tape.add_row(proj, p.get("mel_proj.b")?)?;
        Ok(Decoded { mel, attention })
    }

    /// Two conv → ReLU → layer-norm stages and a linear map to one value per
    /// character.
    fn predictor(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, hidden: Var) -> Result<Var> {
        let n = tape.value(hidden).rows();
        let mut x = hidden;
        for i in 1..=2 {
            let c = tape.conv1d(x, p.get(&format!("{prefix}.conv{i}.w"))?)?;
            let c = tape.add_row(c, p.get(&format!("{prefix}.conv{i}.b"))?)?;
            let a = tape.relu(c);
            x = tape.layer_norm(a, p.get(&format!("{prefix}.ln{i}.g"))?, p.get(&format!("{prefix}.ln{i}.b"))?)?;
        }
        let proj = tape.matmul(x, p.get(&format!("{prefix}.proj.w"))?)?;
        let out = tape.add_row(proj, p.get(&format!("{prefix}.proj.b"))?)?;
        tape.reshape(out, &[n])
    }

    /// Predicted `log(1 + duration)` per character.
    pub fn predict_duration(&self, tape: &mut Tape, p: &BoundParams, hidden: Var) -> Result<Var> {
        self.predictor(tape, p, "dur", hidden)
    }

    pub fn predict_pitch(&self, tape: &mut Tape, p: &BoundParams, hidden: Var) -> Result<Var> {
        self.predictor(tape, p, "pitch", hidden)
    }

    /// `hidden + conv(pitch)`, the char-level pitch embedding added before regulation.
    pub fn add_pitch_embedding(&self, tape: &mut Tape, p: &BoundParams, hidden: Var, char_pitch: &[f64]) -> Result<Var> {
        let n = tape.value(hidden).rows();
        if char_pitch.len() != n {
            return Err(Error::dim(format!("{} pitch values for {n} hidden rows", char_pitch.len())));
        }
        let col = tape.constant(Tensor::matrix(n, 1, char_pitch.to_vec())?);
        let e = tape.conv1d(col, p.get("pitch_embed.w")?)?;
        let e = tape.add_row(e, p.get("pitch_embed.b")?)?;
        tape.add(hidden, e)
    }

    fn pitch_vars(p: &BoundParams) -> Result<PitchEmbedVars> {
        Ok(PitchEmbedVars {
            sentence_w: p.get("hpc.sentence.w")?,
            sentence_b: p.get("hpc.sentence.b")?,
            word_w: p.get("hpc.word.w")?,
            word_b: p.get("hpc.word.b")?,
        })
    }

    /// Replicated sentence and word pitch embeddings keyed by decoder layer.
    pub fn pitch_conditions(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        utt: &Utterance,
        char_pitch: &[f64],
        durations: &[usize],
    ) -> Result<BTreeMap<usize, Var>> {
        let Some(h) = self.cfg.hpc else {
            return Ok(BTreeMap::new());
        };
        let c = pitch::condition_on(tape, &Self::pitch_vars(p)?, char_pitch, durations, &utt.word_spans)?;
        Ok(BTreeMap::from([(h.sentence_layer, c.sentence), (h.word_layer, c.word)]))
    }

    /// encode → pitch embedding → length regulation → pitch hierarchy → decode.
    ///
    /// With `teacher_forcing` the ground-truth durations and char pitch drive
    /// regulation and conditioning; otherwise the predictors' outputs do.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, utt: &Utterance, teacher_forcing: bool) -> Result<ForwardOutput> {
        let enc = self.encode(tape, p, utt)?;
        let dur_pred = self.predict_duration(tape, p, enc.hidden)?;
        let pitch_pred = self.predict_pitch(tape, p, enc.hidden)?;

        let (char_pitch, durations) = if teacher_forcing {
            (utt.char_pitch.clone(), utt.char_durations.clone())
        } else {
            (tape.value(pitch_pred).data().to_vec(), durations_from_log(tape.value(dur_pred).data()))
        };
        let hidden = self.add_pitch_embedding(tape, p, enc.hidden, &char_pitch)?;
        let regulated = length_regulate_on(tape, hidden, &durations)?;
        let cond = self.pitch_conditions(tape, p, utt, &char_pitch, &durations)?;
        let dec = self.decode(tape, p, regulated, &cond)?;
        Ok(ForwardOutput {
            mel: dec.mel,
            dur_pred,
            pitch_pred,
            durations,
            char_pitch_used: char_pitch,
            encoder_attention: enc.attention,
            decoder_attention: dec.attention,
        })
    }

    pub fn infer(&self, store: &ParamStore, utt: &Utterance, teacher_forcing: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, utt, teacher_forcing)?;
        Ok(Inference {
            mel: tape.value(out.mel).clone(),
            dur_pred: tape.value(out.dur_pred).clone(),
            pitch_pred: tape.value(out.pitch_pred).clone(),
            durations: out.durations,
            encoder_attention: out.encoder_attention,
            decoder_attention: out.decoder_attention,
        })
    }
}
