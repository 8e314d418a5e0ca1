use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Utterance};
use crate::numerics::{Tape, Tensor, Var};

/// Relative weights of the duration, pitch and mel terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dur: f64,
    pub pitch: f64,
    pub mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dur: 0.01, pitch: 0.01, mel: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelLoss {
    #[default]
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dur: Var,
    pub pitch: Var,
    pub mel: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub dur: f64,
    pub pitch: f64,
    pub mel: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, terms: &LossTerms) -> Self {
        Self {
            total: tape.value(terms.total).item(),
            dur: tape.value(terms.dur).item(),
            pitch: tape.value(terms.pitch).item(),
            mel: tape.value(terms.mel).item(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.dur.is_finite() && self.pitch.is_finite() && self.mel.is_finite()
    }

    /// Component-wise mean.
    pub fn mean(values: &[LossValues]) -> Self {
        let n = values.len().max(1) as f64;
        let mut acc = LossValues::default();
        for v in values {
            acc.total += v.total;
            acc.dur += v.dur;
            acc.pitch += v.pitch;
            acc.mel += v.mel;
        }
        LossValues { total: acc.total / n, dur: acc.dur / n, pitch: acc.pitch / n, mel: acc.mel / n }
    }
}

fn mean_error(tape: &mut Tape, pred: Var, target: Tensor, squared: bool) -> Result<Var> {
    if tape.value(pred).len() != target.len() {
        return Err(Error::dim(format!(
            "prediction {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let target = target.reshaped(tape.value(pred).shape())?;
    let t = tape.constant(target);
    let diff = tape.sub(pred, t)?;
    let e = if squared { tape.mul(diff, diff)? } else { tape.abs(diff) };
    Ok(tape.mean(e))
}

/// `dur · MSE(log(1+d)) + pitch · MSE(char pitch) + mel · {MAE|MSE}(mel)`.
pub fn loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    utt: &Utterance,
    weights: &LossWeights,
    mel_loss: MelLoss,
) -> Result<LossTerms> {
    if tape.value(out.mel).shape() != utt.mel_target.shape() {
        return Err(Error::dim(format!(
            "predicted mel {:?} vs target {:?}",
            tape.value(out.mel).shape(),
            utt.mel_target.shape()
        )));
    }
    let log_dur = Tensor::vector(utt.char_durations.iter().map(|&d| (1.0 + d as f64).ln()).collect());
    let dur = mean_error(tape, out.dur_pred, log_dur, true)?;
    let pitch = mean_error(tape, out.pitch_pred, Tensor::vector(utt.char_pitch.clone()), true)?;
    let mel = mean_error(tape, out.mel, utt.mel_target.clone(), mel_loss == MelLoss::Mse)?;

    let a = tape.scale(dur, weights.dur);
    let b = tape.scale(pitch, weights.pitch);
    let c = tape.scale(mel, weights.mel);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms { total, dur, pitch, mel })
}
