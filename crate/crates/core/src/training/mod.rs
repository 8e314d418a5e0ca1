//! Synthetic data, composite loss, Adam with a halving schedule, and the
//! variant comparison runner.

mod ablation;
mod corpus;
mod loss;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationRow, AblationRun, AblationTable};
pub use corpus::{generate_corpus, is_held_out, CorpusConfig, SyntheticCorpus};
pub use loss::{loss, LossTerms, LossValues, LossWeights, MelLoss};
pub use optim::{learning_rate, Adam, AdamConfig};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{write_checkpoint, Model, ModelConfig, ParamStore, Utterance};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub lr0: f64,
    /// Steps between learning-rate halvings.
    pub halve_every: usize,
    pub batch_size: usize,
    pub iters: usize,
    pub seed: u64,
    pub mel_loss: MelLoss,
    /// Write a checkpoint every this many steps (when an output directory is given).
    pub checkpoint_every: Option<usize>,
    /// Training utterances used for the before/after loss comparison.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lr0: 0.002,
            halve_every: 200,
            batch_size: 4,
            iters: 500,
            seed: 1,
            mel_loss: MelLoss::default(),
            checkpoint_every: None,
            probe_size: 16,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: halving every 40000 steps, batch 16.
    pub fn full_scale() -> Self {
        Self { halve_every: 40000, batch_size: 16, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.loss_weights;
        if !(w.dur > 0.0 && w.pitch > 0.0 && w.mel > 0.0) {
            return Err(Error::config(format!("loss weights must be positive: {w:?}")));
        }
        if self.halve_every == 0 || self.batch_size == 0 {
            return Err(Error::config("halve_every and batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("initial learning rate {} must be positive", self.lr0)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        learning_rate(self.lr0, self.halve_every, step)
    }
}

/// Metadata stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub step: usize,
}

/// Teacher-forced loss and its gradient for one utterance, in store order.
pub fn utterance_gradient(
    model: &Model,
    params: &ParamStore,
    utt: &Utterance,
    weights: &LossWeights,
    mel_loss: MelLoss,
) -> Result<(Vec<Tensor>, LossValues)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, utt, true)?;
    let terms = loss(&mut tape, &out, utt, weights, mel_loss)?;
    let values = LossValues::read(&tape, &terms);
    let mut grads = tape.backward(terms.total)?;
    let g = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((g, values))
}

/// Mean gradient over a batch. Per-utterance passes may run in parallel; the
/// reduction always runs in batch order.
pub fn batch_gradient(
    model: &Model,
    params: &ParamStore,
    batch: &[&Utterance],
    weights: &LossWeights,
    mel_loss: MelLoss,
    exec: Execution,
) -> Result<(Vec<Tensor>, LossValues)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let per = exec.map(batch, |u| utterance_gradient(model, params, u, weights, mel_loss));
    let mut iter = per.into_iter();
    let (mut acc, first) = iter.next().expect("non-empty")?;
    let mut values = vec![first];
    for r in iter {
        let (g, v) = r?;
        for (a, b) in acc.iter_mut().zip(&g) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
        }
        values.push(v);
    }
    let scale = 1.0 / batch.len() as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((acc, LossValues::mean(&values)))
}

/// Teacher-forced evaluation summary over a set of utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossValues,
    /// Mean absolute mel error.
    pub mel_mae: f64,
    /// Root-mean-square error of predicted char pitch.
    pub pitch_rmse: f64,
}

pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    utts: &[&Utterance],
    weights: &LossWeights,
    mel_loss: MelLoss,
    exec: Execution,
) -> Result<Evaluation> {
    if utts.is_empty() {
        return Err(Error::input("nothing to evaluate"));
    }
    let per = exec.map(utts, |u| -> Result<(LossValues, f64, f64, usize, usize)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, u, true)?;
        let terms = loss(&mut tape, &out, u, weights, mel_loss)?;
        let abs_sum: f64 =
            tape.value(out.mel).data().iter().zip(u.mel_target.data()).map(|(a, b)| (a - b).abs()).sum();
        let sq_sum: f64 =
            tape.value(out.pitch_pred).data().iter().zip(&u.char_pitch).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((LossValues::read(&tape, &terms), abs_sum, sq_sum, u.mel_target.len(), u.len()))
    });
    let mut losses = Vec::with_capacity(per.len());
    let (mut abs, mut sq, mut mel_n, mut chars) = (0.0, 0.0, 0usize, 0usize);
    for r in per {
        let (l, a, s, m, c) = r?;
        losses.push(l);
        abs += a;
        sq += s;
        mel_n += m;
        chars += c;
    }
    Ok(Evaluation {
        loss: LossValues::mean(&losses),
        mel_mae: abs / mel_n.max(1) as f64,
        pitch_rmse: (sq / chars.max(1) as f64).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossValues,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,total,dur,pitch,mel\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.lr, r.loss.total, r.loss.dur, r.loss.pitch, r.loss.mel);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LossRecord>,
    /// Probe-set evaluation before the first and after the last step.
    pub initial: Evaluation,
    pub final_eval: Evaluation,
}

fn save_checkpoint(dir: &Path, name: &str, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
    write_checkpoint(&mut f, meta, params)?;
    std::io::Write::flush(&mut f)?;
    Ok(())
}

fn diagnostic_dump(dir: &Path, step: usize, loss: &LossValues, batch: &[usize], params: &ParamStore) -> Result<()> {
    let worst: Vec<(String, bool)> =
        params.names().iter().cloned().zip(params.tensors().map(|t| t.is_finite())).filter(|(_, ok)| !ok).collect();
    let report = serde_json::json!({
        "step": step,
        "loss": loss,
        "batch": batch,
        "non_finite_params": worst.iter().map(|(n, _)| n).collect::<Vec<_>>(),
    });
    fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// Trains on the corpus' training split with teacher forcing.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    corpus: &SyntheticCorpus,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone())?;
    let mut params = model.init_params(cfg.seed);
    let (train_idx, _) = corpus.split();
    if train_idx.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let probe: Vec<&Utterance> =
        train_idx.iter().take(cfg.probe_size.max(1)).map(|&i| &corpus.utterances[i]).collect();
    let weights = cfg.loss_weights;
    let initial = evaluate(&model, &params, &probe, &weights, cfg.mel_loss, exec)?;

    let meta = |step| CheckpointMeta { model: model_cfg.clone(), corpus: corpus.config.clone(), step };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0A_D0C0_FFEE);
    let mut order = train_idx.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(cfg.adam, &params);
    let mut log = Vec::with_capacity(cfg.iters);

    for step in 0..cfg.iters {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        while batch_idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<&Utterance> = batch_idx.iter().map(|&i| &corpus.utterances[i]).collect();
        let lr = cfg.lr_at(step);
        let (grads, values) = batch_gradient(&model, &params, &batch, &weights, cfg.mel_loss, exec)?;
        if !values.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            if let Some(dir) = out_dir {
                diagnostic_dump(dir, step, &values, &batch_idx, &params)?;
            }
            return Err(Error::NonFinite { step, detail: format!("{values:?} on batch {batch_idx:?}") });
        }
        opt.step(&mut params, &grads, lr)?;
        log.push(LossRecord { step, lr, loss: values });

        if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if every > 0 && (step + 1) % every == 0 {
                save_checkpoint(dir, &format!("checkpoint_{:06}.bin", step + 1), &meta(step + 1), &params)?;
            }
        }
    }

    let final_eval = evaluate(&model, &params, &probe, &weights, cfg.mel_loss, exec)?;
    if let Some(dir) = out_dir {
        save_checkpoint(dir, "checkpoint.bin", &meta(cfg.iters), &params)?;
        fs::write(dir.join("loss_log.csv"), loss_log_csv(&log))?;
    }
    Ok(TrainOutcome { params, log, initial, final_eval })
}
