use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{evaluate, train, Evaluation, SyntheticCorpus, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Model, ModelConfig, ModelShape, Utterance, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Held-out teacher-forced mel mean absolute error.
    pub mel_mae: f64,
    /// Held-out char-pitch root-mean-square error.
    pub pitch_rmse: f64,
}

impl AblationRow {
    pub fn is_finite(&self) -> bool {
        [self.initial_loss, self.final_loss, self.mel_mae, self.pitch_rmse].iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,initial_loss,final_loss,heldout_mel_mae,heldout_pitch_rmse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.initial_loss, r.final_loss, r.mel_mae, r.pitch_rmse);
        }
        s
    }
}

/// One variant's full result, kept alongside the table row.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub config: ModelConfig,
    pub outcome: TrainOutcome,
    pub heldout: Evaluation,
    /// Wall-clock time spent training this variant.
    pub elapsed: Duration,
}

/// Trains every variant on the same corpus with the same seed and reports
/// held-out metrics. With an output directory, each variant gets a
/// subdirectory with its log and checkpoint, and `ablation.csv` is written.
pub fn run_ablation(
    variants: &[Variant],
    shape: &ModelShape,
    train_cfg: &TrainConfig,
    corpus: &SyntheticCorpus,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<(AblationTable, Vec<AblationRun>)> {
    if variants.is_empty() {
        return Err(Error::input("no variants requested"));
    }
    let (_, heldout_idx) = corpus.split();
    if heldout_idx.is_empty() {
        return Err(Error::input("held-out split is empty"));
    }
    let heldout: Vec<&Utterance> = heldout_idx.iter().map(|&i| &corpus.utterances[i]).collect();
    let mut table = AblationTable::default();
    let mut runs = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = shape.config(variant);
        cfg.validate()?;
        let sub = out_dir.map(|d| d.join(variant.name()));
        let started = Instant::now();
        let outcome = train(train_cfg, &cfg, corpus, sub.as_deref(), exec)?;
        let elapsed = started.elapsed();
        let model = Model::new(cfg.clone())?;
        let ev = evaluate(&model, &outcome.params, &heldout, &train_cfg.loss_weights, train_cfg.mel_loss, exec)?;
        table.rows.push(AblationRow {
            variant,
            initial_loss: outcome.initial.loss.total,
            final_loss: outcome.final_eval.loss.total,
            mel_mae: ev.mel_mae,
            pitch_rmse: ev.pitch_rmse,
        });
        runs.push(AblationRun { config: cfg, outcome, heldout: ev, elapsed });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), table.to_csv())?;
    }
    Ok((table, runs))
}
