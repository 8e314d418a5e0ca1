//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{collect_attention, emit_profile, profile_attention, DistanceMode};
use crate::attention::{AttentionMask, WindowSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{read_checkpoint, Model, ModelConfig, ModelShape, ParamStore, Utterance, Variant};
use crate::numerics::{grad_check_with, write_dump, Precision, Tape, Var, DEFAULT_STEP};
use crate::pitch::{build_hierarchy, PitchEmbedParams, PitchSource};
use crate::training::{
    generate_corpus, loss, run_ablation, train, CheckpointMeta, CorpusConfig, SyntheticCorpus, TrainConfig,
};

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// d = 64, 6 + 6 layers.
    #[default]
    Desk,
    /// d = 8, 2 + 2 layers.
    Tiny,
}

/// JSON run configuration shared by `train`, `ablate` and `gradcheck`.
///
/// Without an explicit `model`, the architecture comes from `preset` and
/// `variant`, with vocabulary, mel bins and global tokens taken from the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Option<Variant>,
    pub model: Option<ModelConfig>,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn shape(&self) -> ModelShape {
        let globals = self.corpus.special_ids();
        let mut shape = match self.preset {
            Preset::Desk => ModelShape::desk(self.corpus.vocab_size, globals),
            Preset::Tiny => ModelShape::tiny(self.corpus.vocab_size, globals),
        };
        shape.mel_bins = self.corpus.mel_bins;
        shape
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match &self.model {
            Some(m) => m.clone(),
            None => self.shape().config(self.variant.unwrap_or(Variant::EgwDwHpc)),
        };
        cfg.validate()?;
        if cfg.vocab_size != self.corpus.vocab_size || cfg.mel_bins != self.corpus.mel_bins {
            return Err(Error::Config(format!(
                "model expects vocab {} / {} mel bins, corpus has {} / {}",
                cfg.vocab_size, cfg.mel_bins, self.corpus.vocab_size, self.corpus.mel_bins
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "hctts", about = "Context-aware attention TTS toolkit", version)]
#[command(subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    /// Run batch work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on the synthetic corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one corpus utterance.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        utt_id: usize,
        #[arg(long, action = clap::ArgAction::Set)]
        teacher_forcing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Profile attention weight against query/key distance.
    Analyze(AnalyzeArgs),
    /// Print or save an attention mask.
    Mask {
        #[arg(long)]
        n: usize,
        /// Window width or `full`.
        #[arg(long, default_value = "full")]
        window: WindowSpec,
        #[arg(long, value_delimiter = ',')]
        global: Vec<usize>,
        /// `.pgm` writes an image; anything else gets the 0/1 text form.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare model variants.
    Ablate {
        /// Comma-separated variant names, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        utt_id: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus_seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Bin by signed offset instead of distance magnitude.
    #[arg(long)]
    signed: bool,
    /// Profile at most this many utterances.
    #[arg(long)]
    limit: Option<usize>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, exec, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, exec: Execution, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train { config, out: dir } => cmd_train(&config, &dir, exec, out),
        Command::Synthesize { ckpt, utt_id, teacher_forcing, out: dir } => {
            cmd_synthesize(&ckpt, utt_id, teacher_forcing, &dir, out)
        }
        Command::Analyze(a) => cmd_analyze(&a, exec, out),
        Command::Mask { n, window, global, out: file } => cmd_mask(n, window, &global, file.as_deref(), out),
        Command::Ablate { variants, out: dir, config } => cmd_ablate(&variants, &dir, config.as_deref(), exec, out),
        Command::Gradcheck { config, utt_id, out: file } => cmd_gradcheck(&config, utt_id, file.as_deref(), exec, out),
    }
}

fn cmd_train(config: &Path, dir: &Path, exec: Execution, out: &mut dyn Write) -> Result<i32> {
    let run = RunConfig::load(config)?;
    let model_cfg = run.model_config()?;
    let corpus = generate_corpus(&run.corpus)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&run)?)?;
    let outcome = train(&run.train, &model_cfg, &corpus, Some(dir), exec)?;
    writeln!(
        out,
        "trained {} for {} steps: probe loss {:.6} -> {:.6}",
        model_cfg.variant,
        run.train.iters,
        outcome.initial.loss.total,
        outcome.final_eval.loss.total
    )?;
    Ok(0)
}

fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_checkpoint(&mut r)
}

fn pitch_embed_params(store: &ParamStore) -> Option<PitchEmbedParams> {
    Some(PitchEmbedParams {
        sentence_w: store.get("hpc.sentence.w")?.clone(),
        sentence_b: store.get("hpc.sentence.b")?.clone(),
        word_w: store.get("hpc.word.w")?.clone(),
        word_b: store.get("hpc.word.b")?.clone(),
    })
}

fn cmd_synthesize(ckpt: &Path, utt_id: usize, teacher_forcing: bool, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let (meta, store) = load_checkpoint(ckpt)?;
    let corpus = generate_corpus(&meta.corpus)?;
    let utt = corpus.utterances.get(utt_id).ok_or(Error::Index { index: utt_id, len: corpus.len() })?;
    let model = Model::new(meta.model.clone())?;
    let inf = model.infer(&store, utt, teacher_forcing)?;
    fs::create_dir_all(dir)?;

    let mut w = BufWriter::new(fs::File::create(dir.join("mel.bin"))?);
    write_dump(&mut w, &inf.mel, Precision::F64)?;
    w.flush()?;
    let mut csv = String::with_capacity(inf.mel.len() * 12);
    for r in 0..inf.mel.rows() {
        let row: Vec<String> = inf.mel.row(r).iter().map(ToString::to_string).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.join("mel.csv"), csv)?;
    let durations: Vec<String> = inf.durations.iter().map(ToString::to_string).collect();
    fs::write(dir.join("durations.txt"), durations.join(" ") + "\n")?;

    let params = pitch_embed_params(&store).unwrap_or_else(|| PitchEmbedParams::zeros(meta.model.d_model));
    let source = if teacher_forcing {
        PitchSource::GroundTruth
    } else {
        PitchSource::Predicted { char_pitch: inf.pitch_pred.data().to_vec(), char_durations: inf.durations.clone() }
    };
    fs::write(dir.join("pitch.csv"), build_hierarchy(utt, &params, &source)?.to_csv())?;

    let mae = if teacher_forcing {
        let s: f64 = inf.mel.data().iter().zip(utt.mel_target.data()).map(|(a, b)| (a - b).abs()).sum();
        Some(s / inf.mel.len() as f64)
    } else {
        None
    };
    write!(out, "utterance {utt_id}: {} chars -> {} frames", utt.len(), inf.mel.rows())?;
    match mae {
        Some(m) => writeln!(out, ", mel MAE {m:.6}")?,
        None => writeln!(out)?,
    }
    Ok(0)
}

fn cmd_analyze(a: &AnalyzeArgs, exec: Execution, out: &mut dyn Write) -> Result<i32> {
    let (meta, store) = load_checkpoint(&a.ckpt)?;
    let corpus = generate_corpus(&CorpusConfig { seed: a.corpus_seed, ..meta.corpus.clone() })?;
    let model = Model::new(meta.model.clone())?;
    let n = a.limit.unwrap_or(corpus.len()).min(corpus.len());
    let utts: Vec<&Utterance> = corpus.utterances.iter().take(n).collect();
    let records = collect_attention(&model, &store, &utts, exec)?;
    let mode = if a.signed { DistanceMode::Signed } else { DistanceMode::Unsigned };
    let profiles = profile_attention(&records, mode, exec)?;
    fs::create_dir_all(&a.out)?;
    emit_profile(&profiles, &a.out.join("profile.csv"), Some(&a.out.join("profile.dat")))?;

    if let Some(first) = utts.first() {
        let globals = model.global_positions(first);
        for l in 0..meta.model.n_enc_layers {
            let mask = model.encoder_mask(l, first.len(), &globals)?;
            let mut w = BufWriter::new(fs::File::create(a.out.join(format!("encoder_mask_{l}.pgm")))?);
            mask.write_pgm(&mut w)?;
            w.flush()?;
        }
    }
    writeln!(out, "profiled {} layers over {n} utterances", profiles.len())?;
    Ok(0)
}

fn cmd_mask(n: usize, window: WindowSpec, global: &[usize], file: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let globals: BTreeSet<usize> = global.iter().copied().collect();
    let mask: AttentionMask = window.build(n)?.with_global(&globals)?;
    match file {
        Some(path) if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            mask.write_pgm(&mut w)?;
            w.flush()?;
        }
        Some(path) => fs::write(path, mask.to_text())?,
        None => out.write_all(mask.to_text().as_bytes())?,
    }
    Ok(0)
}

fn parse_variants(list: &[String]) -> Result<Vec<Variant>> {
    if list.len() == 1 && list[0].eq_ignore_ascii_case("all") {
        return Ok(Variant::ALL.to_vec());
    }
    list.iter().map(|s| s.parse()).collect()
}

fn cmd_ablate(variants: &[String], dir: &Path, config: Option<&Path>, exec: Execution, out: &mut dyn Write) -> Result<i32> {
    let variants = parse_variants(variants)?;
    let run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if run.model.is_some() {
        return Err(Error::config("ablation builds its own model configs; use `preset` instead of `model`"));
    }
    let corpus: SyntheticCorpus = generate_corpus(&run.corpus)?;
    let (table, _) = run_ablation(&variants, &run.shape(), &run.train, &corpus, Some(dir), exec)?;
    out.write_all(table.to_csv().as_bytes())?;
    Ok(0)
}

fn cmd_gradcheck(config: &Path, utt_id: usize, file: Option<&Path>, exec: Execution, out: &mut dyn Write) -> Result<i32> {
    let run = RunConfig::load(config)?;
    let model_cfg = run.model_config()?;
    let corpus = generate_corpus(&run.corpus)?;
    let utt = corpus.utterances.get(utt_id).ok_or(Error::Index { index: utt_id, len: corpus.len() })?;
    let model = Model::new(model_cfg)?;
    let store = model.init_params(run.train.seed);
    let weights = run.train.loss_weights;
    let mel_loss = run.train.mel_loss;
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound = store.bind_vars(vars);
        let fwd = model.forward(tape, &bound, utt, true)?;
        Ok(loss(tape, &fwd, utt, &weights, mel_loss)?.total)
    };
    let report = grad_check_with(objective, &store.to_vec(), DEFAULT_STEP, exec)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    writeln!(
        out,
        "max relative error {:.3e} over {} entries ({})",
        report.max_rel_error,
        report.checked,
        if pass { "pass" } else { "FAIL" }
    )?;
    if let Some(path) = file {
        let json = serde_json::json!({
            "max_rel_error": report.max_rel_error,
            "checked": report.checked,
            "tolerance": GRADCHECK_TOLERANCE,
            "pass": pass,
        });
        fs::write(path, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(if pass { 0 } else { 2 })
}
