//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use hctts::analysis::{collect_attention, profile_attention, profile_matrix, DistanceMode, Module};
use hctts::attention::{add_global, build_windowed_mask, WindowSpec};
use hctts::cli::RunConfig;
use hctts::exec::Execution;
use hctts::model::{
    length_regulate, DECODER_SCHEDULE, ENCODER_SCHEDULE, HpcLayers, Model, ModelConfig, ModelShape, ParamStore,
    Utterance, Variant,
};
use hctts::numerics::{grad_check_with, Tape, Tensor, Var, DEFAULT_STEP};
use hctts::pitch::{aggregate_sentence, aggregate_word, embed_word, replicate, word_durations, PitchEmbedParams, WordSpan};
use hctts::training::{
    generate_corpus, loss, run_ablation, train, AblationRun, CorpusConfig, LossWeights, MelLoss, SyntheticCorpus,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk_corpus() -> SyntheticCorpus {
    generate_corpus(&CorpusConfig::default()).expect("corpus")
}

fn desk_shape(c: &SyntheticCorpus) -> ModelShape {
    ModelShape::desk(c.config.vocab_size, c.global_token_ids())
}

fn mask_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    for n in 1..=64usize {
        for w in 1..=2 * n {
            let mask = build_windowed_mask(n, w).expect("valid window");
            let half = (w / 2) as isize;
            for i in 0..n {
                for j in 0..n {
                    if mask.allowed(i, j) != ((i as isize - j as isize).abs() <= half) {
                        return outcome(false, format!("window mismatch at n={n} w={w} ({i},{j})"));
                    }
                }
            }
            let globals: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.15)).collect();
            let with = add_global(mask.clone(), &globals).expect("in range");
            for i in 0..n {
                for j in 0..n {
                    let naive = mask.allowed(i, j) || globals.contains(&i) || globals.contains(&j);
                    if with.allowed(i, j) != naive {
                        return outcome(false, format!("global mismatch at n={n} w={w} ({i},{j})"));
                    }
                }
            }
            checked += 1;
        }
    }
    let t = start.elapsed();
    outcome(t < Duration::from_secs(10), format!("{checked} (n, w) pairs exact, {t:.2?} (limit 10 s)"))
}

fn schedules() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = match RunConfig::load(&path).and_then(|r| r.model_config()) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("desk config: {e}")),
    };
    let w = WindowSpec::Window;
    let enc_expected = vec![w(10), w(20), w(40), w(60), w(100), WindowSpec::Full];
    let dec_expected = vec![WindowSpec::Full, w(400), w(200), w(100), w(60), w(40)];
    let json = r#"{
        "n_enc_layers": 6, "n_dec_layers": 6, "d_model": 64, "heads": 2, "vocab_size": 16,
        "encoder_schedule": [10, 20, 40, 60, 100, "full"],
        "decoder_schedule": ["full", 400, 200, 100, 60, 40],
        "global_token_ids": [14, 15],
        "hpc": {"sentence_layer": 0, "word_layer": 2},
        "mel_bins": 20, "variant": "EGW_DW_HPC"
    }"#;
    let parsed = ModelConfig::from_json(json);
    let bad = ModelConfig::from_json(&json.replace("[10, 20, 40, 60, 100", "[20, 10, 40, 60, 100"));
    let ok = cfg.encoder_schedule == enc_expected
        && cfg.decoder_schedule == dec_expected
        && ENCODER_SCHEDULE.to_vec() == enc_expected
        && DECODER_SCHEDULE.to_vec() == dec_expected
        && cfg.hpc == Some(HpcLayers { sentence_layer: 0, word_layer: 2 })
        && cfg.d_model == 64
        && parsed.as_ref().is_ok_and(|p| *p == cfg)
        && bad.is_err();
    outcome(
        ok,
        format!(
            "encoder {:?}, decoder {:?}, pitch-conditioned decoder layers 1 and 3, d={}; non-monotone schedule rejected: {}",
            cfg.encoder_schedule.iter().map(ToString::to_string).collect::<Vec<_>>(),
            cfg.decoder_schedule.iter().map(ToString::to_string).collect::<Vec<_>>(),
            cfg.d_model,
            bad.is_err()
        ),
    )
}

fn normalization(corpus: &SyntheticCorpus) -> Outcome {
    let shape = desk_shape(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut masked_nonzero = 0usize;
    let mut rows = 0usize;
    for pass in 0..100 {
        let v = Variant::ALL[pass % 5];
        let model = Model::new(shape.config(v)).expect("config");
        let store = model.init_params(rng.random());
        let utt = &corpus.utterances[rng.random_range(0..corpus.len())];
        let inf = model.infer(&store, utt, rng.random_bool(0.5)).expect("forward");
        let globals = model.global_positions(utt);
        let t = inf.mel.rows();
        for rec in &inf.encoder_attention {
            let mask = model.encoder_mask(rec.layer, utt.len(), &globals).expect("mask");
            for h in &rec.heads {
                for i in 0..h.rows() {
                    worst = worst.max((h.row(i).iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                    masked_nonzero += (0..h.cols()).filter(|&j| !mask.allowed(i, j) && h.at(i, j) != 0.0).count();
                }
            }
        }
        for rec in &inf.decoder_attention {
            let mask = rec.window.build(t).expect("mask");
            for h in &rec.heads {
                for i in 0..h.rows() {
                    worst = worst.max((h.row(i).iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                    masked_nonzero += (0..h.cols()).filter(|&j| !mask.allowed(i, j) && h.at(i, j) != 0.0).count();
                }
            }
        }
    }
    outcome(
        worst <= 1e-9 && masked_nonzero == 0,
        format!("{rows} rows, max |row sum - 1| = {worst:.1e} (tol 1e-9), nonzero masked entries: {masked_nonzero}"),
    )
}

fn zero_hpc(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    for name in ["hpc.sentence.w", "hpc.sentence.b", "hpc.word.w", "hpc.word.b"] {
        s.get_mut(name).expect("hpc param").data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    s
}

fn zero_pitch_reduction(corpus: &SyntheticCorpus) -> Outcome {
    let shape = desk_shape(corpus);
    let mut identical = 0;
    let mut total = 0;
    for v in Variant::ALL {
        let plain = shape.config(v);
        let conditioned = ModelConfig { hpc: Some(shape.hpc), ..plain.clone() };
        let store = zero_hpc(&Model::new(conditioned.clone()).expect("config").init_params(v as u64));
        for utt in corpus.utterances.iter().take(4) {
            let a = Model::new(plain.clone()).unwrap().infer(&store, utt, true).expect("forward");
            let b = Model::new(conditioned.clone()).unwrap().infer(&store, utt, true).expect("forward");
            total += 1;
            identical += usize::from(a.mel.bit_eq(&b.mel));
        }
    }
    outcome(identical == total, format!("{identical}/{total} mel outputs bit-identical across 5 variants"))
}

fn full_window_equivalence(corpus: &SyntheticCorpus) -> Outcome {
    let shape = desk_shape(corpus);
    let mut identical = 0;
    let mut total = 0;
    for utt in corpus.utterances.iter().take(6) {
        let (n, t) = (utt.len(), utt.frames());
        for v in [Variant::EgwDw, Variant::EgwDwHpc] {
            let base = shape.config(v);
            let wide = ModelConfig {
                encoder_schedule: (0..6).map(|l| if l < 5 { WindowSpec::Window(2 * (n - 1) + l) } else { WindowSpec::Full }).collect(),
                decoder_schedule: (0..6).map(|l| if l == 0 { WindowSpec::Full } else { WindowSpec::Window(2 * t + 8 - l) }).collect(),
                ..base.clone()
            };
            let full = ModelConfig {
                encoder_schedule: vec![WindowSpec::Full; 6],
                decoder_schedule: vec![WindowSpec::Full; 6],
                ..base.clone()
            };
            let (Ok(mw), Ok(mf)) = (Model::new(wide.clone()), Model::new(full.clone())) else {
                return outcome(false, "equivalence configs failed validation");
            };
            let store = mw.init_params(n as u64);
            let a = mw.infer(&store, utt, true).expect("forward");
            let b = mf.infer(&store, utt, true).expect("forward");
            total += 1;
            identical += usize::from(a.mel.bit_eq(&b.mel) && a.dur_pred.bit_eq(&b.dur_pred));
        }
    }
    outcome(identical == total, format!("{identical}/{total} forward passes bit-identical (floor(w/2) >= n-1 vs Full)"))
}

fn gradient_check() -> Outcome {
    let corpus = generate_corpus(&CorpusConfig { n_utts: 12, len_range: (6, 6), mel_bins: 4, special_rate: 0.3, ..Default::default() })
        .expect("corpus");
    let mut shape = ModelShape::tiny(corpus.config.vocab_size, corpus.global_token_ids());
    shape.mel_bins = corpus.config.mel_bins;
    let utt = &corpus.utterances[0];
    let mut parts = Vec::new();
    let mut pass = true;
    for v in Variant::ALL {
        let model = Model::new(shape.config(v)).expect("config");
        let store = model.init_params(0);
        let start = Instant::now();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let p = store.bind_vars(vars);
            let out = model.forward(tape, &p, utt, true)?;
            Ok(loss(tape, &out, utt, &LossWeights::default(), MelLoss::Mae)?.total)
        };
        let report = grad_check_with(f, &store.to_vec(), DEFAULT_STEP, Execution::Sequential).expect("grad check");
        let t = start.elapsed();
        let ok = report.max_rel_error < 1e-4 && t < Duration::from_secs(60);
        pass &= ok;
        let mut part = format!("{v} {:.2e} (|g|={:.1e}, {:.1?})", report.max_rel_error, report.analytic_at_worst.abs(), t);
        if !ok {
            // Cross-check the worst entry against a Richardson-extrapolated
            // difference with larger steps, which is not limited by the
            // rounding of the scalar loss.
            let (pi, ei) = report.worst;
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.tensor_mut(pi).data_mut()[ei] += delta;
                let mut tape = Tape::new();
                let p = s.bind(&mut tape);
                let out = model.forward(&mut tape, &p, utt, true).expect("forward");
                let total = loss(&mut tape, &out, utt, &LossWeights::default(), MelLoss::Mae).expect("loss").total;
                tape.value(total).item()
            };
            let cd = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
            let extrapolated = (4.0 * cd(1e-3) - cd(2e-3)) / 3.0;
            let agree = (extrapolated - report.analytic_at_worst).abs() / extrapolated.abs();
            part += &format!(
                " FAIL [worst entry {}[{ei}]: analytic {:.6e}, h=1e-5 difference {:.6e}, extrapolated {:.6e} (analytic within {agree:.1e}); loss {:.3}]",
                store.names()[pi],
                report.analytic_at_worst,
                report.numeric_at_worst,
                extrapolated,
                eval(0.0)
            );
        }
        parts.push(part);
    }
    outcome(pass, format!("2+2 layers, d=8, n=6, h=1e-5, tol 1e-4: {}", parts.join("; ")))
}

fn toy_training(corpus: &SyntheticCorpus, runs: &[AblationRun], cfg: &TrainConfig) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let (i, f) = (r.outcome.initial.loss.total, r.outcome.final_eval.loss.total);
        let ratio = f / i;
        let ok = ratio < 0.5 && r.elapsed < Duration::from_secs(300);
        pass &= ok;
        parts.push(format!("{} {:.3}->{:.3} ({:.0}%, {:.0?})", r.config.variant, i, f, 100.0 * ratio, r.elapsed));
    }
    // Determinism: rerun one variant on the thread pool and compare bytes.
    let check = &runs[runs.len() - 1];
    let again = train(cfg, &check.config, corpus, None, Execution::Parallel).expect("rerun");
    let same_log = again.log.len() == check.outcome.log.len()
        && again.log.iter().zip(&check.outcome.log).all(|(a, b)| a.loss.total.to_bits() == b.loss.total.to_bits());
    let deterministic = same_log && again.params.bit_eq(&check.outcome.params);
    pass &= deterministic && runs.len() == 5;
    outcome(
        pass,
        format!(
            "{} steps, batch {}, {} utterances; {}; rerun of {} identical: {deterministic}",
            cfg.iters,
            cfg.batch_size,
            corpus.len(),
            parts.join("; "),
            check.config.variant
        ),
    )
}

fn naive_profile(m: &Tensor) -> BTreeMap<i64, f64> {
    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let e = sums.entry((i as i64 - j as i64).abs()).or_insert((0.0, 0));
            e.0 += m.at(i, j);
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}

fn profiler(runs: &[AblationRun]) -> Outcome {
    let probe = generate_corpus(&CorpusConfig { seed: 99, n_utts: 30, len_range: (12, 40), special_rate: 0.0, ..Default::default() })
        .expect("corpus");
    let utts: Vec<&Utterance> = probe.utterances.iter().collect();
    let mut windowed = 0;
    let mut binding = 0;
    let mut worst: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for r in runs {
        let model = Model::new(r.config.clone()).expect("config");
        let records = collect_attention(&model, &r.outcome.params, &utts, Execution::default()).expect("forward");
        let profiles = profile_attention(&records, DistanceMode::Unsigned, Execution::default()).expect("profile");
        for p in &profiles {
            let window = match p.module {
                Module::Encoder => r.config.encoder_schedule[p.layer],
                Module::Decoder => r.config.decoder_schedule[p.layer],
            };
            if let Some(half) = window.half_width() {
                windowed += 1;
                if p.bins.keys().any(|&d| d as usize > half) {
                    binding += 1;
                }
                worst = worst.max(p.max_beyond(half));
            }
        }
        for rec in records[0].encoder.iter().chain(&records[0].decoder) {
            for h in &rec.heads {
                let got = profile_matrix(h, DistanceMode::Unsigned).expect("profile");
                let want = naive_profile(h);
                if got.bins.len() != want.len() {
                    return outcome(false, "profile bins differ from naive oracle");
                }
                for (d, m) in want {
                    oracle_err = oracle_err.max((got.bins[&d].mean_weight - m).abs());
                }
            }
        }
    }
    outcome(
        worst <= 1e-12 && oracle_err <= 1e-12 && binding > 0,
        format!(
            "{windowed} windowed layer profiles ({binding} with distances past the band): max weight beyond half-window {worst:.1e}; naive-oracle max diff {oracle_err:.1e} (tol 1e-12)"
        ),
    )
}

fn pitch_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agg_err: f64 = 0.0;
    let mut dur_ok = true;
    let mut rep_err: f64 = 0.0;
    for k in 0..1000 {
        let n = rng.random_range(1..=40);
        let mut spans = Vec::new();
        let mut pos = 0;
        while pos < n {
            let len = rng.random_range(1..=6).min(n - pos);
            spans.push(WordSpan::new(pos, pos + len));
            pos += len;
        }
        let pitch: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let durs: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();

        let words = aggregate_word(&pitch, &spans).expect("aggregate");
        for (w, s) in words.iter().zip(&spans) {
            let mut sum = 0.0;
            for p in &pitch[s.start..s.end] {
                sum += p;
            }
            agg_err = agg_err.max((w - sum / (s.end - s.start) as f64).abs());
        }
        let mut total = 0.0;
        for &p in &pitch {
            total += p;
        }
        agg_err = agg_err.max((aggregate_sentence(&pitch).expect("sentence") - total / n as f64).abs());

        let wd = word_durations(&durs, &spans).expect("durations");
        let t: usize = durs.iter().sum();
        dur_ok &= wd.iter().sum::<usize>() == t;

        if k < 200 && t > 0 {
            let d = 8;
            let params = PitchEmbedParams {
                sentence_w: Tensor::zeros(&[1, d]),
                sentence_b: Tensor::zeros(&[d]),
                word_w: Tensor::new(vec![3, 1, d], (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                word_b: Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            };
            let emb = embed_word(&words, &params).expect("embed");
            let a = replicate(&emb, &wd, t).expect("replicate");
            let b = length_regulate(&emb, &wd).expect("regulate");
            rep_err = rep_err.max(if a.shape() == b.shape() { a.max_abs_diff(&b) } else { f64::INFINITY });
        }
    }
    outcome(
        agg_err <= 1e-12 && dur_ok && rep_err == 0.0,
        format!("aggregation max diff {agg_err:.1e} (tol 1e-12); duration sums exact on 1000 utterances: {dur_ok}; replicate vs length_regulate max diff {rep_err:.1e}"),
    )
}

fn ablation_table(runs: &[AblationRun], table: &hctts::training::AblationTable) -> Outcome {
    let expected = ["baseline", "EGW", "DW", "EGW_DW", "EGW_DW_HPC"];
    let names: Vec<String> = table.rows.iter().map(|r| r.variant.to_string()).collect();
    let finite = table.rows.iter().all(|r| r.is_finite());
    let baseline = &runs[0].config;
    let baseline_full = baseline.encoder_schedule.iter().chain(&baseline.decoder_schedule).all(|w| *w == WindowSpec::Full)
        && baseline.global_token_ids.is_empty()
        && baseline.hpc.is_none();
    let csv = table.to_csv();
    outcome(
        names == expected && finite && baseline_full && csv.lines().count() == 6,
        format!("rows {names:?}, finite metrics: {finite}, baseline all-Full without globals or pitch conditioning: {baseline_full}\n{csv}"),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, o: Outcome, results: &mut Vec<(&str, Outcome)>| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    let corpus = desk_corpus();

    report("mask oracle", mask_oracle(), &mut results);
    report("schedules", schedules(), &mut results);
    report("attention normalization", normalization(&corpus), &mut results);
    report("zero pitch reduction", zero_pitch_reduction(&corpus), &mut results);
    report("full-window equivalence", full_window_equivalence(&corpus), &mut results);
    report("gradient verification", gradient_check(), &mut results);
    report("pitch pipeline", pitch_pipeline(), &mut results);

    let cfg = TrainConfig::default();
    let shape = desk_shape(&corpus);
    let (table, runs) =
        run_ablation(&Variant::ALL, &shape, &cfg, &corpus, None, Execution::Sequential).expect("ablation run");
    report("toy training", toy_training(&corpus, &runs, &cfg), &mut results);
    report("profiler guarantee", profiler(&runs), &mut results);
    report("ablation table", ablation_table(&runs, &table), &mut results);

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
