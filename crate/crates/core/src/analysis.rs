//! Attention-distance profiling.
//!
//! For every layer, attention weights are binned by the distance between
//! query and key position and averaged, pooling all heads and utterances.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{LayerAttention, Model, ParamStore, Utterance};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Encoder,
    Decoder,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Encoder => "encoder",
            Module::Decoder => "decoder",
        })
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Module::Encoder),
            "decoder" => Ok(Module::Decoder),
            other => Err(Error::Parse(format!("unknown module `{other}`"))),
        }
    }
}

/// How the query/key offset is mapped to a bin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMode {
    /// `|i - j|`
    #[default]
    Unsigned,
    /// `j - i`; negative bins look backwards.
    Signed,
}

impl DistanceMode {
    fn distance(self, i: usize, j: usize) -> i64 {
        let d = j as i64 - i as i64;
        match self {
            DistanceMode::Unsigned => d.abs(),
            DistanceMode::Signed => d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub mean_weight: f64,
    pub count: u64,
}

/// Mean attention weight per query/key distance for one layer. Distances
/// that were never observed have no bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    pub module: Module,
    pub layer: usize,
    pub bins: BTreeMap<i64, DistanceBin>,
}

impl DistanceProfile {
    pub fn mean_at(&self, distance: i64) -> Option<f64> {
        self.bins.get(&distance).map(|b| b.mean_weight)
    }

    /// Largest mean weight at distances with magnitude above `half_width`.
    pub fn max_beyond(&self, half_width: usize) -> f64 {
        self.bins
            .iter()
            .filter(|(d, _)| d.unsigned_abs() > half_width as u64)
            .map(|(_, b)| b.mean_weight)
            .fold(0.0, f64::max)
    }

    /// Total mean weight over distances with magnitude at most `radius`.
    pub fn mass_within(&self, radius: usize) -> f64 {
        self.bins.iter().filter(|(d, _)| d.unsigned_abs() <= radius as u64).map(|(_, b)| b.mean_weight).sum()
    }
}

/// Running sums per (module, layer, distance). Accumulators built on
/// separate threads combine with [`ProfileAccumulator::merge`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProfileAccumulator {
    mode: DistanceMode,
    sums: BTreeMap<(Module, usize), BTreeMap<i64, (f64, u64)>>,
}

impl ProfileAccumulator {
    pub fn new(mode: DistanceMode) -> Self {
        Self { mode, sums: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn add_matrix(&mut self, module: Module, layer: usize, weights: &Tensor) -> Result<()> {
        let (rows, cols) = weights.require_2d("attention weights")?;
        let bins = self.sums.entry((module, layer)).or_default();
        for i in 0..rows {
            for (j, &w) in weights.row(i).iter().enumerate().take(cols) {
                let e = bins.entry(self.mode.distance(i, j)).or_insert((0.0, 0));
                e.0 += w;
                e.1 += 1;
            }
        }
        Ok(())
    }

    pub fn add_layer(&mut self, module: Module, record: &LayerAttention) -> Result<()> {
        record.heads.iter().try_for_each(|h| self.add_matrix(module, record.layer, h))
    }

    pub fn add_utterance(&mut self, record: &AttentionRecord) -> Result<()> {
        record.encoder.iter().try_for_each(|l| self.add_layer(Module::Encoder, l))?;
        record.decoder.iter().try_for_each(|l| self.add_layer(Module::Decoder, l))
    }

    pub fn merge(&mut self, other: ProfileAccumulator) -> Result<()> {
        if other.mode != self.mode {
            return Err(Error::input("cannot merge profiles with different distance modes"));
        }
        for (key, bins) in other.sums {
            let mine = self.sums.entry(key).or_default();
            for (d, (s, c)) in bins {
                let e = mine.entry(d).or_insert((0.0, 0));
                e.0 += s;
                e.1 += c;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<DistanceProfile> {
        self.sums
            .into_iter()
            .map(|((module, layer), bins)| DistanceProfile {
                module,
                layer,
                bins: bins
                    .into_iter()
                    .map(|(d, (s, c))| (d, DistanceBin { mean_weight: s / c as f64, count: c }))
                    .collect(),
            })
            .collect()
    }
}

/// Attention recorded from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub encoder: Vec<LayerAttention>,
    pub decoder: Vec<LayerAttention>,
}

/// Runs teacher-forced forward passes and keeps the attention weights.
pub fn collect_attention(
    model: &Model,
    params: &ParamStore,
    utts: &[&Utterance],
    exec: Execution,
) -> Result<Vec<AttentionRecord>> {
    exec.map(utts, |u| {
        model
            .infer(params, u, true)
            .map(|inf| AttentionRecord { encoder: inf.encoder_attention, decoder: inf.decoder_attention })
    })
    .into_iter()
    .collect()
}

/// Profiles every layer over a set of recorded forward passes. Each record is
/// binned independently (possibly in parallel) and merged in input order.
pub fn profile_attention(records: &[AttentionRecord], mode: DistanceMode, exec: Execution) -> Result<Vec<DistanceProfile>> {
    if records.iter().all(|r| r.encoder.is_empty() && r.decoder.is_empty()) {
        return Err(Error::input("no attention records to profile"));
    }
    let partial = exec.map(records, |r| {
        let mut acc = ProfileAccumulator::new(mode);
        acc.add_utterance(r).map(|_| acc)
    });
    let mut acc = ProfileAccumulator::new(mode);
    for p in partial {
        acc.merge(p?)?;
    }
    Ok(acc.finish())
}

/// Profile of a single weight matrix.
pub fn profile_matrix(weights: &Tensor, mode: DistanceMode) -> Result<DistanceProfile> {
    let mut acc = ProfileAccumulator::new(mode);
    acc.add_matrix(Module::Encoder, 0, weights)?;
    Ok(acc.finish().pop().unwrap_or(DistanceProfile { module: Module::Encoder, layer: 0, bins: BTreeMap::new() }))
}

pub const PROFILE_HEADER: &str = "module,layer,distance,mean_weight,count";

pub fn profiles_to_csv(profiles: &[DistanceProfile]) -> String {
    let mut s = format!("{PROFILE_HEADER}\n");
    for p in profiles {
        for (d, b) in &p.bins {
            let _ = writeln!(s, "{},{},{},{},{}", p.module, p.layer, d, b.mean_weight, b.count);
        }
    }
    s
}

pub fn parse_profiles_csv(text: &str) -> Result<Vec<DistanceProfile>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PROFILE_HEADER => {}
        other => return Err(Error::Parse(format!("expected header `{PROFILE_HEADER}`, got {other:?}"))),
    }
    let mut out: Vec<DistanceProfile> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::Parse(format!("line {}: bad {what} in `{line}`", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("field count"));
        }
        let module: Module = f[0].parse()?;
        let layer: usize = f[1].parse().map_err(|_| bad("layer"))?;
        let distance: i64 = f[2].parse().map_err(|_| bad("distance"))?;
        let mean_weight: f64 = f[3].parse().map_err(|_| bad("mean_weight"))?;
        let count: u64 = f[4].parse().map_err(|_| bad("count"))?;
        if out.last().is_none_or(|p| p.module != module || p.layer != layer) {
            out.push(DistanceProfile { module, layer, bins: BTreeMap::new() });
        }
        out.last_mut().expect("pushed").bins.insert(distance, DistanceBin { mean_weight, count });
    }
    Ok(out)
}

/// One gnuplot data block per layer, separated by two blank lines so that
/// `index N` selects a layer.
pub fn gnuplot_blocks(profiles: &[DistanceProfile]) -> String {
    let mut s = String::new();
    for (k, p) in profiles.iter().enumerate() {
        if k > 0 {
            s.push_str("\n\n");
        }
        let _ = writeln!(s, "# index {k}: {} layer {}", p.module, p.layer);
        let _ = writeln!(s, "# distance mean_weight count");
        for (d, b) in &p.bins {
            let _ = writeln!(s, "{d} {} {}", b.mean_weight, b.count);
        }
    }
    s
}

/// Writes the CSV to `path` and, if requested, gnuplot blocks to `plot_path`.
pub fn emit_profile(profiles: &[DistanceProfile], path: &Path, plot_path: Option<&Path>) -> Result<()> {
    fs::write(path, profiles_to_csv(profiles))?;
    if let Some(p) = plot_path {
        fs::write(p, gnuplot_blocks(profiles))?;
    }
    Ok(())
}
