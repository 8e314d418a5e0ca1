use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::WindowSpec;
use crate::error::{Error, Result};

/// Encoder spans, first layer to last: small windows near the text input.
pub const ENCODER_SCHEDULE: [WindowSpec; 6] = [
    WindowSpec::Window(10),
    WindowSpec::Window(20),
    WindowSpec::Window(40),
    WindowSpec::Window(60),
    WindowSpec::Window(100),
    WindowSpec::Full,
];

/// Decoder spans, first layer to last: full attention first, then narrowing.
pub const DECODER_SCHEDULE: [WindowSpec; 6] = [
    WindowSpec::Full,
    WindowSpec::Window(400),
    WindowSpec::Window(200),
    WindowSpec::Window(100),
    WindowSpec::Window(60),
    WindowSpec::Window(40),
];

/// 0-based decoder layers receiving the sentence and word pitch conditions
/// (the first and third layers).
pub const HPC_LAYERS: HpcLayers = HpcLayers { sentence_layer: 0, word_layer: 2 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "EGW")]
    Egw,
    #[serde(rename = "DW")]
    Dw,
    #[serde(rename = "EGW_DW")]
    EgwDw,
    #[serde(rename = "EGW_DW_HPC")]
    EgwDwHpc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Egw, Variant::Dw, Variant::EgwDw, Variant::EgwDwHpc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Egw => "EGW",
            Variant::Dw => "DW",
            Variant::EgwDw => "EGW_DW",
            Variant::EgwDwHpc => "EGW_DW_HPC",
        }
    }

    /// Windowed + global attention in the encoder.
    pub fn encoder_windows(self) -> bool {
        matches!(self, Variant::Egw | Variant::EgwDw | Variant::EgwDwHpc)
    }

    pub fn decoder_windows(self) -> bool {
        matches!(self, Variant::Dw | Variant::EgwDw | Variant::EgwDwHpc)
    }

    pub fn pitch_conditioning(self) -> bool {
        self == Variant::EgwDwHpc
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('+', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_uppercase() == norm || (norm == "FASTPITCH" && *v == Variant::Baseline))
            .ok_or_else(|| Error::Parse(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HpcLayers {
    pub sentence_layer: usize,
    pub word_layer: usize,
}

/// Architecture description; serialized field-for-field as the JSON model config.
///
/// The default layer counts (6 + 6) follow from the six-entry window schedules;
/// the layer count itself is not otherwise pinned down and stays configurable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub encoder_schedule: Vec<WindowSpec>,
    pub decoder_schedule: Vec<WindowSpec>,
    pub global_token_ids: BTreeSet<u32>,
    pub hpc: Option<HpcLayers>,
    pub mel_bins: usize,
    pub variant: Variant,
}

/// Dimensions shared by all variants of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub mel_bins: usize,
    pub global_token_ids: BTreeSet<u32>,
    /// Schedules used when the variant enables windowing.
    pub encoder_schedule: Vec<WindowSpec>,
    pub decoder_schedule: Vec<WindowSpec>,
    pub hpc: HpcLayers,
}

impl ModelShape {
    /// d = 64, 2 heads, 20 mel bins and the 6 + 6 layer schedules.
    pub fn desk(vocab_size: usize, global_token_ids: BTreeSet<u32>) -> Self {
        Self {
            d_model: 64,
            heads: 2,
            vocab_size,
            mel_bins: 20,
            global_token_ids,
            encoder_schedule: ENCODER_SCHEDULE.to_vec(),
            decoder_schedule: DECODER_SCHEDULE.to_vec(),
            hpc: HPC_LAYERS,
        }
    }

    /// 2 + 2 layers with d = 8, used for gradient verification.
    pub fn tiny(vocab_size: usize, global_token_ids: BTreeSet<u32>) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            vocab_size,
            mel_bins: 4,
            global_token_ids,
            encoder_schedule: vec![WindowSpec::Window(2), WindowSpec::Full],
            decoder_schedule: vec![WindowSpec::Full, WindowSpec::Window(4)],
            hpc: HpcLayers { sentence_layer: 0, word_layer: 1 },
        }
    }

    pub fn config(&self, variant: Variant) -> ModelConfig {
        let full = |n: usize| vec![WindowSpec::Full; n];
        let (ne, nd) = (self.encoder_schedule.len(), self.decoder_schedule.len());
        ModelConfig {
            n_enc_layers: ne,
            n_dec_layers: nd,
            d_model: self.d_model,
            heads: self.heads,
            vocab_size: self.vocab_size,
            encoder_schedule: if variant.encoder_windows() { self.encoder_schedule.clone() } else { full(ne) },
            decoder_schedule: if variant.decoder_windows() { self.decoder_schedule.clone() } else { full(nd) },
            global_token_ids: if variant.encoder_windows() { self.global_token_ids.clone() } else { BTreeSet::new() },
            hpc: variant.pitch_conditioning().then_some(self.hpc),
            mel_bins: self.mel_bins,
            variant,
        }
    }
}

impl ModelConfig {
    pub fn desk(variant: Variant, vocab_size: usize, global_token_ids: BTreeSet<u32>) -> Self {
        ModelShape::desk(vocab_size, global_token_ids).config(variant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::config("encoder and decoder need at least one layer each"));
        }
        if self.encoder_schedule.len() != self.n_enc_layers {
            return Err(Error::config(format!(
                "encoder schedule has {} entries for {} layers",
                self.encoder_schedule.len(),
                self.n_enc_layers
            )));
        }
        if self.decoder_schedule.len() != self.n_dec_layers {
            return Err(Error::config(format!(
                "decoder schedule has {} entries for {} layers",
                self.decoder_schedule.len(),
                self.n_dec_layers
            )));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 || self.mel_bins == 0 {
            return Err(Error::config("vocab_size and mel_bins must be positive"));
        }
        for w in self.encoder_schedule.iter().chain(&self.decoder_schedule) {
            w.validate()?;
        }
        if let Some(&id) = self.global_token_ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::config(format!("global token id {id} outside vocabulary of {}", self.vocab_size)));
        }

        if let Some(h) = self.hpc {
            if h.sentence_layer >= h.word_layer {
                return Err(Error::config(format!(
                    "sentence pitch layer {} must be below word pitch layer {}",
                    h.sentence_layer, h.word_layer
                )));
            }
            if h.word_layer >= self.n_dec_layers {
                return Err(Error::config(format!(
                    "word pitch layer {} outside {} decoder layers",
                    h.word_layer, self.n_dec_layers
                )));
            }
        }

        let spans = |s: &[WindowSpec]| s.iter().map(|w| w.span()).collect::<Vec<_>>();
        let enc = spans(&self.encoder_schedule);
        if enc.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::config(format!("encoder spans must not shrink with depth: {:?}", self.encoder_schedule)));
        }
        let dec = spans(&self.decoder_schedule);
        if dec.len() > 2 && dec[1..].windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::config(format!(
                "decoder spans must not grow with depth after the first layer: {:?}",
                self.decoder_schedule
            )));
        }

        let all_full = |s: &[WindowSpec]| s.iter().all(|w| *w == WindowSpec::Full);
        match self.variant {
            Variant::Baseline => {
                if !all_full(&self.encoder_schedule) || !all_full(&self.decoder_schedule) {
                    return Err(Error::config("baseline variant requires full attention everywhere"));
                }
                if !self.global_token_ids.is_empty() {
                    return Err(Error::config("baseline variant takes no global tokens"));
                }
            }
            Variant::Egw => {
                if !all_full(&self.decoder_schedule) {
                    return Err(Error::config("EGW variant requires a full-attention decoder"));
                }
            }
            Variant::Dw => {
                if !all_full(&self.encoder_schedule) || !self.global_token_ids.is_empty() {
                    return Err(Error::config("DW variant requires a full-attention encoder without globals"));
                }
            }
            Variant::EgwDw => {}
            Variant::EgwDwHpc => {
                if self.hpc.is_none() {
                    return Err(Error::config("EGW_DW_HPC variant requires hpc layers"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn globals() -> BTreeSet<u32> {
        BTreeSet::from([14, 15])
    }

    #[test]
    fn variants_validate() {
        for v in Variant::ALL {
            ModelConfig::desk(v, 16, globals()).validate().unwrap();
            ModelShape::tiny(16, globals()).config(v).validate().unwrap();
        }
    }

    #[test]
    fn variant_contracts() {
        let base = ModelConfig::desk(Variant::Baseline, 16, globals());
        assert!(base.encoder_schedule.iter().chain(&base.decoder_schedule).all(|w| *w == WindowSpec::Full));
        assert!(base.global_token_ids.is_empty() && base.hpc.is_none());

        let dw = ModelConfig::desk(Variant::Dw, 16, globals());
        assert_eq!(dw.decoder_schedule, DECODER_SCHEDULE.to_vec());
        assert!(dw.global_token_ids.is_empty());

        let egw = ModelConfig::desk(Variant::Egw, 16, globals());
        assert_eq!(egw.encoder_schedule, ENCODER_SCHEDULE.to_vec());
        assert_eq!(egw.global_token_ids, globals());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = ModelConfig::desk(Variant::EgwDwHpc, 16, globals());
        c.hpc = Some(HpcLayers { sentence_layer: 2, word_layer: 2 });
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(Variant::EgwDw, 16, globals());
        c.encoder_schedule.reverse();
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(Variant::EgwDw, 16, globals());
        c.decoder_schedule.swap(1, 5);
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(Variant::Baseline, 16, globals());
        c.encoder_schedule[0] = WindowSpec::Window(10);
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(Variant::EgwDw, 16, globals());
        c.n_enc_layers = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::desk(Variant::EgwDw, 16, globals());
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = ModelConfig::desk(Variant::EgwDwHpc, 16, globals());
        let back = ModelConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("EGW+DW+HPC".parse::<Variant>().unwrap(), Variant::EgwDwHpc);
        assert_eq!("egw_dw".parse::<Variant>().unwrap(), Variant::EgwDw);
        assert!("HPC".parse::<Variant>().is_err());
    }
}
