use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CcMode, LfibOptions, TransformerOptions};

/// Transformer stage settings; the embedding dimension is the third stage width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    pub focus_power: f64,
    pub mlp_ratio: usize,
    pub cab_compress: usize,
    pub cab_reduction: usize,
    pub cc: bool,
    pub cc_mode: CcMode,
    pub normalized_attention: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            blocks: 1,
            heads: 1,
            focus_power: 3.0,
            mlp_ratio: 4,
            cab_compress: 16,
            cab_reduction: 16,
            cc: true,
            cc_mode: CcMode::Multiplicative,
            normalized_attention: true,
        }
    }
}

/// Declarative description of the whole network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub classes: usize,
    /// Channel widths at 1/2, 1/4 and 1/8 resolution.
    pub widths: Vec<usize>,
    /// Blocks per stage: three encoder stages, then three decoder stages.
    pub lfib_counts: Vec<usize>,
    pub encoder_dilations: Vec<usize>,
    pub decoder_dilations: Vec<usize>,
    pub transformer: TransformerConfig,
    pub cc_in_lfib: bool,
    pub cc_reduction: usize,
    pub cru_alpha: f64,
    pub cru_squeeze: usize,
    pub depthwise_asym: bool,
    pub shuffle_groups: usize,
    pub batch_norm: bool,
    pub fe_reduction: usize,
    /// Downsampling factors of the decoder features feeding the head.
    pub seghead_taps: Vec<usize>,
    pub seghead_width: usize,
    pub aux_tap: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            classes: 19,
            widths: vec![48, 96, 160],
            lfib_counts: vec![2; 6],
            encoder_dilations: vec![1, 2, 4],
            decoder_dilations: vec![4, 2, 1],
            transformer: TransformerConfig::default(),
            cc_in_lfib: true,
            cc_reduction: 8,
            cru_alpha: 0.5,
            cru_squeeze: 4,
            depthwise_asym: true,
            shuffle_groups: 2,
            batch_norm: true,
            fe_reduction: 16,
            seghead_taps: vec![2, 4, 8],
            seghead_width: 16,
            aux_tap: 8,
            seed: 0,
        }
    }
}

pub const TAP_SCALES: [usize; 3] = [2, 4, 8];

impl NetworkConfig {
    pub fn with_classes(mut self, k: usize) -> Self {
        self.classes = k;
        self
    }

    /// Every violated invariant, in a stable order. Empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.widths.len() != 3 {
            v.push(format!(
                "widths must have 3 entries, got {}",
                self.widths.len()
            ));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % 2 != 0 {
                v.push(format!("widths[{i}] = {w} must be positive and even"));
                continue;
            }
            if self.shuffle_groups == 0 || w % self.shuffle_groups != 0 {
                v.push(format!(
                    "shuffle_groups {} must divide widths[{i}] = {w}",
                    self.shuffle_groups
                ));
            }
            if self.cc_in_lfib && (self.cc_reduction == 0 || (w / 2) % self.cc_reduction != 0) {
                v.push(format!(
                    "cc_reduction {} must divide half of widths[{i}] = {}",
                    self.cc_reduction,
                    w / 2
                ));
            }
            let rich = self.cru_alpha * w as f64;
            if !(self.cru_alpha > 0.0 && self.cru_alpha < 1.0) || (rich - rich.round()).abs() > 1e-9
            {
                v.push(format!(
                    "cru_alpha {} does not split widths[{i}] = {w} into whole channels",
                    self.cru_alpha
                ));
            } else {
                let rich = rich.round() as usize;
                let cheap = w - rich;
                let s = self.cru_squeeze;
                if s == 0 || rich % s != 0 || cheap % s != 0 || (rich / s) % 2 != 0 {
                    v.push(format!(
                        "cru_squeeze {s} must divide the {rich}/{cheap} split of widths[{i}] and leave an even rich width"
                    ));
                }
            }
        }
        if self.lfib_counts.len() != 6 {
            v.push(format!(
                "lfib_counts must have 6 entries, got {}",
                self.lfib_counts.len()
            ));
        }
        for (i, &n) in self.lfib_counts.iter().enumerate() {
            if n == 0 {
                v.push(format!("lfib_counts[{i}] must be >= 1"));
            }
        }
        for (name, d) in [
            ("encoder_dilations", &self.encoder_dilations),
            ("decoder_dilations", &self.decoder_dilations),
        ] {
            if d.len() != 3 {
                v.push(format!("{name} must have 3 entries, got {}", d.len()));
            }
            if d.iter().any(|&r| r == 0) {
                v.push(format!("{name} entries must be >= 1"));
            }
        }
        if let Some(&w3) = self.widths.get(2) {
            let t = &self.transformer;
            if w3 > 0 && t.blocks > 0 {
                if t.heads == 0 || w3 % t.heads != 0 {
                    v.push(format!(
                        "transformer.heads {} must divide dimension {w3}",
                        t.heads
                    ));
                }
                if !(t.focus_power >= 1.0 && t.focus_power.is_finite()) {
                    v.push(format!(
                        "transformer.focus_power must be finite and >= 1, got {}",
                        t.focus_power
                    ));
                }
                if t.mlp_ratio == 0 {
                    v.push("transformer.mlp_ratio must be >= 1".to_string());
                }
                if t.cab_compress == 0 || w3 % t.cab_compress != 0 {
                    v.push(format!(
                        "transformer.cab_compress {} must divide {w3}",
                        t.cab_compress
                    ));
                }
                if t.cab_reduction == 0 || w3 % t.cab_reduction != 0 {
                    v.push(format!(
                        "transformer.cab_reduction {} must divide {w3}",
                        t.cab_reduction
                    ));
                }
                if t.cc && (self.cc_reduction == 0 || w3 % self.cc_reduction != 0) {
                    v.push(format!(
                        "cc_reduction {} must divide transformer dimension {w3}",
                        self.cc_reduction
                    ));
                }
            }
        }
        for (i, &w) in self.widths.iter().enumerate().skip(1) {
            if w > 0 && (self.fe_reduction == 0 || w % self.fe_reduction != 0) {
                v.push(format!(
                    "fe_reduction {} must divide widths[{i}] = {w}",
                    self.fe_reduction
                ));
            }
        }
        if self.seghead_taps.is_empty() {
            v.push("seghead_taps must not be empty".to_string());
        }
        for (i, t) in self.seghead_taps.iter().enumerate() {
            if !TAP_SCALES.contains(t) {
                v.push(format!("seghead_taps[{i}] = {t} must be one of 2, 4, 8"));
            }
            if self.seghead_taps[..i].contains(t) {
                v.push(format!("seghead_taps contains {t} twice"));
            }
        }
        if self.seghead_width == 0 {
            v.push("seghead_width must be >= 1".to_string());
        }
        if !TAP_SCALES.contains(&self.aux_tap) {
            v.push(format!("aux_tap = {} must be one of 2, 4, 8", self.aux_tap));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Canonical JSON: sorted keys, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(vec![format!("cannot read config {}: {e}", path.display())])
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(mut v) => {
                v.insert(0, format!("in {}", path.display()));
                Error::InvalidConfig(v)
            }
            other => other,
        })
    }

    /// Width of the decoder feature at downsampling factor 2, 4 or 8.
    pub fn tap_width(&self, scale: usize) -> usize {
        match scale {
            2 => self.widths[0],
            4 => self.widths[1],
            _ => self.widths[2],
        }
    }

    /// Options of a block in `stage` (0..6) at `width` channels.
    pub fn lfib_options(&self, stage: usize, width: usize) -> LfibOptions {
        let dilation = if stage < 3 {
            self.encoder_dilations[stage]
        } else {
            self.decoder_dilations[stage - 3]
        };
        LfibOptions {
            channels: width,
            dilation,
            cc: self.cc_in_lfib,
            cc_reduction: self.cc_reduction,
            cru_alpha: self.cru_alpha,
            cru_squeeze: self.cru_squeeze,
            shuffle_groups: self.shuffle_groups,
            depthwise_asym: self.depthwise_asym,
            norm: self.batch_norm,
        }
    }

    pub fn transformer_options(&self) -> TransformerOptions {
        let t = &self.transformer;
        TransformerOptions {
            dim: self.widths[2],
            heads: t.heads,
            focus_power: t.focus_power,
            mlp_ratio: t.mlp_ratio,
            cab_compress: t.cab_compress,
            cab_reduction: t.cab_reduction,
            cc: t.cc,
            cc_reduction: self.cc_reduction,
            cc_mode: t.cc_mode,
            normalized_attention: t.normalized_attention,
        }
    }
}
