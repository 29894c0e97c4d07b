//! Run configuration and its line-based `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to its default, but unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config, QmvosError, Result};

/// Source of the content tokens the QCIM cross-attention reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossSource {
    Readout,
    F16,
}

/// Whether queries are re-initialized after every frame or kept from frame 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    Propagate,
    FirstFrame,
}

/// Memory affinity kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Dot,
    L2,
}

/// Feature scales fused before query pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScales {
    F16F8,
    F16F8F4,
    F16,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl $ty {
            pub fn keyword(self) -> &'static str {
                match self { $($ty::$variant => $kw),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($kw => Ok($ty::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($kw),+].join(", "))),
                }
            }
        }
    };
}

keyword_enum!(CrossSource { Readout => "readout", F16 => "f16" });
keyword_enum!(QueryMode { Propagate => "propagate", FirstFrame => "first_frame" });
keyword_enum!(Similarity { Dot => "dot", L2 => "l2" });
keyword_enum!(InitScales { F16F8 => "f16_f8", F16F8F4 => "f16_f8_f4", F16 => "f16" });

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub c_k: usize,
    pub c_v: usize,
    pub c_d: usize,
    pub c4: usize,
    pub c8: usize,
    pub c16: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
    pub sim_blocks: usize,
    pub qcim_blocks: usize,
    pub mem_interval: usize,
    pub similarity: Similarity,
    pub init_scales: InitScales,
    /// Off bypasses SIM/QCIM and predicts with a static per-object head.
    pub query_modulation: bool,
    pub sim_interaction: bool,
    pub qcim_source: CrossSource,
    pub query_mode: QueryMode,
    /// `1/√d` in the QCIM cross-attention.
    pub ca_scaling: bool,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub seq_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            c_k: 32,
            c_v: 64,
            c_d: 32,
            c4: 32,
            c8: 64,
            c16: 64,
            ffn_hidden: 128,
            heads: 1,
            sim_blocks: 1,
            qcim_blocks: 1,
            mem_interval: 5,
            similarity: Similarity::Dot,
            init_scales: InitScales::F16F8,
            query_modulation: true,
            sim_interaction: true,
            qcim_source: CrossSource::Readout,
            query_mode: QueryMode::Propagate,
            ca_scaling: false,
            seed: 0,
            lr: 3e-4,
            weight_decay: 0.01,
            steps: 1000,
            seq_len: 8,
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => config(key, format!("expected on/off, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| QmvosError::Config {
            field: key.to_string(),
            detail: format!("cannot parse `{v}`"),
        })
}

fn parse_kw<T: FromStr<Err = String>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|detail| QmvosError::Config {
        field: key.to_string(),
        detail,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("c_k", self.c_k),
            ("c_v", self.c_v),
            ("c_d", self.c_d),
            ("c4", self.c4),
            ("c8", self.c8),
            ("c16", self.c16),
            ("ffn_hidden", self.ffn_hidden),
            ("heads", self.heads),
        ];
        for (k, v) in widths {
            if v == 0 {
                return config(k, "must be positive");
            }
        }
        if self.c4 < 2 {
            return config("c4", "must be at least 2");
        }
        if !self.c_v.is_multiple_of(self.heads) {
            return config("heads", format!("must divide c_v = {}", self.c_v));
        }
        if self.mem_interval == 0 {
            return config("mem_interval", "must be at least 1");
        }
        if self.seq_len < 2 {
            return config("seq_len", "must be at least 2");
        }
        if self.qcim_source == CrossSource::F16 && self.query_modulation && self.qcim_blocks == 0 {
            return config("qcim_source", "f16 requires at least one QCIM block");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return config("lr", "must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return config("weight_decay", "must be finite and non-negative");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("c_k", self.c_k.to_string());
        put("c_v", self.c_v.to_string());
        put("c_d", self.c_d.to_string());
        put("c4", self.c4.to_string());
        put("c8", self.c8.to_string());
        put("c16", self.c16.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("heads", self.heads.to_string());
        put("sim_blocks", self.sim_blocks.to_string());
        put("qcim_blocks", self.qcim_blocks.to_string());
        put("mem_interval", self.mem_interval.to_string());
        put("similarity", self.similarity.keyword().into());
        put("init_scales", self.init_scales.keyword().into());
        put("query_modulation", on_off(self.query_modulation).into());
        put("sim_interaction", on_off(self.sim_interaction).into());
        put("qcim_source", self.qcim_source.keyword().into());
        put("query_mode", self.query_mode.keyword().into());
        put("ca_scaling", on_off(self.ca_scaling).into());
        put("seed", self.seed.to_string());
        put("lr", format!("{:?}", self.lr));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("steps", self.steps.to_string());
        put("seq_len", self.seq_len.to_string());
        s
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "c_k" => self.c_k = parse_num(key, v)?,
            "c_v" => self.c_v = parse_num(key, v)?,
            "c_d" => self.c_d = parse_num(key, v)?,
            "c4" => self.c4 = parse_num(key, v)?,
            "c8" => self.c8 = parse_num(key, v)?,
            "c16" => self.c16 = parse_num(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "sim_blocks" => self.sim_blocks = parse_num(key, v)?,
            "qcim_blocks" => self.qcim_blocks = parse_num(key, v)?,
            "mem_interval" => self.mem_interval = parse_num(key, v)?,
            "similarity" => self.similarity = parse_kw(key, v)?,
            "init_scales" => self.init_scales = parse_kw(key, v)?,
            "query_modulation" => self.query_modulation = parse_on_off(key, v)?,
            "sim_interaction" => self.sim_interaction = parse_on_off(key, v)?,
            "qcim_source" => self.qcim_source = parse_kw(key, v)?,
            "query_mode" => self.query_mode = parse_kw(key, v)?,
            "ca_scaling" => self.ca_scaling = parse_on_off(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "seq_len" => self.seq_len = parse_num(key, v)?,
            _ => return config(key, "unknown key"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(&format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
