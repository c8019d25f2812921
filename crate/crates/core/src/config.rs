//! Layered run configuration: profile defaults ← config file ← overrides.
//!
//! The file format is flat `section.key=value` text; `#` starts a comment.
//! [`RunConfig::to_text`] is canonical (fixed key order, shortest
//! round-trip float formatting), and its SHA-256 is the config hash stamped
//! into every artifact.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{ChannelInfo, FleetSpec};
use crate::error::{Error, Result};
use crate::finetune::{AdFeatures, BpInput, FinetuneConfig, JointLossConfig};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::tokenizer::TokenizerConfig;
use crate::training::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub precision: Precision,
    pub window_len: usize,
    /// Window stride for pretraining corpora.
    pub window_stride: usize,
    /// Window stride for labeled (fine-tune / evaluation) splits.
    pub eval_stride: usize,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_adam: AdamConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk-scale profile: small enough for one CPU core. Windows are a
    /// quarter of the paper length with patches scaled alike, so the token
    /// grid keeps the same 29 positions per channel.
    pub fn desk() -> Self {
        RunConfig {
            profile: "desk".into(),
            seed: 0,
            precision: Precision::F32,
            window_len: 512,
            window_stride: 128,
            eval_stride: 512,
            tokenizer: TokenizerConfig {
                patch_len: 32,
                stride: 32,
                ..TokenizerConfig::default()
            },
            model: ModelConfig::desk(),
            pretrain: PretrainConfig {
                epochs: 5,
                batch_size: 32,
                mask_ratio: 0.3,
            },
            pretrain_adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 1000,
                batch_size: 8,
                adam: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                label_fraction: 0.1,
                ..FinetuneConfig::default()
            },
        }
    }

    /// The published hyperparameters (Table-2 sizes, lr 3e-7, batch 256).
    pub fn paper() -> Self {
        RunConfig {
            profile: "paper".into(),
            seed: 0,
            precision: Precision::F32,
            window_len: 2048,
            window_stride: 512,
            eval_stride: 2048,
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_adam: AdamConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            _ => Err(Error::Config(format!("unknown profile {name:?} (expected desk or paper)"))),
        }
    }

    /// Build from a file: an optional leading `profile=` line picks the
    /// base, remaining lines override it.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let base = pairs
            .iter()
            .find(|(k, _)| k == "profile")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = RunConfig::profile(base)?;
        for (k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.model.validate()?;
        self.tokenizer.num_tokens(self.window_len)?;
        if self.window_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.pretrain.mask_ratio > 0.0 && self.pretrain.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} must lie in (0, 1)", self.pretrain.mask_ratio)));
        }
        if !(self.finetune.label_fraction > 0.0 && self.finetune.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label fraction {} must lie in (0, 1]",
                self.finetune.label_fraction
            )));
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.tokenizer;
        let m = &mut self.model;
        let f = &mut self.finetune;
        match key {
            "run.seed" => self.seed = num(key, value)?,
            "run.precision" => self.precision = value.parse()?,
            "data.window_len" => self.window_len = num(key, value)?,
            "data.window_stride" => self.window_stride = num(key, value)?,
            "data.eval_stride" => self.eval_stride = num(key, value)?,
            "tokenizer.patch_len" => t.patch_len = num(key, value)?,
            "tokenizer.stride" => t.stride = num(key, value)?,
            "tokenizer.prompt_len" => t.prompt_len = num(key, value)?,
            "tokenizer.task_len" => t.task_len = num(key, value)?,
            "tokenizer.eps" => t.eps = num(key, value)?,
            "model.layers" => m.num_layers = num(key, value)?,
            "model.dim" => m.model_dim = num(key, value)?,
            "model.ffn_hidden" => m.ffn_hidden = num(key, value)?,
            "model.heads" => m.num_heads = num(key, value)?,
            "model.dropout" => m.dropout = num(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = num(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(key, value)?,
            "pretrain.mask_ratio" => self.pretrain.mask_ratio = num(key, value)?,
            "pretrain.lr" => self.pretrain_adam.lr = num(key, value)?,
            "pretrain.beta1" => self.pretrain_adam.beta1 = num(key, value)?,
            "pretrain.beta2" => self.pretrain_adam.beta2 = num(key, value)?,
            "pretrain.adam_eps" => self.pretrain_adam.eps = num(key, value)?,
            "finetune.epochs" => f.epochs = num(key, value)?,
            "finetune.batch_size" => f.batch_size = num(key, value)?,
            "finetune.lr" => f.adam.lr = num(key, value)?,
            "finetune.beta1" => f.adam.beta1 = num(key, value)?,
            "finetune.beta2" => f.adam.beta2 = num(key, value)?,
            "finetune.adam_eps" => f.adam.eps = num(key, value)?,
            "finetune.alpha" => f.loss.alpha = num(key, value)?,
            "finetune.ad_threshold" => f.loss.ad_threshold = num(key, value)?,
            "finetune.label_fraction" => f.label_fraction = num(key, value)?,
            "finetune.bp_input" => f.bp_input = value.parse::<BpInput>()?,
            "finetune.ad_features" => f.ad_features = value.parse::<AdFeatures>()?,
            "finetune.init_bp_from_recon" => f.init_bp_from_recon = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical resolved text.
    pub fn to_text(&self) -> String {
        let t = &self.tokenizer;
        let m = &self.model;
        let p = &self.pretrain;
        let pa = &self.pretrain_adam;
        let f = &self.finetune;
        let JointLossConfig { alpha, ad_threshold } = f.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("profile", &self.profile);
        kv("run.seed", &self.seed);
        kv("run.precision", &self.precision);
        kv("data.window_len", &self.window_len);
        kv("data.window_stride", &self.window_stride);
        kv("data.eval_stride", &self.eval_stride);
        kv("tokenizer.patch_len", &t.patch_len);
        kv("tokenizer.stride", &t.stride);
        kv("tokenizer.prompt_len", &t.prompt_len);
        kv("tokenizer.task_len", &t.task_len);
        kv("tokenizer.eps", &t.eps);
        kv("model.layers", &m.num_layers);
        kv("model.dim", &m.model_dim);
        kv("model.ffn_hidden", &m.ffn_hidden);
        kv("model.heads", &m.num_heads);
        kv("model.dropout", &m.dropout);
        kv("pretrain.epochs", &p.epochs);
        kv("pretrain.batch_size", &p.batch_size);
        kv("pretrain.mask_ratio", &p.mask_ratio);
        kv("pretrain.lr", &pa.lr);
        kv("pretrain.beta1", &pa.beta1);
        kv("pretrain.beta2", &pa.beta2);
        kv("pretrain.adam_eps", &pa.eps);
        kv("finetune.epochs", &f.epochs);
        kv("finetune.batch_size", &f.batch_size);
        kv("finetune.lr", &f.adam.lr);
        kv("finetune.beta1", &f.adam.beta1);
        kv("finetune.beta2", &f.adam.beta2);
        kv("finetune.adam_eps", &f.adam.eps);
        kv("finetune.alpha", &alpha);
        kv("finetune.ad_threshold", &ad_threshold);
        kv("finetune.label_fraction", &f.label_fraction);
        kv("finetune.bp_input", &f.bp_input);
        kv("finetune.ad_features", &f.ad_features);
        kv("finetune.init_bp_from_recon", &f.init_bp_from_recon);
        s
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// What a checkpoint's config blob records: the resolved configuration plus
/// the roster of every fleet registered in the store, so a later stage can
/// rebuild the fleet specs (transfer initialization needs the sources).
#[derive(Debug, Clone, PartialEq)]
pub struct RunCard {
    pub config: RunConfig,
    pub fleets: Vec<FleetSpec>,
}

impl RunCard {
    pub fn to_text(&self) -> String {
        let mut s = self.config.to_text();
        for f in &self.fleets {
            let chans: Vec<String> = f.channels.iter().map(|c| format!("{}:{}", c.name, c.unit)).collect();
            let _ = writeln!(
                s,
                "fleet={}|{}|{}|{}|{}|{}",
                f.fleet_id,
                f.sample_freq_hz,
                f.fault_type,
                f.baseline_channel,
                f.anomaly_rate,
                chans.join(",")
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<RunCard> {
        let mut cfg_lines = String::new();
        let mut fleets = Vec::new();
        for line in text.lines() {
            match line.trim().strip_prefix("fleet=") {
                Some(v) => fleets.push(parse_fleet(v)?),
                None => {
                    cfg_lines.push_str(line);
                    cfg_lines.push('\n');
                }
            }
        }
        Ok(RunCard {
            config: RunConfig::from_text(&cfg_lines)?,
            fleets,
        })
    }
}

fn parse_fleet(v: &str) -> Result<FleetSpec> {
    let bad = || Error::Config(format!("malformed fleet roster line {v:?}"));
    let parts: Vec<&str> = v.split('|').collect();
    let [id, freq, fault, baseline, rate, chans] = parts[..] else {
        return Err(bad());
    };
    let channels = chans
        .split(',')
        .map(|c| {
            let (name, unit) = c.split_once(':').unwrap_or((c, "-"));
            ChannelInfo::new(name, unit)
        })
        .collect();
    let spec = FleetSpec {
        fleet_id: id.to_string(),
        channels,
        sample_freq_hz: freq.parse().map_err(|_| bad())?,
        fault_type: fault.parse()?,
        baseline_channel: baseline.parse().map_err(|_| bad())?,
        anomaly_rate: rate.parse().map_err(|_| bad())?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_for_both_profiles() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let back = RunConfig::from_text(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn overrides_change_the_hash() {
        let base = RunConfig::desk();
        let cfg = RunConfig::from_text("# tweak\nmodel.dim = 32\nfinetune.lr=0.005\n").unwrap();
        assert_eq!(cfg.model.model_dim, 32);
        assert_eq!(cfg.finetune.adam.lr, 0.005);
        assert_ne!(cfg.hash(), base.hash());
    }

    #[test]
    fn paper_profile_values() {
        let p = RunConfig::from_text("profile=paper").unwrap();
        assert_eq!((p.tokenizer.patch_len, p.model.model_dim, p.model.num_layers), (128, 512, 4));
        assert_eq!(p.pretrain.batch_size, 256);
        assert_eq!(p.pretrain_adam.lr, 3e-7);
        assert_eq!(p.tokenizer.num_tokens(p.window_len).unwrap(), 29);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::from_text("model.width=3").is_err());
        assert!(RunConfig::from_text("model.dim=abc").is_err());
        assert!(RunConfig::from_text("just words").is_err());
        assert!(RunConfig::from_text("pretrain.mask_ratio=1.5").is_err());
        assert!(RunConfig::from_text("profile=huge").is_err());
    }

    #[test]
    fn run_card_round_trip() {
        let card = RunCard {
            config: RunConfig::paper(),
            fleets: vec![FleetSpec::desk_a(), FleetSpec::desk_c()],
        };
        assert_eq!(RunCard::parse(&card.to_text()).unwrap(), card);
        assert!(RunCard::parse("fleet=x|1|bogus|0|0|a:b,c:d").is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
