//! Effective run configuration: defaults, key=value config file, then
//! command-line overrides, in that order. The resolved configuration is
//! written next to every report so a run can be reproduced exactly.

use std::path::PathBuf;

use lightn::error::{Error, Result};
use lightn::losses::LossConfig;
use lightn::model::{AttentionConfig, AttentionVariant, SamplerConfig};
use lightn::projection::TemperatureKind;
use lightn::task::TrainConfig;

use crate::Overrides;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub m: usize,
    pub sampler: String,
    pub variant: String,
    pub heads: usize,
    pub scale_a: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub temperature_kind: String,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub format: String,
    pub n: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sampler_train_per_class: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub m_list: Vec<usize>,
    pub flops_n: usize,
    pub flops_m: usize,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            m: 16,
            sampler: "lightn".into(),
            variant: "self_correlation".into(),
            heads: 1,
            scale_a: 1,
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
            temperature_kind: "exp".into(),
            epochs: 15,
            pretrain_epochs: 8,
            format: "xyz".into(),
            n: 256,
            train_per_class: 200,
            test_per_class: 50,
            sampler_train_per_class: 25,
            learning_rate: 0.01,
            batch_size: 32,
            m_list: vec![8, 16, 32],
            flops_n: 1024,
            flops_m: 32,
            output: None,
        }
    }
}

fn parse_m_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad m_list entry: {v}")))
        })
        .collect()
}

impl RunConfig {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &overrides.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
            cfg.apply_key_values(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        Ok(cfg)
    }

    fn apply_key_values(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected key=value: {trimmed}") })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "sampler" => self.sampler = value.to_string(),
            "variant" => self.variant = value.to_string(),
            "heads" => self.heads = num(key, value)?,
            "scale_a" => self.scale_a = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "temperature_kind" => self.temperature_kind = value.to_string(),
            "epochs" => self.epochs = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "format" => self.format = value.to_string(),
            "n" => self.n = num(key, value)?,
            "train_per_class" => self.train_per_class = num(key, value)?,
            "test_per_class" => self.test_per_class = num(key, value)?,
            "sampler_train_per_class" => self.sampler_train_per_class = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "m_list" => self.m_list = parse_m_list(value)?,
            "flops_n" => self.flops_n = num(key, value)?,
            "flops_m" => self.flops_m = num(key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key: {other}"))),
        }
        Ok(())
    }

    fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &o.$field {
                    self.$field = v.clone();
                }
            };
        }
        take!(seed);
        take!(m);
        take!(sampler);
        take!(variant);
        take!(alpha);
        take!(beta);
        take!(delta);
        take!(epochs);
        take!(pretrain_epochs);
        take!(format);
        take!(n);
        take!(train_per_class);
        take!(test_per_class);
        take!(sampler_train_per_class);
        take!(learning_rate);
        take!(batch_size);
        take!(flops_n);
        take!(flops_m);
        if let Some(s) = &o.m_list {
            self.m_list = parse_m_list(s)?;
        }
        if let Some(out) = &o.output {
            self.output = Some(out.clone());
        }
        Ok(())
    }

    /// The effective configuration in the same key=value grammar the
    /// config file uses; feeding it back reproduces this run.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        push("seed", self.seed.to_string());
        push("m", self.m.to_string());
        push("sampler", self.sampler.clone());
        push("variant", self.variant.clone());
        push("heads", self.heads.to_string());
        push("scale_a", self.scale_a.to_string());
        push("alpha", self.alpha.to_string());
        push("beta", self.beta.to_string());
        push("delta", self.delta.to_string());
        push("temperature_kind", self.temperature_kind.clone());
        push("epochs", self.epochs.to_string());
        push("pretrain_epochs", self.pretrain_epochs.to_string());
        push("format", self.format.clone());
        push("n", self.n.to_string());
        push("train_per_class", self.train_per_class.to_string());
        push("test_per_class", self.test_per_class.to_string());
        push("sampler_train_per_class", self.sampler_train_per_class.to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("batch_size", self.batch_size.to_string());
        push(
            "m_list",
            self.m_list.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        push("flops_n", self.flops_n.to_string());
        push("flops_m", self.flops_m.to_string());
        // the output directory is deliberately omitted: it is where the
        // reports live, not part of what they contain
        out
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let cfg = AttentionConfig {
            variant: AttentionVariant::parse(&self.variant)?,
            heads: self.heads,
            scale_factor_a: self.scale_a,
            model_dim: lightn::model::DEFAULT_MODEL_DIM,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            attention: self.attention_config()?,
            ffn_hidden: vec![512, 256],
            m: self.m,
        })
    }

    pub fn ffn_hidden_u64(&self) -> Vec<u64> {
        vec![512, 256]
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
            temperature_kind: TemperatureKind::parse(&self.temperature_kind)?,
            ..LossConfig::default()
        })
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs,
            seed: self.seed,
        }
    }
}
