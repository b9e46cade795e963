//! Run configuration: a named preset, then `key = value` files, then
//! command-line overrides, each layer replacing individual dotted keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decoder::DecoderConfig;
use crate::encoders::{BidirEncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::pretrain::PretrainConfig;
use crate::synth::GenConfig;
use crate::trainer::TrainConfig;
use crate::vocab::Vocab;
use crate::xc::XCConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub decoder: DecoderConfig,
    pub xc: XCConfig,
    pub bidir: BidirEncoderConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
    pub pretrain: PretrainConfig,
    /// Fraction of records held out for validation.
    pub valid_fraction: f64,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "reference" => Ok(Self::reference()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected toy or reference)"))),
        }
    }

    /// Desk-scale settings used by the tests and the default CLI run.
    pub fn toy() -> Self {
        let vocab = Vocab::default();
        Self {
            preset: "toy".into(),
            seed: 0,
            decoder: DecoderConfig::toy(vocab.size()),
            xc: XCConfig::toy(EncoderKind::SmallBidirectional),
            bidir: BidirEncoderConfig::toy(vocab.size()),
            train: TrainConfig::toy(),
            data: GenConfig {
                n_records: 5000,
                ..GenConfig::default()
            },
            pretrain: PretrainConfig::default(),
            valid_fraction: 0.1,
        }
    }

    /// The 7B geometry and optimizer settings. Not trainable on a CPU; used
    /// for cache sizing.
    pub fn reference() -> Self {
        let decoder = DecoderConfig::llama2_7b();
        let bidir = BidirEncoderConfig::reference(decoder.vocab_size);
        Self {
            preset: "reference".into(),
            seed: 0,
            xc: XCConfig::reference(EncoderKind::SmallBidirectional),
            bidir,
            train: TrainConfig::reference(),
            data: GenConfig::default(),
            pretrain: PretrainConfig::default(),
            valid_fraction: 0.1,
            decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.xc.validate(self.decoder.n_layers)?;
        if self.xc.encoder == EncoderKind::SmallBidirectional {
            self.bidir.validate()?;
        }
        self.train.validate()?;
        self.data.validate()?;
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!("valid_fraction {} outside [0, 1)", self.valid_fraction)));
        }
        Ok(())
    }

    /// Every settable key with its current value, sorted.
    pub fn flatten(&self) -> Result<Vec<(String, Value)>> {
        let v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        flatten_into("", &v, &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Replaces one dotted key. Unknown keys and values of the wrong type are
    /// rejected with the key named.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let slot = lookup(&mut root, key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if slot.is_object() {
            return Err(Error::Config(format!("config key `{key}` is a section, not a value")));
        }
        let new = parse_value(raw, slot);
        if !same_kind(slot, &new) {
            return Err(Error::Config(format!("config key `{key}`: cannot use {raw:?} here")));
        }
        *slot = new;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("config key `{key}`: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    /// Renders every key, loadable again by [`Self::apply_str`].
    pub fn to_kv(&self) -> Result<String> {
        Ok(self
            .flatten()?
            .into_iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect())
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn lookup<'v>(root: &'v mut Value, key: &str) -> Option<&'v mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        let m: &mut Map<String, Value> = cur.as_object_mut()?;
        cur = m.get_mut(part)?;
    }
    Some(cur)
}

fn parse_value(raw: &str, like: &Value) -> Value {
    if like.is_string() {
        let s = raw.trim_matches('"');
        return Value::String(s.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn same_kind(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(a), Value::Number(b)) => a.is_f64() || !b.is_f64(),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Array(_), Value::Array(_)) => true,
        _ => false,
    }
}
