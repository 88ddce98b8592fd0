//! Flat `key = value` run configuration.
//!
//! Keys are the field names of [`ModelConfig`], [`OptimizerConfig`],
//! [`HorizonSpec`] and [`WindowingConfig`]. Values are integers, floats,
//! `true`/`false`, bare strings (enum names such as `pono` or `learned`),
//! `none`, or comma-separated lists. `#` starts a comment.
//!
//! ```text
//! features = 32
//! merge = sum
//! horizons_ms = 80, 160, 320, 400, 1000
//! ```

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::HorizonSpec;
use crate::model::ModelConfig;
use crate::motion_data::WindowingConfig;
use crate::training::OptimizerConfig;

/// Keys whose value is always a list, even with a single entry.
const LIST_KEYS: [&str; 2] = ["horizons_ms", "fixed_partition"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub horizons: HorizonSpec,
    pub windowing: WindowingConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults matching the synthetic generator's 25 fps data:
    /// `T = p = 24`, `F = 32`.
    fn default() -> Self {
        Self {
            model: ModelConfig { features: 32, encoder_hidden: 32, ..Default::default() },
            optimizer: OptimizerConfig::default(),
            horizons: HorizonSpec::default(),
            windowing: WindowingConfig { crop_seconds: 1.92, ..Default::default() },
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::from(f);
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        "none" | "null" => Value::Null,
        s => Value::String(s.to_string()),
    }
}

fn parse_value(key: &str, raw: &str) -> Value {
    if raw.contains(',') || LIST_KEYS.contains(&key) {
        if raw.trim() == "none" {
            return Value::Null;
        }
        Value::Array(raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_scalar).collect())
    } else {
        parse_scalar(raw)
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config structs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config structs are objects"),
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, section: &str, updates: &Map<String, Value>) -> Result<T> {
    let mut m = to_map(base);
    for (k, v) in updates {
        m.insert(k.clone(), v.clone());
    }
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("{section}: {e}")))
}

impl RunConfig {
    fn sections(&self) -> [(&'static str, Map<String, Value>); 4] {
        [
            ("model", to_map(&self.model)),
            ("optimizer", to_map(&self.optimizer)),
            ("horizons", to_map(&self.horizons)),
            ("windowing", to_map(&self.windowing)),
        ]
    }

    /// Apply `(key, raw value)` pairs in order; later pairs win.
    pub fn set_all<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let sections = self.sections();
        let mut updates: [Map<String, Value>; 4] = Default::default();
        for (key, raw) in pairs {
            let key = key.trim();
            let slot = sections
                .iter()
                .position(|(_, m)| m.contains_key(key))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            updates[slot].insert(key.to_string(), parse_value(key, raw));
        }
        Ok(Self {
            model: overlay(&self.model, "model", &updates[0])?,
            optimizer: overlay(&self.optimizer, "optimizer", &updates[1])?,
            horizons: overlay(&self.horizons, "horizons", &updates[2])?,
            windowing: overlay(&self.windowing, "windowing", &updates[3])?,
        })
    }

    /// Parse config text on top of `self`.
    pub fn parse_onto(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            pairs.push((k, v));
        }
        self.set_all(pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().parse_onto(text)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, in the same syntax `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, m) in self.sections() {
            out.push_str(&format!("# {name}\n"));
            for (k, v) in m {
                out.push_str(&format!("{k} = {}\n", render_value(&v)));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.horizons.frames(self.model.output_frames)?;
        Ok(())
    }
}
