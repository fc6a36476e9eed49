//! Run configuration: every tunable of a pipeline run in one tree, read
//! from flat `key = value` text. Keys are dotted paths (`agent.hidden`),
//! values are JSON literals or bare strings, `#` starts a comment.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentConfig;
use crate::codebook::CodebookConfig;
use crate::env::{DataConfig, Split};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagineConfig {
    /// Noise around the target prototypes.
    pub sigma: f64,
}

impl Default for ImagineConfig {
    fn default() -> Self {
        Self { sigma: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Seed of the bootstrap resampling.
    pub bootstrap_seed: u64,
    /// Cap on evaluated episodes; 0 uses the whole split.
    pub max_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::ValUnseen,
            bootstrap_seed: 0,
            max_episodes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Each seed drives data generation, initialisation and batching.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub agent: AgentConfig,
    pub codebook: CodebookConfig,
    pub imagine: ImagineConfig,
    pub warmup: TrainConfig,
    pub dagger: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: DataConfig::default(),
            agent: AgentConfig::default(),
            codebook: CodebookConfig::default(),
            imagine: ImagineConfig::default(),
            warmup: TrainConfig::warmup(),
            dagger: TrainConfig::dagger(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Names accepted wherever a config file is expected.
pub const PRESETS: [&str; 3] = ["default", "desk", "smoke"];

impl RunConfig {
    /// `default`: full benchmark and schedule. `desk`: full benchmark with
    /// the shortened schedule the acceptance suite runs. `smoke`: a few
    /// tiny houses and iterations, for tests and examples.
    pub fn preset(name: &str) -> Option<Self> {
        let mut c = Self::default();
        match name {
            "default" => {}
            "desk" => {
                c.warmup.iterations = 1500;
                c.dagger.iterations = 1500;
                c.warmup.val_every = 500;
                c.dagger.val_every = 500;
                c.warmup.val_episodes = 100;
                c.dagger.val_episodes = 100;
            }
            "smoke" => {
                c.data.train_houses = 4;
                c.data.val_unseen_houses = 2;
                c.data.train_episodes_per_house = 2;
                c.data.val_unseen_episodes_per_house = 2;
                c.warmup.iterations = 4;
                c.warmup.batch_size = 2;
                c.warmup.val_every = 2;
                c.dagger.iterations = 4;
                c.dagger.batch_size = 2;
                c.dagger.val_every = 2;
                c.ablate.seeds = vec![0];
            }
            _ => return None,
        }
        Some(c)
    }

    /// A preset name, or a path to a config file applied over `default`.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(c) = Self::preset(spec) {
            return Ok(c);
        }
        let text = std::fs::read_to_string(spec)
            .map_err(|e| Error::Config(format!("cannot read config {spec}: {e}")))?;
        Self::parse(&text)
    }

    /// Parse config text. A leading `preset = <name>` line selects the base
    /// the remaining keys override; otherwise the base is `default`.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let (base, rest): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|(k, _, _)| k == "preset");
        let mut cfg = match base.last() {
            Some((_, v, line)) => {
                Self::preset(v).ok_or_else(|| Error::Config(format!("line {line}: unknown preset {v}")))?
            }
            None => Self::default(),
        };
        cfg.apply(rest.iter().map(|(k, v, line)| (k.as_str(), v.as_str(), *line)))?;
        Ok(cfg)
    }

    /// Override dotted keys; `line` is only used in messages.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str, usize)>) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        for (key, raw, line) in pairs {
            let slot = key
                .split('.')
                .try_fold(&mut tree, |node, part| node.as_object_mut()?.get_mut(part))
                .ok_or_else(|| Error::Config(format!("line {line}: unknown key {key}")))?;
            if slot.is_object() {
                return Err(Error::Config(format!("line {line}: {key} is a section, not a value")));
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid value: {e}")))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.house.validate()?;
        self.agent.validate()?;
        self.warmup.validate()?;
        self.dagger.validate()?;
        if self.agent.feature_dim != self.data.house.feature_dim {
            return Err(Error::Config(format!(
                "agent.feature_dim {} differs from data.house.feature_dim {}",
                self.agent.feature_dim, self.data.house.feature_dim
            )));
        }
        if self.agent.num_rooms != self.data.house.num_room_types {
            return Err(Error::Config("agent.num_rooms must equal data.house.num_room_types".into()));
        }
        if !(self.imagine.sigma >= 0.0 && self.imagine.sigma.is_finite()) {
            return Err(Error::Config("imagine.sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Flat text that [`RunConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        flatten(&serde_json::to_value(self)?, "", &mut out);
        Ok(out)
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

fn flatten(v: &Value, prefix: &str, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        Value::String(s) => out.push_str(&format!("{prefix} = {s}\n")),
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_dotted_keys_and_strings() {
        let c = RunConfig::parse(
            "# comment\nseed = 5\nagent.hidden = 32   # trailing\neval.split = val-seen\nagent.codebook = textual\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.agent.hidden, 32);
        assert_eq!(c.eval.split, Split::ValSeen);
        assert_eq!(c.agent.codebook, crate::codebook::CodebookKind::Textual);
    }

    #[test]
    fn presets_and_round_trip() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = RunConfig::parse(&c.to_text().unwrap()).unwrap();
            assert_eq!(back, c, "{name}");
        }
        let c = RunConfig::parse("preset = smoke\nseed = 3\n").unwrap();
        assert_eq!(c.data.train_houses, 4);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("agent.hiden = 3").unwrap_err().to_string().contains("unknown key"));
        assert!(RunConfig::parse("agent = 3").is_err());
        assert!(RunConfig::parse("agent.hidden = many").is_err());
        assert!(RunConfig::parse("just text").is_err());
        assert!(RunConfig::parse("agent.hidden = 30").is_err(), "not divisible by heads");
    }
}
