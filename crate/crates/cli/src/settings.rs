//! Resolved run configuration: built-in defaults, then the config file, then
//! command-line overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use peft_forge::adapters::{
    AdapterConfig, AdaptionPromptConfig, LoraConfig, PTuningConfig, PrefixConfig, PromptConfig,
    PromptInit, Reparameterization, Technique, PROMPT_INIT_TEXT,
};
use peft_forge::hpo::MAX_TRIALS;
use peft_forge::model::ModelConfig;
use peft_forge::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Fail;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub general_docs: usize,
    pub domain_docs: usize,
    /// Examples per classification task.
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoSettings {
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub model: ModelConfig,
    pub gen: GenSettings,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub lora: LoraConfig,
    pub prefix: PrefixConfig,
    pub prompt: PromptConfig,
    pub ptuning: PTuningConfig,
    pub adaption: AdaptionPromptConfig,
    pub hpo: HpoSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            gen: GenSettings {
                general_docs: 3000,
                domain_docs: 3000,
                scale: 1000,
            },
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            lora: LoraConfig::default(),
            prefix: PrefixConfig {
                num_virtual_tokens: 10,
                prefix_projection: false,
            },
            prompt: PromptConfig {
                num_virtual_tokens: 10,
                init: PromptInit::Text(PROMPT_INIT_TEXT.into()),
            },
            ptuning: PTuningConfig {
                num_virtual_tokens: 10,
                reparameterization: Reparameterization::Mlp,
                hidden_size: 128,
                num_layers: 2,
                dropout: 0.1,
            },
            adaption: AdaptionPromptConfig {
                adapter_length: 10,
                adapter_layers: 20,
            },
            hpo: HpoSettings { budget: MAX_TRIALS },
        }
    }
}

impl Settings {
    /// Defaults, overlaid by `file` (TOML, or a JSON run manifest whose
    /// `config` is reused), then by `key=value` overrides, then `seed`.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, Fail> {
        let mut tree = serde_json::to_value(Settings::default()).expect("defaults serialize");
        if let Some(path) = file {
            let layer = read_layer(path).map_err(Fail::usage)?;
            merge(&mut tree, layer, "").map_err(Fail::usage)?;
        }
        for s in sets {
            let layer = parse_set(s).map_err(Fail::usage)?;
            merge(&mut tree, layer, "").map_err(Fail::usage)?;
        }
        if let Some(seed) = seed {
            tree["seed"] = Value::from(seed);
        }
        // Stage seeds always follow the top-level seed.
        for stage in ["pretrain", "finetune"] {
            tree[stage]["seed"] = tree["seed"].clone();
        }
        let settings: Settings = serde_json::from_value(tree)
            .map_err(|e| Fail::usage(anyhow!("invalid configuration: {e}")))?;
        settings.validate().map_err(Fail::usage)?;
        Ok(settings)
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.pretrain.validate().context("[pretrain]")?;
        self.finetune.validate().context("[finetune]")?;
        for t in Technique::ALL {
            self.adapter(t)
                .validate(&self.model)
                .with_context(|| format!("[{}]", t.name()))?;
        }
        if self.hpo.budget == 0 || self.hpo.budget > MAX_TRIALS {
            bail!("hpo.budget must be between 1 and {MAX_TRIALS}");
        }
        Ok(())
    }

    pub fn adapter(&self, t: Technique) -> AdapterConfig {
        match t {
            Technique::Lora => AdapterConfig::Lora(self.lora.clone()),
            Technique::Prefix => AdapterConfig::Prefix(self.prefix.clone()),
            Technique::Prompt => AdapterConfig::Prompt(self.prompt.clone()),
            Technique::Ptuning => AdapterConfig::Ptuning(self.ptuning.clone()),
            Technique::Adaption => AdapterConfig::Adaption(self.adaption.clone()),
        }
    }
}

fn read_layer(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let mut v: Value = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let t: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(t)?
    };
    // A run manifest carries the resolved configuration under `config`.
    if is_json {
        if let Some(c) = v.get_mut("config") {
            v = c.take();
        }
    }
    for stage in ["pretrain", "finetune"] {
        if v.get(stage).and_then(|s| s.get("seed")).is_some() && !is_json {
            bail!("{stage}.seed is not configurable; set the top-level seed");
        }
    }
    Ok(v)
}

/// `section.key=value` with a TOML value; bare words are taken as strings.
fn parse_set(s: &str) -> anyhow::Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
    let value: Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))?,
        Err(_) => Value::String(raw.to_string()),
    };
    let mut out = value;
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            bail!("empty key segment in {key:?}");
        }
        let mut m = Map::new();
        m.insert(part.to_string(), out);
        out = Value::Object(m);
    }
    if key
        .trim()
        .split('.')
        .nth(1)
        .is_some_and(|_| key.trim().ends_with(".seed"))
    {
        bail!("{key} is not configurable; set the top-level seed");
    }
    Ok(out)
}

/// Overlays `layer` on `base`; every key must already exist in `base`.
fn merge(base: &mut Value, layer: Value, at: &str) -> anyhow::Result<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| anyhow!("unknown configuration key {path}"))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "seed = 4\n[lora]\nr = 8\nalpha = 16.0\n[pretrain]\nepochs = 2\n",
        )
        .unwrap();
        let s = Settings::resolve(Some(&p), &["lora.r=4".into()], None).unwrap();
        assert_eq!((s.lora.r, s.lora.alpha, s.lora.dropout), (4, 16.0, 0.1));
        assert_eq!(s.pretrain.epochs, 2);
        assert_eq!(s.seed, 4);
        assert_eq!(s.pretrain.seed, 4);
        let s = Settings::resolve(Some(&p), &[], Some(9)).unwrap();
        assert_eq!((s.seed, s.finetune.seed), (9, 9));
        assert_eq!(
            Settings::resolve(None, &[], None).unwrap(),
            Settings::default()
        );
    }

    #[test]
    fn bad_keys_and_values() {
        for set in [
            "lora.rank=4",
            "nope=1",
            "lora.r=0",
            "pretrain.seed=3",
            "hpo.budget=21",
            "lora",
        ] {
            assert!(
                Settings::resolve(None, &[set.into()], None).is_err(),
                "{set}"
            );
        }
        let s = Settings::resolve(
            None,
            &[
                "prompt.init=\"random\"".into(),
                "ptuning.reparameterization=LSTM".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(s.prompt.init, PromptInit::Random);
        assert_eq!(s.ptuning.reparameterization, Reparameterization::Lstm);
        let s = Settings::resolve(
            None,
            &[
                "pretrain.max_steps=5".into(),
                "lora.targets=[\"wq\"]".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(s.pretrain.max_steps, Some(5));
        assert_eq!(s.lora.targets.len(), 1);
    }
}
