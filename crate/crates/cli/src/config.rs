//! Run configuration: a flat JSON object whose keys are dotted paths into
//! the nested model, data, training and evaluation sections.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cclm::data::CorpusSpec;
use cclm::model::CclmConfig;
use cclm::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// File name of the echoed, fully resolved configuration.
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// Keys that exist in the nested sections but are derived rather than set.
/// The top-level `seed` feeds both seeds; the vocabulary comes from the
/// corpus.
const DERIVED_KEYS: [&str; 3] = ["data.seed", "train.seed", "model.vocab_size"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            top_k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: CclmConfig,
    pub data: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = CorpusSpec::default();
        let mut model = CclmConfig::desk(0);
        model.image_size = data.image_size;
        Self {
            seed: 0,
            model,
            data,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        let obj = cur.as_object_mut().expect("flattened keys address objects");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), value);
            return;
        }
        cur = obj.get_mut(p).expect("flattened keys exist");
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

impl RunConfig {
    /// Every settable key with its resolved value.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        for k in DERIVED_KEYS {
            out.remove(k);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let flat: Map<String, Value> = serde_json::from_str(text)
            .map_err(|e| anyhow!("line {}, column {}: {e}", e.line(), e.column()))?;
        let known = Self::default().to_flat();
        let mut nested = serde_json::to_value(Self::default())?;
        for (key, value) in flat {
            let at = || line_of(text, &key).map_or(String::new(), |l| format!("line {l}: "));
            if !known.contains_key(&key) {
                bail!("{}unknown config key `{key}`", at());
            }
            set_path(&mut nested, &key, value);
            // Type errors are reported against the key that caused them.
            serde_json::from_value::<Self>(nested.clone())
                .map_err(|e| anyhow!("{}key `{key}`: {e}", at()))?;
        }
        let mut cfg: Self = serde_json::from_value(nested)?;
        cfg.train.seed = cfg.seed;
        cfg.data.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.image_size != self.data.image_size {
            bail!(
                "model.image_size ({}) must equal data.image_size ({})",
                self.model.image_size,
                self.data.image_size
            );
        }
        if self.eval.top_k == 0 {
            bail!("eval.top_k must be positive");
        }
        Ok(())
    }

    /// Model configuration for a corpus with `vocab_size` tokens.
    pub fn model_for(&self, vocab_size: usize) -> CclmConfig {
        CclmConfig {
            vocab_size,
            ..self.model.clone()
        }
    }

    /// Writes the resolved flat configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(&Value::Object(self.to_flat()))?;
        fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_reach_nested_fields() {
        let c = RunConfig::parse(
            r#"{"seed": 7, "train.pretrain.steps": 12, "train.pretrain.warmup_steps": 3, "train.ablation": "w/o-parallel", "model.share_ffn": false}"#,
        )
        .unwrap();
        assert_eq!((c.seed, c.data.seed, c.train.seed), (7, 7, 7));
        assert_eq!(c.train.pretrain.steps, 12);
        assert_eq!(c.train.ablation, cclm::train::Ablation::NoParallel);
        assert!(!c.model.share_ffn);
    }

    #[test]
    fn resolved_config_parses_back() {
        let c = RunConfig::parse(r#"{"train.grad_clip": 1.0, "eval.top_k": 4}"#).unwrap();
        let text = serde_json::to_string(&Value::Object(c.to_flat())).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn errors_name_the_line() {
        let e =
            RunConfig::parse("{\n  \"seed\": 1,\n  \"train.pretrain.stepz\": 3\n}").unwrap_err();
        assert!(e.to_string().starts_with("line 3:"), "{e}");
        let e = RunConfig::parse("{\n  \"seed\": 1,\n  \"eval.top_k\": \"many\"\n}").unwrap_err();
        assert!(e.to_string().starts_with("line 3:"), "{e}");
        let e = RunConfig::parse("{\n  \"seed\": 1\n  \"eval.top_k\": 2\n}").unwrap_err();
        assert!(e.to_string().starts_with("line 3,"), "{e}");
        for derived in DERIVED_KEYS {
            assert!(RunConfig::parse(&format!("{{\"{derived}\": 1}}")).is_err());
        }
    }

    #[test]
    fn cross_section_checks() {
        assert!(RunConfig::parse(r#"{"model.image_size": 48}"#).is_err());
        assert!(RunConfig::parse(r#"{"model.image_size": 48, "data.image_size": 48}"#).is_ok());
        assert!(RunConfig::parse(r#"{"train.pretrain.warmup_steps": 5000}"#).is_err());
    }
}
