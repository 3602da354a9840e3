//! Spec files: a single JSON document or plain `key = value` lines.
//!
//! Both formats map onto the same flat field set. In the key = value form,
//! list-valued fields take comma-separated entries:
//!
//! ```text
//! kind = elimination_sweep
//! grid = 0.0, 0.001, 0.01, 0.05, 0.2, 0.4, 0.6, 0.8, 1.0
//! seeds = 11, 23, 42
//! scale_tag = S
//! output_dir = out/elim
//! ```

use std::path::Path;

use serde_json::{Map, Value};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::experiments::ExperimentSpec;

/// Fields that always parse as lists in the key = value format.
const LIST_KEYS: [&str; 4] = ["grid", "seeds", "scales", "hidden_widths"];

/// Load an experiment spec from a file, applying `--set key=value`
/// overrides. Overrides may only touch declared spec fields; unknown keys
/// are rejected.
pub fn load_spec(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_spec(&text, overrides)
}

/// Parse an experiment spec from text (JSON or key = value lines).
pub fn parse_spec(text: &str, overrides: &[(String, String)]) -> Result<ExperimentSpec> {
    let mut object = parse_object(text)?;
    for (key, raw) in overrides {
        object.insert(key.clone(), parse_value(key, raw));
    }
    serde_json::from_value(Value::Object(object)).map_err(|e| Error::Spec(e.to_string()))
}

/// Standalone model/pretraining config, used by the `pretrain` subcommand.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_scale_tag")]
    pub scale_tag: String,
    #[serde(default)]
    pub hidden_widths: Option<Vec<usize>>,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
    #[serde(default = "default_corpus_seed")]
    pub corpus_seed: u64,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
}

fn default_vocab() -> usize {
    16
}
fn default_context() -> usize {
    8
}
fn default_scale_tag() -> String {
    "S".into()
}
fn default_init_seed() -> u64 {
    7
}
fn default_corpus_seed() -> u64 {
    1234
}
fn default_pretrain_steps() -> usize {
    crate::harness::DEFAULT_PRETRAIN_STEPS
}

impl PretrainConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.hidden_widths {
            Some(widths) => ModelConfig::new(
                self.vocab_size,
                self.context_len,
                widths.clone(),
                self.scale_tag.clone(),
                self.init_seed,
            ),
            None => ModelConfig::for_scale(
                &self.scale_tag,
                self.vocab_size,
                self.context_len,
                self.init_seed,
            ),
        }
    }
}

/// Load a pretraining config (JSON or key = value lines).
pub fn load_pretrain_config(path: impl AsRef<Path>) -> Result<PretrainConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let object = parse_object(&text)?;
    serde_json::from_value(Value::Object(object)).map_err(|e| Error::Spec(e.to_string()))
}

fn parse_object(text: &str) -> Result<Map<String, Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let value: Value =
            serde_json::from_str(trimmed).map_err(|e| Error::Spec(format!("bad json spec: {e}")))?;
        return match value {
            Value::Object(map) => Ok(map),
            _ => Err(Error::Spec("json spec must be an object".into())),
        };
    }
    let mut map = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, raw)) = line.split_once('=') else {
            return Err(Error::Spec(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() {
            return Err(Error::Spec(format!("line {}: empty key", lineno + 1)));
        }
        map.insert(key.to_string(), parse_value(key, raw));
    }
    Ok(map)
}

fn parse_value(key: &str, raw: &str) -> Value {
    if LIST_KEYS.contains(&key) || raw.contains(',') {
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_scalar)
            .collect();
        return Value::Array(items);
    }
    parse_scalar(raw)
}

fn parse_scalar(raw: &str) -> Value {
    if let Ok(v) = raw.parse::<u64>() {
        return Value::from(v);
    }
    if let Ok(v) = raw.parse::<i64>() {
        return Value::from(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        if v.is_finite() {
            return Value::from(v);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentKind;

    #[test]
    fn parses_key_value_spec() {
        let text = "\
# elimination sweep
kind = elimination_sweep
grid = 0.0, 0.5, 1.0
seeds = 11, 23
scale_tag = S
output_dir = out/elim
";
        let spec = parse_spec(text, &[]).unwrap();
        assert_eq!(spec.kind, ExperimentKind::EliminationSweep);
        assert_eq!(spec.grid, vec![0.0, 0.5, 1.0]);
        assert_eq!(spec.seeds, vec![11, 23]);
        assert_eq!(spec.output_dir, std::path::PathBuf::from("out/elim"));
        // Unset fields take their defaults.
        assert_eq!(spec.vocab_size, 16);
    }

    #[test]
    fn parses_json_spec() {
        let text = r#"{ "kind": "mutation_sweep", "grid": [0.001, 0.01], "scales": ["S"] }"#;
        let spec = parse_spec(text, &[]).unwrap();
        assert_eq!(spec.kind, ExperimentKind::MutationSweep);
        assert_eq!(spec.scales, vec!["S".to_string()]);
    }

    #[test]
    fn both_formats_agree() {
        let kv = "kind = rf_comparison\nseeds = 42\nrank = 8\n";
        let js = r#"{ "kind": "rf_comparison", "seeds": [42], "rank": 8 }"#;
        assert_eq!(parse_spec(kv, &[]).unwrap(), parse_spec(js, &[]).unwrap());
    }

    #[test]
    fn single_element_lists_work() {
        let spec = parse_spec("kind = elimination_sweep\nseeds = 42\n", &[]).unwrap();
        assert_eq!(spec.seeds, vec![42]);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let text = "kind = rf_comparison\n";
        let spec = parse_spec(
            text,
            &[("mutation_alpha".to_string(), "0.05".to_string())],
        )
        .unwrap();
        assert_eq!(spec.mutation_alpha, 0.05);

        let err = parse_spec(text, &[("not_a_field".to_string(), "1".to_string())]);
        assert!(matches!(err, Err(Error::Spec(_))));
    }

    #[test]
    fn unknown_field_in_file_rejected() {
        assert!(matches!(
            parse_spec("kind = rf_comparison\nbogus = 3\n", &[]),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(matches!(
            parse_spec("kind rf_comparison\n", &[]),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn pretrain_config_parses() {
        let cfg = load_pretrain_config_from_text("scale_tag = M\npretrain_steps = 50\n");
        assert_eq!(cfg.scale_tag, "M");
        assert_eq!(cfg.pretrain_steps, 50);
        assert_eq!(cfg.model_config().unwrap().hidden_widths, vec![64, 64]);
    }

    fn load_pretrain_config_from_text(text: &str) -> PretrainConfig {
        let object = parse_object(text).unwrap();
        serde_json::from_value(Value::Object(object)).unwrap()
    }
}
