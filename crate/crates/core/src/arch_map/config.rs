use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor_store::open_checkpoint;

/// Architecture facts needed to resolve and split projection tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// 0 for dense models.
    pub num_experts: usize,
    pub architecture_tag: String,
    /// Set when the layer count came from tensor names instead of the config.
    #[serde(default)]
    pub layers_inferred: bool,
}

const LAYER_KEYS: &[&str] = &["num_hidden_layers", "n_layer", "n_layers", "num_layers"];
const HIDDEN_KEYS: &[&str] = &["hidden_size", "n_embd", "d_model", "dim"];
const HEAD_KEYS: &[&str] = &["num_attention_heads", "n_head", "n_heads", "num_heads"];
const KV_HEAD_KEYS: &[&str] = &[
    "num_key_value_heads",
    "n_kv_heads",
    "num_kv_heads",
    "multi_query_group_num",
];
const HEAD_DIM_KEYS: &[&str] = &["head_dim", "kv_channels"];
const EXPERT_KEYS: &[&str] = &[
    "num_experts",
    "num_local_experts",
    "n_routed_experts",
    "moe_num_experts",
    "num_routed_experts",
];

fn lookup(obj: &Map<String, Value>, keys: &[&str]) -> Option<u64> {
    keys.iter().find_map(|k| obj.get(*k).and_then(Value::as_u64))
}

impl ModelConfig {
    /// Builds a config from a parsed `config.json`. `layer_names` supplies
    /// tensor names to infer the layer count from when the document has none.
    pub fn from_json(
        doc: &Value,
        model_id: &str,
        layer_names: impl FnOnce() -> Result<Vec<String>>,
    ) -> Result<Self> {
        let top = doc
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("config is not a JSON object".into()))?;
        // Multimodal wrappers keep the decoder settings under text_config.
        let obj = match top.get("text_config").and_then(Value::as_object) {
            Some(text) if lookup(top, LAYER_KEYS).is_none() => text,
            _ => top,
        };

        let hidden_size =
            lookup(obj, HIDDEN_KEYS).ok_or_else(|| Error::ConfigFieldMissing("hidden_size".into()))? as usize;
        let num_heads = lookup(obj, HEAD_KEYS)
            .ok_or_else(|| Error::ConfigFieldMissing("num_attention_heads".into()))?
            as usize;
        let num_kv_heads = lookup(obj, KV_HEAD_KEYS).map_or(num_heads, |v| v as usize);
        let num_experts = lookup(obj, EXPERT_KEYS).unwrap_or(0) as usize;
        if hidden_size == 0 || num_heads == 0 || num_kv_heads == 0 {
            return Err(Error::InvalidConfig(
                "hidden_size, num_attention_heads and num_key_value_heads must be positive".into(),
            ));
        }
        if !num_heads.is_multiple_of(num_kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "num_key_value_heads {num_kv_heads} does not divide num_attention_heads {num_heads}"
            )));
        }
        let head_dim = match lookup(obj, HEAD_DIM_KEYS) {
            Some(d) if d > 0 => d as usize,
            _ if hidden_size.is_multiple_of(num_heads) => hidden_size / num_heads,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "no head_dim and hidden_size {hidden_size} is not divisible by {num_heads} heads"
                )))
            }
        };

        let (num_layers, layers_inferred) = match lookup(obj, LAYER_KEYS) {
            Some(0) => return Err(Error::InvalidConfig("layer count is zero".into())),
            Some(n) => (n as usize, false),
            None => {
                let names = layer_names()?;
                let n = infer_layer_count(names.iter().map(String::as_str))
                    .ok_or_else(|| Error::ConfigFieldMissing("num_hidden_layers".into()))?;
                log::warn!("{model_id}: config has no layer count; inferred {n} layers from tensor names");
                (n, true)
            }
        };

        let architecture_tag = top
            .get("architectures")
            .and_then(|a| a.get(0))
            .and_then(Value::as_str)
            .or_else(|| top.get("model_type").and_then(Value::as_str))
            .unwrap_or("unknown")
            .to_string();

        Ok(ModelConfig {
            model_id: model_id.to_string(),
            num_layers,
            hidden_size,
            num_heads,
            num_kv_heads,
            head_dim,
            num_experts,
            architecture_tag,
            layers_inferred,
        })
    }

    /// Output rows of the query projection.
    pub fn q_rows(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Output rows of each of the key and value projections.
    pub fn kv_rows(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }
}

/// One more than the largest `layers.N.` / `h.N.` / `blocks.N.` index.
fn infer_layer_count<'a>(names: impl IntoIterator<Item = &'a str>) -> Option<usize> {
    let re = Regex::new(r"(?:^|\.)(?:layers|layer|h|blocks)\.(\d+)\.").unwrap();
    names
        .into_iter()
        .filter_map(|n| re.captures(n)?.get(1)?.as_str().parse::<usize>().ok())
        .max()
        .map(|m| m + 1)
}

/// Reads `config.json` from a checkpoint directory. The directory name is
/// used as the model id.
pub fn load_config(ckpt_dir: impl AsRef<Path>) -> Result<ModelConfig> {
    let dir = ckpt_dir.as_ref();
    let path = dir.join("config.json");
    if !path.is_file() {
        return Err(Error::ConfigMissing {
            path: dir.to_path_buf(),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let model_id = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".to_string());

    ModelConfig::from_json(&doc, &model_id, || {
        Ok(open_checkpoint(dir)?.tensors().keys().cloned().collect())
    })
}
