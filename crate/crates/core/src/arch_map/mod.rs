//! Model configuration and tensor-name resolution.

mod config;
mod resolve;
mod rules;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::{load_config, ModelConfig};
pub use resolve::{resolve_layers, resolve_layers_with, LayerTensorMap, TensorRef};
pub use rules::{MappingRule, RuleSet};

/// Weight matrix roles that can be fingerprinted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 7] = [
        ProjectionKind::Q,
        ProjectionKind::K,
        ProjectionKind::V,
        ProjectionKind::O,
        ProjectionKind::Gate,
        ProjectionKind::Up,
        ProjectionKind::Down,
    ];
    pub const ATTENTION: [ProjectionKind; 4] = [
        ProjectionKind::Q,
        ProjectionKind::K,
        ProjectionKind::V,
        ProjectionKind::O,
    ];
    pub const FFN: [ProjectionKind; 3] = [ProjectionKind::Gate, ProjectionKind::Up, ProjectionKind::Down];

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ProjectionKind::Q | ProjectionKind::K | ProjectionKind::V | ProjectionKind::O
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionKind::Q => "q",
            ProjectionKind::K => "k",
            ProjectionKind::V => "v",
            ProjectionKind::O => "o",
            ProjectionKind::Gate => "gate",
            ProjectionKind::Up => "up",
            ProjectionKind::Down => "down",
        }
    }

    /// Parses a comma-separated list such as `q,k,v,o` or `gate,up,down`.
    /// `attn`, `ffn` and `all` expand to their groups. Order and duplicates
    /// are normalized away.
    pub fn parse_list(list: &str) -> Result<Vec<ProjectionKind>, String> {
        let mut kinds = Vec::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "attn" | "attention" => kinds.extend(Self::ATTENTION),
                "ffn" | "mlp" => kinds.extend(Self::FFN),
                "all" => kinds.extend(Self::ALL),
                _ => kinds.push(item.parse()?),
            }
        }
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err("empty kind list".into());
        }
        Ok(kinds)
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "query" => Ok(ProjectionKind::Q),
            "k" | "key" => Ok(ProjectionKind::K),
            "v" | "value" => Ok(ProjectionKind::V),
            "o" | "output" => Ok(ProjectionKind::O),
            "gate" => Ok(ProjectionKind::Gate),
            "up" => Ok(ProjectionKind::Up),
            "down" => Ok(ProjectionKind::Down),
            other => Err(format!("unknown projection kind {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_lists() {
        assert_eq!(
            ProjectionKind::parse_list("v, Q,k,q").unwrap(),
            [ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V]
        );
        assert_eq!(ProjectionKind::parse_list("ffn").unwrap(), ProjectionKind::FFN);
        assert_eq!(
            ProjectionKind::parse_list("attn,ffn").unwrap(),
            ProjectionKind::ALL
        );
        assert!(ProjectionKind::parse_list("q,bias").is_err());
        assert!(ProjectionKind::parse_list(" , ").is_err());
    }

    #[test]
    fn kind_serde_is_lowercase() {
        assert_eq!(serde_json::to_string(&ProjectionKind::Gate).unwrap(), "\"gate\"");
        let k: ProjectionKind = serde_json::from_str("\"o\"").unwrap();
        assert_eq!(k, ProjectionKind::O);
    }
}
