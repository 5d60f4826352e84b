use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::rules::{RuleMatch, RuleSet, Target};
use super::{ModelConfig, ProjectionKind};
use crate::error::{Error, Result};
use crate::tensor_store::{CheckpointHandle, RowRange, TensorHandle};

/// A tensor, or a row slice of a fused tensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorRef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<RowRange>,
}

impl fmt::Display for TensorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rows {
            Some(r) => write!(f, "{}[{}:{}]", self.name, r.start, r.end),
            None => f.write_str(&self.name),
        }
    }
}

/// Resolved `(layer, kind) -> tensors` assignment for a checkpoint.
///
/// Dense slots hold one reference. MoE slots hold one per routed expert in
/// ascending expert order, followed by any shared-expert tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTensorMap {
    num_layers: usize,
    kinds: Vec<ProjectionKind>,
    entries: BTreeMap<(usize, ProjectionKind), Vec<TensorRef>>,
}

impl LayerTensorMap {
    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn kinds(&self) -> &[ProjectionKind] {
        &self.kinds
    }

    pub fn get(&self, layer: usize, kind: ProjectionKind) -> &[TensorRef] {
        self.entries
            .get(&(layer, kind))
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    pub fn entries(&self) -> &BTreeMap<(usize, ProjectionKind), Vec<TensorRef>> {
        &self.entries
    }
}

/// Resolves with the built-in rule table.
pub fn resolve_layers(
    ckpt: &CheckpointHandle,
    cfg: &ModelConfig,
    kinds: &[ProjectionKind],
) -> Result<LayerTensorMap> {
    resolve_layers_with(ckpt, cfg, kinds, &RuleSet::builtin())
}

struct Candidate {
    expert: Option<usize>,
    tref: TensorRef,
}

pub fn resolve_layers_with(
    ckpt: &CheckpointHandle,
    cfg: &ModelConfig,
    kinds: &[ProjectionKind],
    rules: &RuleSet,
) -> Result<LayerTensorMap> {
    let wanted: BTreeSet<ProjectionKind> = kinds.iter().copied().collect();
    if wanted.is_empty() {
        return Err(Error::Usage {
            message: "no projection kinds requested".into(),
        });
    }

    let mut slots: BTreeMap<(usize, ProjectionKind), Vec<Candidate>> = BTreeMap::new();
    let mut skipped_layers = BTreeSet::new();

    for (name, handle) in ckpt.tensors() {
        let hits: Vec<(usize, RuleMatch)> = rules
            .rules()
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.matches(name).map(|m| (i, m)))
            .collect();
        let (rule_idx, m) = match hits.as_slice() {
            [] => continue,
            [one] => *one,
            many => {
                return Err(Error::AmbiguousPattern {
                    tensor: name.clone(),
                    rules: many
                        .iter()
                        .map(|(i, _)| rules.rules()[*i].pattern.clone())
                        .collect(),
                })
            }
        };
        let rule = &rules.rules()[rule_idx];
        if m.layer >= cfg.num_layers {
            skipped_layers.insert(m.layer);
            continue;
        }
        let produces: Vec<ProjectionKind> = match &rule.target {
            Target::Single(k) => vec![*k],
            Target::Fused(order) => order.clone(),
        };
        if !produces.iter().any(|k| wanted.contains(k)) {
            continue;
        }
        if handle.shape.len() != 2 {
            return Err(Error::ShapeContradiction {
                tensor: name.clone(),
                reason: format!("expected a 2-D matrix, found shape {:?}", handle.shape),
            });
        }

        let refs: Vec<(ProjectionKind, TensorRef)> = match &rule.target {
            Target::Single(k) => {
                if m.expert.is_none() {
                    check_attention_shape(*k, handle, cfg)?;
                }
                vec![(
                    *k,
                    TensorRef {
                        name: name.clone(),
                        rows: None,
                    },
                )]
            }
            Target::Fused(order) => split_fused(handle, order, cfg)?,
        };
        for (kind, tref) in refs {
            if wanted.contains(&kind) {
                slots.entry((m.layer, kind)).or_default().push(Candidate {
                    expert: m.expert,
                    tref,
                });
            }
        }
    }

    if !skipped_layers.is_empty() {
        log::warn!(
            "{}: ignoring tensors of layers {:?} beyond the configured {} layers",
            cfg.model_id,
            skipped_layers,
            cfg.num_layers
        );
    }

    for &kind in &wanted {
        let missing: Vec<usize> = (0..cfg.num_layers)
            .filter(|l| !slots.contains_key(&(*l, kind)))
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnresolvedLayer {
                kind,
                layers: missing,
            });
        }
    }

    let mut entries = BTreeMap::new();
    for ((layer, kind), cands) in slots {
        let (mut experts, mut plain): (Vec<Candidate>, Vec<Candidate>) =
            cands.into_iter().partition(|c| c.expert.is_some());
        let list = if experts.is_empty() {
            if plain.len() != 1 {
                return Err(Error::AmbiguousPattern {
                    tensor: plain[0].tref.name.clone(),
                    rules: plain.iter().map(|c| c.tref.to_string()).collect(),
                });
            }
            vec![plain.remove(0).tref]
        } else {
            experts.sort_by_key(|c| c.expert);
            let indices: Vec<usize> = experts.iter().filter_map(|c| c.expert).collect();
            if indices.iter().enumerate().any(|(i, &e)| i != e) {
                return Err(Error::ShapeContradiction {
                    tensor: experts[0].tref.name.clone(),
                    reason: format!(
                        "layer {layer} {kind}: expert indices {indices:?} are not 0..{}",
                        indices.len()
                    ),
                });
            }
            if cfg.num_experts > 0 && indices.len() != cfg.num_experts {
                return Err(Error::ShapeContradiction {
                    tensor: experts[0].tref.name.clone(),
                    reason: format!(
                        "layer {layer} {kind}: found {} experts but config declares {}",
                        indices.len(),
                        cfg.num_experts
                    ),
                });
            }
            plain.sort_by(|a, b| a.tref.cmp(&b.tref));
            experts.into_iter().chain(plain).map(|c| c.tref).collect()
        };
        entries.insert((layer, kind), list);
    }

    Ok(LayerTensorMap {
        num_layers: cfg.num_layers,
        kinds: wanted.into_iter().collect(),
        entries,
    })
}

fn check_attention_shape(kind: ProjectionKind, h: &TensorHandle, cfg: &ModelConfig) -> Result<()> {
    let (dim, axis, expected) = match kind {
        ProjectionKind::Q => (h.shape[0], "rows", cfg.q_rows()),
        ProjectionKind::K | ProjectionKind::V => (h.shape[0], "rows", cfg.kv_rows()),
        ProjectionKind::O => (h.shape[1], "columns", cfg.q_rows()),
        _ => return Ok(()),
    };
    if dim != expected {
        return Err(Error::ShapeContradiction {
            tensor: h.name.clone(),
            reason: format!(
                "{kind} projection has {dim} {axis}, config implies {expected} \
                 ({} heads, {} kv heads, head_dim {})",
                cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
            ),
        });
    }
    Ok(())
}

/// Row ranges of a fused tensor, in `order`. Q takes `H*d` rows, K and V
/// take `Hkv*d` each; gate and up split the rows in half.
fn split_fused(
    h: &TensorHandle,
    order: &[ProjectionKind],
    cfg: &ModelConfig,
) -> Result<Vec<(ProjectionKind, TensorRef)>> {
    let rows = h.shape[0];
    let sizes: Vec<usize> = order
        .iter()
        .map(|k| match k {
            ProjectionKind::Q => cfg.q_rows(),
            ProjectionKind::K | ProjectionKind::V => cfg.kv_rows(),
            _ => rows / order.len(),
        })
        .collect();
    let total: usize = sizes.iter().sum();
    if total != rows {
        return Err(Error::ShapeContradiction {
            tensor: h.name.clone(),
            reason: format!(
                "fused {} tensor has {rows} rows but the split needs {total}",
                order.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
            ),
        });
    }
    let mut start = 0;
    Ok(order
        .iter()
        .zip(sizes)
        .map(|(&kind, size)| {
            let r = RowRange::new(start, start + size);
            start += size;
            (
                kind,
                TensorRef {
                    name: h.name.clone(),
                    rows: Some(r),
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_map::MappingRule;
    use crate::synth::{write_safetensors, TensorData};
    use crate::tensor_store::{open_checkpoint, DType};
    use ProjectionKind::*;

    fn cfg(layers: usize, heads: usize, kv: usize, hidden: usize, experts: usize) -> ModelConfig {
        ModelConfig {
            model_id: "t".into(),
            num_layers: layers,
            hidden_size: hidden,
            num_heads: heads,
            num_kv_heads: kv,
            head_dim: hidden / heads,
            num_experts: experts,
            architecture_tag: "test".into(),
            layers_inferred: false,
        }
    }

    fn zeros(name: String, shape: Vec<usize>) -> TensorData {
        let n = shape.iter().product();
        TensorData::new(name, DType::F32, shape, vec![0.0; n])
    }

    fn ckpt(tensors: Vec<TensorData>) -> (tempfile::TempDir, CheckpointHandle) {
        let dir = tempfile::tempdir().unwrap();
        write_safetensors(&dir.path().join("model.safetensors"), &tensors).unwrap();
        let c = open_checkpoint(dir.path()).unwrap();
        (dir, c)
    }

    #[test]
    fn separate_projections() {
        let mut ts = vec![];
        for i in 0..4 {
            ts.push(zeros(
                format!("model.layers.{i}.self_attn.q_proj.weight"),
                vec![64, 64],
            ));
            ts.push(zeros(format!("model.layers.{i}.self_attn.q_proj.bias"), vec![64]));
            ts.push(zeros(
                format!("model.layers.{i}.input_layernorm.weight"),
                vec![64],
            ));
        }
        ts.push(zeros("model.embed_tokens.weight".into(), vec![10, 64]));
        let (_d, c) = ckpt(ts);
        let map = resolve_layers(&c, &cfg(4, 4, 4, 64, 0), &[Q]).unwrap();
        for l in 0..4 {
            let refs = map.get(l, Q);
            assert_eq!(refs.len(), 1);
            assert_eq!(refs[0].name, format!("model.layers.{l}.self_attn.q_proj.weight"));
            assert_eq!(refs[0].rows, None);
        }
        assert_eq!(map.entries().len(), 4);
    }

    #[test]
    fn fused_qkv_split_ranges() {
        let ts = (0..2)
            .map(|i| {
                zeros(
                    format!("model.layers.{i}.self_attn.qkv_proj.weight"),
                    vec![128, 64],
                )
            })
            .collect();
        let (_d, c) = ckpt(ts);
        let map = resolve_layers(&c, &cfg(2, 4, 2, 64, 0), &[Q, K, V]).unwrap();
        assert_eq!(map.get(1, Q)[0].rows, Some(RowRange::new(0, 64)));
        assert_eq!(map.get(1, K)[0].rows, Some(RowRange::new(64, 96)));
        assert_eq!(map.get(1, V)[0].rows, Some(RowRange::new(96, 128)));
    }

    #[test]
    fn fused_rows_must_add_up() {
        let ts = vec![zeros(
            "model.layers.0.self_attn.qkv_proj.weight".into(),
            vec![120, 64],
        )];
        let (_d, c) = ckpt(ts);
        let err = resolve_layers(&c, &cfg(1, 4, 2, 64, 0), &[Q]).unwrap_err();
        assert!(matches!(err, Error::ShapeContradiction { .. }), "{err}");
    }

    #[test]
    fn moe_experts_in_ascending_order_with_shared_last() {
        let mut ts = vec![];
        for l in 0..2 {
            for e in (0..8).rev() {
                ts.push(zeros(
                    format!("model.layers.{l}.mlp.experts.{e}.gate_proj.weight"),
                    vec![32, 16],
                ));
            }
            ts.push(zeros(
                format!("model.layers.{l}.mlp.shared_expert.gate_proj.weight"),
                vec![64, 16],
            ));
            ts.push(zeros(format!("model.layers.{l}.mlp.gate.weight"), vec![8, 16]));
        }
        let (_d, c) = ckpt(ts);
        let map = resolve_layers(&c, &cfg(2, 4, 4, 16, 8), &[Gate]).unwrap();
        let refs = map.get(0, Gate);
        assert_eq!(refs.len(), 9);
        for (e, r) in refs.iter().take(8).enumerate() {
            assert_eq!(r.name, format!("model.layers.0.mlp.experts.{e}.gate_proj.weight"));
        }
        assert!(refs[8].name.contains("shared_expert"));

        let err = resolve_layers(&c, &cfg(2, 4, 4, 16, 4), &[Gate]).unwrap_err();
        assert!(matches!(err, Error::ShapeContradiction { .. }));
    }

    #[test]
    fn missing_layers_listed() {
        let ts = [0, 2]
            .iter()
            .map(|i| zeros(format!("model.layers.{i}.self_attn.q_proj.weight"), vec![64, 64]))
            .collect();
        let (_d, c) = ckpt(ts);
        match resolve_layers(&c, &cfg(4, 4, 4, 64, 0), &[Q]) {
            Err(Error::UnresolvedLayer { kind: Q, layers }) => assert_eq!(layers, vec![1, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn attention_shape_checked_against_config() {
        let ts = vec![zeros(
            "model.layers.0.self_attn.k_proj.weight".into(),
            vec![64, 64],
        )];
        let (_d, c) = ckpt(ts);
        let err = resolve_layers(&c, &cfg(1, 4, 2, 64, 0), &[K]).unwrap_err();
        assert!(matches!(err, Error::ShapeContradiction { .. }));
    }

    #[test]
    fn ambiguous_rules_and_slots() {
        let ts = vec![zeros(
            "model.layers.0.self_attn.q_proj.weight".into(),
            vec![64, 64],
        )];
        let (_d, c) = ckpt(ts);
        let rules = RuleSet::new(vec![
            MappingRule {
                pattern: "model.layers.{layer}.self_attn.q_proj.weight".into(),
                kind: Some("q".into()),
                fused_order: None,
                family: None,
            },
            MappingRule {
                pattern: "model.layers.{layer}.self_attn.q_proj.weight".into(),
                kind: Some("k".into()),
                fused_order: None,
                family: None,
            },
        ])
        .unwrap();
        let err = resolve_layers_with(&c, &cfg(1, 4, 4, 64, 0), &[Q], &rules).unwrap_err();
        assert!(matches!(err, Error::AmbiguousPattern { .. }));

        let ts = vec![
            zeros("model.layers.0.self_attn.q_proj.weight".into(), vec![64, 64]),
            zeros("model.layers.0.self_attn.qkv_proj.weight".into(), vec![192, 64]),
        ];
        let (_d, c) = ckpt(ts);
        let err = resolve_layers(&c, &cfg(1, 4, 4, 64, 0), &[Q]).unwrap_err();
        assert!(matches!(err, Error::AmbiguousPattern { .. }), "{err}");
    }

    #[test]
    fn extra_layers_beyond_config_are_ignored() {
        let ts = (0..3)
            .map(|i| zeros(format!("model.layers.{i}.self_attn.q_proj.weight"), vec![64, 64]))
            .collect();
        let (_d, c) = ckpt(ts);
        let map = resolve_layers(&c, &cfg(2, 4, 4, 64, 0), &[Q]).unwrap();
        assert_eq!(map.entries().len(), 2);
    }

    #[test]
    fn resolution_is_deterministic() {
        let mut ts = vec![];
        for i in 0..3 {
            for p in ["q", "k", "v", "o"] {
                ts.push(zeros(
                    format!("model.layers.{i}.self_attn.{p}_proj.weight"),
                    vec![64, 64],
                ));
            }
        }
        let (_d, c) = ckpt(ts);
        let a = resolve_layers(&c, &cfg(3, 4, 4, 64, 0), &ProjectionKind::ATTENTION).unwrap();
        let b = resolve_layers(&c, &cfg(3, 4, 4, 64, 0), &[O, V, K, Q]).unwrap();
        assert_eq!(a, b);
    }
}
