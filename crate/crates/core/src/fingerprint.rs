//! Per-layer standard-deviation fingerprints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arch_map::{resolve_layers, LayerTensorMap, ModelConfig, ProjectionKind};
use crate::canonical;
use crate::error::{Error, Result};
use crate::tensor_store::{tensor_stats, CheckpointHandle, StreamStats};

pub const SCHEMA_VERSION: u32 = 1;

/// Below this a sequence is treated as constant.
pub const DEGENERATE_STD: f64 = 1e-12;

/// How the expert matrices of one MoE layer become a single std.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    /// All expert matrices of the layer form one population.
    #[default]
    Pooled,
    /// Std per expert, then the arithmetic mean.
    PerExpertMean,
}

impl fmt::Display for MoeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoeMode::Pooled => "pooled",
            MoeMode::PerExpertMean => "per_expert_mean",
        })
    }
}

impl FromStr for MoeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pooled" => Ok(MoeMode::Pooled),
            "per_expert_mean" => Ok(MoeMode::PerExpertMean),
            other => Err(format!("unknown MoE mode {other:?} (pooled, per-expert-mean)")),
        }
    }
}

/// Raw per-layer stds for one projection kind, indexed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StdSequence {
    pub kind: ProjectionKind,
    pub values: Vec<f64>,
}

/// A std sequence shifted to mean 0 and scaled to sample std 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub kind: ProjectionKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extraction {
    /// Precision of the reductions.
    pub accumulation: String,
    pub std_convention: String,
    pub moe_mode: MoeMode,
    pub tool_version: String,
    /// Per kind, per layer: the tensors (and row ranges) that were reduced.
    pub sources: BTreeMap<ProjectionKind, Vec<Vec<String>>>,
}

impl Extraction {
    pub fn new(moe_mode: MoeMode) -> Self {
        Extraction {
            accumulation: "f64".into(),
            std_convention: "sample_n_minus_1".into(),
            moe_mode,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            sources: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fingerprint {
    pub schema_version: u32,
    pub model_id: String,
    pub num_layers: usize,
    /// Raw (unnormalized) stds per kind.
    pub kinds: BTreeMap<ProjectionKind, Vec<f64>>,
    pub extraction: Extraction,
    pub content_hash: String,
}

/// Hex SHA-256 of the canonical compact serialization of `kinds`.
pub fn content_hash(kinds: &BTreeMap<ProjectionKind, Vec<f64>>) -> String {
    canonical::hash(kinds)
}

impl Fingerprint {
    /// Assembles a fingerprint from raw sequences, which must all have the
    /// same length, be finite and non-negative.
    pub fn new(
        model_id: impl Into<String>,
        kinds: BTreeMap<ProjectionKind, Vec<f64>>,
        extraction: Extraction,
    ) -> Result<Self> {
        let model_id = model_id.into();
        let num_layers = kinds.values().next().map_or(0, Vec::len);
        check_kinds(&model_id, num_layers, &kinds)?;
        Ok(Fingerprint {
            schema_version: SCHEMA_VERSION,
            content_hash: content_hash(&kinds),
            model_id,
            num_layers,
            kinds,
            extraction,
        })
    }

    /// Convenience constructor with default extraction metadata.
    pub fn from_sequences(
        model_id: impl Into<String>,
        kinds: BTreeMap<ProjectionKind, Vec<f64>>,
    ) -> Result<Self> {
        Fingerprint::new(model_id, kinds, Extraction::new(MoeMode::Pooled))
    }

    pub fn sequence(&self, kind: ProjectionKind) -> Result<StdSequence> {
        self.kinds
            .get(&kind)
            .map(|values| StdSequence {
                kind,
                values: values.clone(),
            })
            .ok_or_else(|| Error::KindMissing {
                model: self.model_id.clone(),
                kind,
            })
    }

    pub fn kind_list(&self) -> Vec<ProjectionKind> {
        self.kinds.keys().copied().collect()
    }

    /// File name used for this fingerprint on disk.
    pub fn file_name(&self) -> String {
        fingerprint_file_name(&self.model_id)
    }
}

fn check_kinds(context: &str, num_layers: usize, kinds: &BTreeMap<ProjectionKind, Vec<f64>>) -> Result<()> {
    let bad = |reason: String| Error::FingerprintMalformed {
        context: context.to_string(),
        reason,
    };
    if kinds.is_empty() {
        return Err(bad("no sequences".into()));
    }
    for (kind, values) in kinds {
        if values.len() != num_layers {
            return Err(bad(format!(
                "{kind} has {} values but num_layers is {num_layers}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(bad(format!(
                "{kind}[{i}] = {} is not a finite non-negative std",
                values[i]
            )));
        }
    }
    Ok(())
}

/// `<model_id>.tpfp.json`, with characters outside `[A-Za-z0-9._-]`
/// replaced by `_`.
pub fn fingerprint_file_name(model_id: &str) -> String {
    let safe: String = model_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.tpfp.json")
}

/// Resolves the requested kinds and extracts their std sequences.
pub fn extract_fingerprint(
    ckpt: &CheckpointHandle,
    cfg: &ModelConfig,
    kinds: &[ProjectionKind],
    moe_mode: MoeMode,
) -> Result<Fingerprint> {
    let map = resolve_layers(ckpt, cfg, kinds)?;
    extract_from_map(ckpt, &cfg.model_id, &map, moe_mode)
}

/// Extracts std sequences from an already-resolved layer map.
pub fn extract_from_map(
    ckpt: &CheckpointHandle,
    model_id: &str,
    map: &LayerTensorMap,
    moe_mode: MoeMode,
) -> Result<Fingerprint> {
    let jobs: Vec<(usize, ProjectionKind, usize)> = map
        .entries()
        .iter()
        .flat_map(|(&(layer, kind), refs)| (0..refs.len()).map(move |i| (layer, kind, i)))
        .collect();
    let stats: Vec<StreamStats> = jobs
        .par_iter()
        .map(|&(layer, kind, i)| {
            let r = &map.get(layer, kind)[i];
            tensor_stats(ckpt, &r.name, r.rows)
        })
        .collect::<Result<_>>()?;

    let mut per_slot: BTreeMap<(usize, ProjectionKind), Vec<StreamStats>> = BTreeMap::new();
    for (&(layer, kind, _), s) in jobs.iter().zip(stats) {
        per_slot.entry((layer, kind)).or_default().push(s);
    }

    let mut extraction = Extraction::new(moe_mode);
    let mut kinds: BTreeMap<ProjectionKind, Vec<f64>> = BTreeMap::new();
    for &kind in map.kinds() {
        let mut values = Vec::with_capacity(map.num_layers());
        let mut sources = Vec::with_capacity(map.num_layers());
        for layer in 0..map.num_layers() {
            let slot = &per_slot[&(layer, kind)];
            values.push(layer_std(slot, layer, kind, moe_mode)?);
            sources.push(map.get(layer, kind).iter().map(ToString::to_string).collect());
        }
        kinds.insert(kind, values);
        extraction.sources.insert(kind, sources);
    }
    Fingerprint::new(model_id, kinds, extraction)
}

fn layer_std(slot: &[StreamStats], layer: usize, kind: ProjectionKind, mode: MoeMode) -> Result<f64> {
    let degenerate = |s: &StreamStats| Error::DegenerateLayer {
        layer,
        kind,
        count: s.count(),
    };
    match mode {
        MoeMode::Pooled => {
            let pooled = slot.iter().fold(StreamStats::EMPTY, |acc, s| acc.merge(s));
            pooled.sample_std().ok_or_else(|| degenerate(&pooled))
        }
        MoeMode::PerExpertMean => {
            let mut sum = 0.0;
            for s in slot {
                sum += s.sample_std().ok_or_else(|| degenerate(s))?;
            }
            Ok(sum / slot.len() as f64)
        }
    }
}

/// Zero-mean, unit-sample-std transform of raw values.
pub fn normalize_values(values: &[f64], context: &str) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::SequenceTooShort { len: values.len() });
    }
    let stats = StreamStats::from_slice(values);
    let std = stats.sample_std().unwrap_or(0.0);
    if std.is_nan() || std < DEGENERATE_STD {
        return Err(Error::DegenerateSequence {
            context: context.to_string(),
        });
    }
    let mean = stats.mean();
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

pub fn normalize(seq: &StdSequence) -> Result<NormalizedSequence> {
    Ok(NormalizedSequence {
        kind: seq.kind,
        values: normalize_values(&seq.values, seq.kind.as_str())?,
    })
}

/// Canonical pretty JSON document.
pub fn serialize_fingerprint(fp: &Fingerprint) -> Vec<u8> {
    canonical::to_string(fp, true).into_bytes()
}

/// Parses a fingerprint document and verifies its schema version and hash.
/// `context` names the source in error messages.
pub fn deserialize_fingerprint(bytes: &[u8], context: &str) -> Result<Fingerprint> {
    let malformed = |reason: String| Error::FingerprintMalformed {
        context: context.to_string(),
        reason,
    };
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    let version = doc
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed("missing schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersionUnsupported {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: SCHEMA_VERSION,
        });
    }
    let fp: Fingerprint = serde_json::from_value(doc).map_err(|e| malformed(e.to_string()))?;
    check_kinds(context, fp.num_layers, &fp.kinds)?;
    let computed = content_hash(&fp.kinds);
    if computed != fp.content_hash {
        return Err(Error::HashMismatch {
            context: context.to_string(),
            recorded: fp.content_hash,
            computed,
        });
    }
    Ok(fp)
}

/// Reads and verifies a fingerprint file.
pub fn read_fingerprint(path: impl AsRef<std::path::Path>) -> Result<Fingerprint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_fingerprint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch_map::{load_config, resolve_layers};
    use crate::synth::{synthesize, write_safetensors, SynthSpec, TensorData};
    use crate::tensor_store::{open_checkpoint, DType};
    use ProjectionKind::*;

    fn write_q_fixture(dir: &std::path::Path, matrices: &[Vec<f64>], side: usize) {
        let tensors: Vec<TensorData> = matrices
            .iter()
            .enumerate()
            .map(|(l, m)| {
                TensorData::new(
                    format!("model.layers.{l}.self_attn.q_proj.weight"),
                    DType::F64,
                    vec![side, side],
                    m.clone(),
                )
            })
            .collect();
        write_safetensors(&dir.join("model.safetensors"), &tensors).unwrap();
        let cfg = serde_json::json!({"num_hidden_layers": matrices.len(), "hidden_size": side, "num_attention_heads": 1});
        std::fs::write(dir.join("config.json"), cfg.to_string()).unwrap();
    }

    fn extract_q(dir: &std::path::Path) -> Fingerprint {
        let ckpt = open_checkpoint(dir).unwrap();
        let cfg = load_config(dir).unwrap();
        extract_fingerprint(&ckpt, &cfg, &[Q], MoeMode::Pooled).unwrap()
    }

    #[test]
    fn constant_matrices_give_zero_stds() {
        let dir = tempfile::tempdir().unwrap();
        let ms: Vec<Vec<f64>> = (1..=4).map(|c| vec![c as f64 * 0.5; 16]).collect();
        write_q_fixture(dir.path(), &ms, 4);
        assert_eq!(extract_q(dir.path()).kinds[&Q], vec![0.0; 4]);
    }

    #[test]
    fn symmetric_pairs_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let a = [0.5, 1.0, 2.0, 4.0];
        let n = 64usize;
        let ms: Vec<Vec<f64>> = a
            .iter()
            .map(|&al| (0..n).map(|i| if i % 2 == 0 { al } else { -al }).collect())
            .collect();
        write_q_fixture(dir.path(), &ms, 8);
        let fp = extract_q(dir.path());
        for (l, &al) in a.iter().enumerate() {
            let want = al * (n as f64 / (n as f64 - 1.0)).sqrt();
            assert!((fp.kinds[&Q][l] - want).abs() <= 1e-14 * want);
        }
        assert_eq!(
            fp.extraction.sources[&Q][2],
            vec!["model.layers.2.self_attn.q_proj.weight".to_string()]
        );
    }

    #[test]
    fn moe_modes_agree_on_identical_experts_and_differ_otherwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::dense("moe", 3, 16, 2);
        spec.kinds = vec![Gate, Up, Down];
        spec.num_experts = 2;
        spec.identical_experts = true;
        synthesize(&spec, dir.path()).unwrap();
        let ckpt = open_checkpoint(dir.path()).unwrap();
        let cfg = load_config(dir.path()).unwrap();
        let pooled = extract_fingerprint(&ckpt, &cfg, &[Gate, Up, Down], MoeMode::Pooled).unwrap();
        let mean = extract_fingerprint(&ckpt, &cfg, &[Gate, Up, Down], MoeMode::PerExpertMean).unwrap();
        // Pooling E copies multiplies m2 by E and the count by E, so under
        // the n-1 convention the two modes differ by sqrt(E(n-1)/(En-1)).
        let (e, n) = (2.0, 16.0 * 32.0);
        let factor = f64::sqrt(e * (n - 1.0) / (e * n - 1.0));
        for k in [Gate, Up, Down] {
            for (p, m) in pooled.kinds[&k].iter().zip(&mean.kinds[&k]) {
                assert!((p - m * factor).abs() <= 1e-12 * p);
                assert!((p - m).abs() <= p / n);
            }
        }
        assert_eq!(mean.extraction.moe_mode, MoeMode::PerExpertMean);

        let dir2 = tempfile::tempdir().unwrap();
        spec.identical_experts = false;
        synthesize(&spec, dir2.path()).unwrap();
        let ckpt = open_checkpoint(dir2.path()).unwrap();
        let cfg = load_config(dir2.path()).unwrap();
        let p = extract_fingerprint(&ckpt, &cfg, &[Gate], MoeMode::Pooled).unwrap();
        let m = extract_fingerprint(&ckpt, &cfg, &[Gate], MoeMode::PerExpertMean).unwrap();
        assert_ne!(p.kinds[&Gate], m.kinds[&Gate]);
    }

    #[test]
    fn dense_model_ignores_moe_mode() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::dense("d", 3, 16, 2);
        spec.kinds = vec![Q, Gate];
        synthesize(&spec, dir.path()).unwrap();
        let ckpt = open_checkpoint(dir.path()).unwrap();
        let cfg = load_config(dir.path()).unwrap();
        let a = extract_fingerprint(&ckpt, &cfg, &[Q, Gate], MoeMode::Pooled).unwrap();
        let b = extract_fingerprint(&ckpt, &cfg, &[Q, Gate], MoeMode::PerExpertMean).unwrap();
        assert_eq!(a.kinds, b.kinds);
    }

    #[test]
    fn single_element_layer_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let ts = vec![TensorData::new(
            "model.layers.0.mlp.up_proj.weight",
            DType::F32,
            vec![1, 1],
            vec![1.0],
        )];
        write_safetensors(&dir.path().join("model.safetensors"), &ts).unwrap();
        std::fs::write(
            dir.path().join("config.json"),
            r#"{"num_hidden_layers":1,"hidden_size":1,"num_attention_heads":1}"#,
        )
        .unwrap();
        let ckpt = open_checkpoint(dir.path()).unwrap();
        let cfg = load_config(dir.path()).unwrap();
        let map = resolve_layers(&ckpt, &cfg, &[Up]).unwrap();
        let err = extract_from_map(&ckpt, "m", &map, MoeMode::Pooled).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateLayer {
                layer: 0,
                kind: Up,
                count: 1
            }
        ));
    }

    #[test]
    fn normalize_examples() {
        let seq = StdSequence {
            kind: Q,
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(normalize(&seq).unwrap().values, vec![-1.0, 0.0, 1.0]);
        let flat = StdSequence {
            kind: Q,
            values: vec![5.0; 3],
        };
        assert!(matches!(normalize(&flat), Err(Error::DegenerateSequence { .. })));
        assert!(matches!(
            normalize_values(&[1.0], "x"),
            Err(Error::SequenceTooShort { len: 1 })
        ));
        let once = normalize_values(&[0.3, 0.1, 0.7, 0.2], "x").unwrap();
        let twice = normalize_values(&once, "x").unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    fn sample() -> Fingerprint {
        let mut kinds = BTreeMap::new();
        kinds.insert(Q, vec![0.1, 0.2, 1.0 / 3.0]);
        kinds.insert(O, vec![1e-5, 2.5e-3, 0.0]);
        Fingerprint::from_sequences("m/x", kinds).unwrap()
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let fp = sample();
        let bytes = serialize_fingerprint(&fp);
        let back = deserialize_fingerprint(&bytes, "t").unwrap();
        assert_eq!(back, fp);
        assert_eq!(serialize_fingerprint(&back), bytes);
        assert_eq!(fp.file_name(), "m_x.tpfp.json");
    }

    #[test]
    fn tampering_and_future_versions_rejected() {
        let fp = sample();
        let text = String::from_utf8(serialize_fingerprint(&fp)).unwrap();
        let tampered = text.replacen("1.0000000000000001e-1", "1.0000000000000002e-1", 1);
        assert_ne!(tampered, text);
        assert!(matches!(
            deserialize_fingerprint(tampered.as_bytes(), "t"),
            Err(Error::HashMismatch { .. })
        ));
        let future = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            deserialize_fingerprint(future.as_bytes(), "t"),
            Err(Error::SchemaVersionUnsupported {
                found: 2,
                supported: 1
            })
        ));
        assert!(matches!(
            deserialize_fingerprint(b"[1]", "t"),
            Err(Error::FingerprintMalformed { .. })
        ));
    }

    #[test]
    fn invalid_sequences_rejected() {
        let mut kinds = BTreeMap::new();
        kinds.insert(Q, vec![0.1, 0.2]);
        kinds.insert(K, vec![0.1]);
        assert!(Fingerprint::from_sequences("m", kinds).is_err());
        let mut kinds = BTreeMap::new();
        kinds.insert(Q, vec![0.1, -0.2]);
        assert!(Fingerprint::from_sequences("m", kinds).is_err());
    }
}
