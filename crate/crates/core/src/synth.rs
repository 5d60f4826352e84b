//! Synthetic checkpoint generator.
//!
//! Writes small but structurally faithful safetensors checkpoints (dense,
//! GQA, fused QKV, MoE, sharded; any float dtype) whose projection matrices
//! have exactly controlled per-layer standard deviations. Every generated
//! population is centered and rescaled in `f64` so its Bessel-corrected std
//! equals the target before quantization to the storage dtype.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::arch_map::ProjectionKind;
use crate::error::{Error, Result};
use crate::tensor_store::{DType, StreamStats};

/// An in-memory tensor to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "{name}: shape {shape:?} does not match {} values",
            values.len()
        );
        TensorData {
            name,
            dtype,
            shape,
            values,
        }
    }
}

/// Writes tensors to one safetensors file, ordered by name, with the JSON
/// header padded to an 8-byte boundary.
pub fn write_safetensors(path: &Path, tensors: &[TensorData]) -> Result<()> {
    let mut order: Vec<&TensorData> = tensors.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));

    let mut header = Map::new();
    header.insert("__metadata__".into(), json!({ "format": "pt" }));
    let mut offset = 0u64;
    for t in &order {
        let len = (t.values.len() * t.dtype.byte_size()) as u64;
        if header
            .insert(
                t.name.clone(),
                json!({ "dtype": t.dtype.tag(), "shape": t.shape, "data_offsets": [offset, offset + len] }),
            )
            .is_some()
        {
            return Err(Error::DuplicateTensor {
                name: t.name.clone(),
                first: path.display().to_string(),
                second: path.display().to_string(),
            });
        }
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&(header_bytes.len() as u64).to_le_bytes())?;
    write(&header_bytes)?;
    let mut buf = Vec::new();
    for t in &order {
        buf.clear();
        for &v in &t.values {
            t.dtype.encode(v, &mut buf);
        }
        write(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayout {
    #[default]
    Separate,
    /// One `qkv_proj` tensor per layer, rows ordered Q, K, V.
    Fused,
}

fn default_dtype() -> DType {
    DType::F32
}

fn default_kinds() -> Vec<ProjectionKind> {
    ProjectionKind::ATTENTION.to_vec()
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Description of a synthetic model, usually read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub num_kv_heads: Option<usize>,
    #[serde(default)]
    pub head_dim: Option<usize>,
    /// FFN width; defaults to twice the hidden size.
    #[serde(default)]
    pub intermediate_size: Option<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub layout: AttentionLayout,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<ProjectionKind>,
    /// 0 for a dense FFN.
    #[serde(default)]
    pub num_experts: usize,
    /// Replicate one FFN matrix into every expert (upcycling-style).
    #[serde(default)]
    pub identical_experts: bool,
    #[serde(default)]
    pub shared_expert: bool,
    #[serde(default = "default_one")]
    pub shards: usize,
    /// Per-kind target stds, one per layer. Missing kinds get seeded
    /// random targets.
    #[serde(default)]
    pub targets: BTreeMap<ProjectionKind, Vec<f64>>,
    /// Leave the layer count out of `config.json`.
    #[serde(default)]
    pub omit_layer_count: bool,
    /// Also write embeddings, norms and biases.
    #[serde(default = "default_true")]
    pub extras: bool,
}

impl SynthSpec {
    /// A dense model with default settings.
    pub fn dense(model_id: &str, num_layers: usize, hidden_size: usize, num_heads: usize) -> Self {
        SynthSpec {
            model_id: model_id.into(),
            num_layers,
            hidden_size,
            num_heads,
            num_kv_heads: None,
            head_dim: None,
            intermediate_size: None,
            dtype: DType::F32,
            seed: 0,
            layout: AttentionLayout::Separate,
            kinds: default_kinds(),
            num_experts: 0,
            identical_experts: false,
            shared_expert: false,
            shards: 1,
            targets: BTreeMap::new(),
            omit_layer_count: false,
            extras: true,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::SpecInvalid(e.to_string()))
    }

    fn kv_heads(&self) -> usize {
        self.num_kv_heads.unwrap_or(self.num_heads)
    }

    fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.hidden_size / self.num_heads.max(1))
    }

    fn intermediate(&self) -> usize {
        self.intermediate_size.unwrap_or(2 * self.hidden_size)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.model_id.is_empty() {
            return bad("model_id is empty".into());
        }
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 {
            return bad("num_layers, hidden_size and num_heads must be positive".into());
        }
        let kv = self.kv_heads();
        if kv == 0 || !self.num_heads.is_multiple_of(kv) {
            return bad(format!(
                "num_kv_heads {kv} must divide num_heads {}",
                self.num_heads
            ));
        }
        if self.head_dim.is_none() && !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad("hidden_size must be divisible by num_heads when head_dim is absent".into());
        }
        if self.head_dim == Some(0) || self.intermediate_size == Some(0) {
            return bad("head_dim and intermediate_size must be positive".into());
        }
        if self.kinds.is_empty() {
            return bad("kinds is empty".into());
        }
        if self.shards == 0 || self.shards > self.num_layers {
            return bad(format!("shards must be in 1..={}", self.num_layers));
        }
        if self.identical_experts && self.num_experts == 0 {
            return bad("identical_experts needs num_experts > 0".into());
        }
        if self.identical_experts && self.shared_expert {
            return bad("identical_experts cannot be combined with shared_expert".into());
        }
        if self.shared_expert && self.num_experts == 0 {
            return bad("shared_expert needs num_experts > 0".into());
        }
        for (kind, t) in &self.targets {
            if t.len() != self.num_layers {
                return bad(format!(
                    "targets.{kind} has {} values, expected {}",
                    t.len(),
                    self.num_layers
                ));
            }
            if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("targets.{kind} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Kinds actually written (fused layouts always carry Q, K and V).
    fn written_kinds(&self) -> Vec<ProjectionKind> {
        let mut kinds = self.kinds.clone();
        if self.layout == AttentionLayout::Fused
            && kinds
                .iter()
                .any(|k| matches!(k, ProjectionKind::Q | ProjectionKind::K | ProjectionKind::V))
        {
            kinds.extend([ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V]);
        }
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Target std per kind and layer, drawing seeded values for kinds
    /// missing from `targets`.
    pub fn effective_targets(&self) -> BTreeMap<ProjectionKind, Vec<f64>> {
        self.written_kinds()
            .into_iter()
            .map(|kind| {
                let values = self.targets.get(&kind).cloned().unwrap_or_else(|| {
                    let mut rng = slot_rng(self.seed, usize::MAX, kind);
                    (0..self.num_layers)
                        .map(|_| 0.02 * (0.5 + rng.random::<f64>()))
                        .collect()
                });
                (kind, values)
            })
            .collect()
    }

    fn shape(&self, kind: ProjectionKind) -> Vec<usize> {
        let q = self.num_heads * self.head_dim();
        let kv = self.kv_heads() * self.head_dim();
        let h = self.hidden_size;
        let i = self.intermediate();
        match kind {
            ProjectionKind::Q => vec![q, h],
            ProjectionKind::K | ProjectionKind::V => vec![kv, h],
            ProjectionKind::O => vec![h, q],
            ProjectionKind::Gate | ProjectionKind::Up => vec![i, h],
            ProjectionKind::Down => vec![h, i],
        }
    }

    fn config_json(&self) -> Value {
        let mut cfg = json!({
            "architectures": ["SynthForCausalLM"],
            "model_type": "synth",
            "hidden_size": self.hidden_size,
            "num_attention_heads": self.num_heads,
            "num_key_value_heads": self.kv_heads(),
            "head_dim": self.head_dim(),
            "intermediate_size": self.intermediate(),
            "torch_dtype": self.dtype.tag(),
        });
        if !self.omit_layer_count {
            cfg["num_hidden_layers"] = json!(self.num_layers);
        }
        if self.num_experts > 0 {
            cfg["num_experts"] = json!(self.num_experts);
        }
        cfg
    }
}

/// Record of what [`synthesize`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// `(name, dtype, shape)` of every tensor written, sorted by name.
    pub tensors: Vec<(String, DType, Vec<usize>)>,
    pub targets: BTreeMap<ProjectionKind, Vec<f64>>,
}

fn kind_index(kind: ProjectionKind) -> u64 {
    ProjectionKind::ALL.iter().position(|k| *k == kind).unwrap() as u64
}

fn slot_rng(seed: u64, layer: usize, kind: ProjectionKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((layer as u64).wrapping_mul(8).wrapping_add(kind_index(kind)));
    rng
}

/// `n` values with mean 0 and Bessel-corrected std exactly `target` (in f64).
pub fn standardized_normals(rng: &mut impl Rng, n: usize, target: f64) -> Vec<f64> {
    let mut z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let stats = StreamStats::from_slice(&z);
    let scale = match stats.sample_std() {
        Some(s) if s > 0.0 => target / s,
        _ => 0.0,
    };
    for v in &mut z {
        *v = (*v - stats.mean()) * scale;
    }
    z
}

fn layer_prefix(layer: usize) -> String {
    format!("model.layers.{layer}")
}

fn tensor_name(layer: usize, kind: ProjectionKind, expert: Option<usize>, shared: bool) -> String {
    let p = layer_prefix(layer);
    match kind {
        ProjectionKind::Q | ProjectionKind::K | ProjectionKind::V | ProjectionKind::O => {
            format!("{p}.self_attn.{kind}_proj.weight")
        }
        _ if shared => format!("{p}.mlp.shared_expert.{kind}_proj.weight"),
        _ => match expert {
            Some(e) => format!("{p}.mlp.experts.{e}.{kind}_proj.weight"),
            None => format!("{p}.mlp.{kind}_proj.weight"),
        },
    }
}

/// Tensors of one layer, in generation order.
fn layer_tensors(
    spec: &SynthSpec,
    layer: usize,
    targets: &BTreeMap<ProjectionKind, Vec<f64>>,
) -> Vec<TensorData> {
    let mut out = Vec::new();
    let mut fused_rows: Vec<Vec<f64>> = Vec::new();
    let dtype = spec.dtype;

    for (&kind, t) in targets {
        let target = t[layer];
        let shape = spec.shape(kind);
        let n: usize = shape.iter().product();
        let mut rng = slot_rng(spec.seed, layer, kind);

        if kind.is_attention() {
            let values = standardized_normals(&mut rng, n, target);
            if spec.layout == AttentionLayout::Fused && kind != ProjectionKind::O {
                fused_rows.push(values);
            } else {
                out.push(TensorData::new(
                    tensor_name(layer, kind, None, false),
                    dtype,
                    shape,
                    values,
                ));
            }
            continue;
        }

        if spec.num_experts == 0 {
            let values = standardized_normals(&mut rng, n, target);
            out.push(TensorData::new(
                tensor_name(layer, kind, None, false),
                dtype,
                shape,
                values,
            ));
        } else if spec.identical_experts {
            let e = spec.num_experts as f64;
            let nf = n as f64;
            // E identical copies pooled: m2_total = E * m2_single.
            let single = target * ((e * nf - 1.0) / (e * (nf - 1.0))).sqrt();
            let values = standardized_normals(&mut rng, n, single);
            for expert in 0..spec.num_experts {
                out.push(TensorData::new(
                    tensor_name(layer, kind, Some(expert), false),
                    dtype,
                    shape.clone(),
                    values.clone(),
                ));
            }
        } else {
            let parts = spec.num_experts + usize::from(spec.shared_expert);
            let pool = standardized_normals(&mut rng, n * parts, target);
            for (i, chunk) in pool.chunks_exact(n).enumerate() {
                let (expert, shared) = if i < spec.num_experts {
                    (Some(i), false)
                } else {
                    (None, true)
                };
                out.push(TensorData::new(
                    tensor_name(layer, kind, expert, shared),
                    dtype,
                    shape.clone(),
                    chunk.to_vec(),
                ));
            }
        }
    }

    if !fused_rows.is_empty() {
        let q = spec.num_heads * spec.head_dim();
        let kv = spec.kv_heads() * spec.head_dim();
        let values: Vec<f64> = fused_rows.concat();
        out.push(TensorData::new(
            format!("{}.self_attn.qkv_proj.weight", layer_prefix(layer)),
            dtype,
            vec![q + 2 * kv, spec.hidden_size],
            values,
        ));
    }

    if spec.extras {
        let h = spec.hidden_size;
        let mut rng = slot_rng(spec.seed ^ 0x5eed, layer, ProjectionKind::Q);
        out.push(TensorData::new(
            format!("{}.input_layernorm.weight", layer_prefix(layer)),
            dtype,
            vec![h],
            (0..h)
                .map(|_| 1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ));
        if spec.layout == AttentionLayout::Separate {
            let q = spec.num_heads * spec.head_dim();
            out.push(TensorData::new(
                format!("{}.self_attn.q_proj.bias", layer_prefix(layer)),
                dtype,
                vec![q],
                standardized_normals(&mut rng, q, 0.1),
            ));
        }
    }
    out
}

/// Generates the checkpoint described by `spec` into `out_dir`.
pub fn synthesize(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let targets = spec.effective_targets();

    let config = serde_json::to_string_pretty(&spec.config_json()).expect("config serializes");
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, config + "\n").map_err(|e| Error::io(&config_path, e))?;

    let mut files = vec![config_path];
    let mut written = Vec::new();
    let mut weight_map = BTreeMap::new();
    let mut total_size = 0usize;

    for shard in 0..spec.shards {
        let first = shard * spec.num_layers / spec.shards;
        let last = (shard + 1) * spec.num_layers / spec.shards;
        let mut tensors: Vec<TensorData> = (first..last)
            .flat_map(|layer| layer_tensors(spec, layer, &targets))
            .collect();
        if shard == 0 && spec.extras {
            let mut rng = slot_rng(spec.seed ^ 0xe111, 0, ProjectionKind::Q);
            tensors.push(TensorData::new(
                "model.embed_tokens.weight",
                spec.dtype,
                vec![32, spec.hidden_size],
                standardized_normals(&mut rng, 32 * spec.hidden_size, 0.02),
            ));
            tensors.push(TensorData::new(
                "model.norm.weight",
                spec.dtype,
                vec![spec.hidden_size],
                vec![1.0; spec.hidden_size],
            ));
        }
        let file_name = if spec.shards == 1 {
            "model.safetensors".to_string()
        } else {
            format!("model-{:05}-of-{:05}.safetensors", shard + 1, spec.shards)
        };
        let path = out_dir.join(&file_name);
        write_safetensors(&path, &tensors)?;
        for t in tensors {
            total_size += t.values.len() * t.dtype.byte_size();
            weight_map.insert(t.name.clone(), file_name.clone());
            written.push((t.name, t.dtype, t.shape));
        }
        files.push(path);
    }

    if spec.shards > 1 {
        let index = json!({ "metadata": { "total_size": total_size }, "weight_map": weight_map });
        let path = out_dir.join("model.safetensors.index.json");
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }

    written.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(SynthOutput {
        dir: out_dir.to_path_buf(),
        files,
        tensors: written,
        targets,
    })
}
