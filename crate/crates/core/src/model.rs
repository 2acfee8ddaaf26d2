//! Shared-backbone multi-head classifier.
//!
//! One backbone MLP maps a flattened image to a shared feature vector; each
//! task owns a two-layer head that maps the feature to its logits. The model
//! can be split into a backbone slice (edge side) and a heads slice (server
//! side), and both slices round-trip through the binary checkpoint container.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTLM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("task index {index} out of range ({n_tasks} tasks)")]
    BadTaskIndex { index: usize, n_tasks: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("config JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One classification task: a display name and its class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
}

/// Static architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image dimensions (width, height, channels).
    pub input_shape: (usize, usize, usize),
    /// Hidden-layer widths of the backbone, input to feature.
    pub backbone_widths: Vec<usize>,
    /// Width of the shared feature vector crossing the splitting point.
    pub feature_len: usize,
    /// Hidden width of every two-layer task head.
    pub head_hidden_width: usize,
    pub tasks: Vec<TaskSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (w, h, c) = self.input_shape;
        if w == 0 || h == 0 || c == 0 {
            return Err(ModelError::Config("input dimensions must be positive".into()));
        }
        if self.feature_len == 0 || self.head_hidden_width == 0 {
            return Err(ModelError::Config("widths must be positive".into()));
        }
        if self.backbone_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Config("widths must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(ModelError::Config("at least one task is required".into()));
        }
        if self.tasks.iter().any(|t| t.n_classes < 2) {
            return Err(ModelError::Config("every task needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        let (w, h, c) = self.input_shape;
        w * h * c
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// (fan_in, fan_out) per backbone layer, input to feature.
    pub fn backbone_layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.backbone_widths.len() + 1);
        let mut prev = self.input_len();
        for &w in &self.backbone_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.feature_len));
        dims
    }

    /// (fan_in, fan_out) for the two layers of head `j`.
    pub fn head_layer_dims(&self, j: usize) -> [(usize, usize); 2] {
        [
            (self.feature_len, self.head_hidden_width),
            (self.head_hidden_width, self.tasks[j].n_classes),
        ]
    }

    pub fn backbone_param_names(&self) -> Vec<(String, String)> {
        (0..self.backbone_layer_dims().len())
            .map(|i| (format!("backbone.{i}.weight"), format!("backbone.{i}.bias")))
            .collect()
    }

    pub fn head_param_names(&self, j: usize) -> Vec<(String, String)> {
        (0..2)
            .map(|i| (format!("head.{j}.{i}.weight"), format!("head.{j}.{i}.bias")))
            .collect()
    }

    /// Digest of the canonical JSON encoding, used in metrics documents.
    pub fn digest(&self) -> String {
        canonical::digest(self).expect("config serializes")
    }
}

/// Ordered store of uniquely named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<(), ModelError> {
        if self.index.contains_key(&name) {
            return Err(ModelError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.len() as u64).sum()
    }
}

/// Backbone plus N task heads.
#[derive(Debug, Clone)]
pub struct MtlModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Edge-side slice: backbone parameters only.
#[derive(Debug, Clone)]
pub struct BackboneSlice {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Server-side slice: head parameters only.
#[derive(Debug, Clone)]
pub struct HeadsSlice {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn init_layer(
    store: &mut ParamStore,
    rng: &mut Rng,
    weight_name: String,
    bias_name: String,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), ModelError> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data: Vec<f32> = (0..fan_in * fan_out)
        .map(|_| rng.uniform_f32(-limit, limit))
        .collect();
    store.insert(weight_name, Tensor::new(vec![fan_in, fan_out], data)?)?;
    store.insert(bias_name, Tensor::zeros(vec![fan_out]))?;
    Ok(())
}

impl MtlModel {
    /// Initialize with uniform `±sqrt(6/(fan_in+fan_out))` weights and zero
    /// biases, drawn in a fixed order from `rng`.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        for ((w_name, b_name), (fan_in, fan_out)) in config
            .backbone_param_names()
            .into_iter()
            .zip(config.backbone_layer_dims())
        {
            init_layer(&mut params, rng, w_name, b_name, fan_in, fan_out)?;
        }
        for j in 0..config.n_tasks() {
            for ((w_name, b_name), (fan_in, fan_out)) in config
                .head_param_names(j)
                .into_iter()
                .zip(config.head_layer_dims(j))
            {
                init_layer(&mut params, rng, w_name, b_name, fan_in, fan_out)?;
            }
        }
        Ok(MtlModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        validate_backbone_params(&config, &params)?;
        validate_head_params(&config, &params)?;
        Ok(MtlModel { config, params })
    }

    pub fn n_tasks(&self) -> usize {
        self.config.n_tasks()
    }

    /// `Z_b` for a single `[w,h,c]` input or a `[batch,w,h,c]` batch.
    /// Output is always `[batch, feature_len]`.
    pub fn backbone_forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        backbone_forward_impl(&self.config, &self.params, tape, x)
    }

    /// Logits of head `j` from a `[batch, feature_len]` feature.
    pub fn head_forward(
        &self,
        tape: &mut Tape,
        j: usize,
        feature: &Tensor,
    ) -> Result<Tensor, ModelError> {
        if j >= self.n_tasks() {
            return Err(ModelError::BadTaskIndex {
                index: j,
                n_tasks: self.n_tasks(),
            });
        }
        Ok(head_forward_impl(&self.config, &self.params, tape, j, feature)?)
    }

    /// Logits of every head; the backbone runs exactly once.
    pub fn predict_all(&self, tape: &mut Tape, x: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let feature = self.backbone_forward(tape, x)?;
        (0..self.n_tasks())
            .map(|j| self.head_forward(tape, j, &feature))
            .collect()
    }

    /// Per-task logits vectors for one `[w,h,c]` input.
    pub fn predict_one(&self, x: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        let mut tape = Tape::inference();
        let logits = self.predict_all(&mut tape, x)?;
        logits
            .into_iter()
            .map(|l| {
                let n = l.len();
                Ok(tape.reshape(&l, vec![n])?)
            })
            .collect()
    }

    /// Split into the edge-side and server-side parameter slices.
    pub fn split(&self) -> Result<(BackboneSlice, HeadsSlice), ModelError> {
        let mut backbone = ParamStore::new();
        for (w, b) in self.config.backbone_param_names() {
            backbone.insert(w.clone(), self.params.require(&w)?.clone())?;
            backbone.insert(b.clone(), self.params.require(&b)?.clone())?;
        }
        let mut heads = ParamStore::new();
        for j in 0..self.n_tasks() {
            for (w, b) in self.config.head_param_names(j) {
                heads.insert(w.clone(), self.params.require(&w)?.clone())?;
                heads.insert(b.clone(), self.params.require(&b)?.clone())?;
            }
        }
        Ok((
            BackboneSlice {
                config: self.config.clone(),
                params: backbone,
            },
            HeadsSlice {
                config: self.config.clone(),
                params: heads,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (config, params) = read_checkpoint(path)?;
        MtlModel::from_parts(config, params)
    }
}

impl BackboneSlice {
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        validate_backbone_params(&config, &params)?;
        Ok(BackboneSlice { config, params })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        backbone_forward_impl(&self.config, &self.params, tape, x)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (config, params) = read_checkpoint(path)?;
        BackboneSlice::from_parts(config, params)
    }
}

impl HeadsSlice {
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        validate_head_params(&config, &params)?;
        Ok(HeadsSlice { config, params })
    }

    pub fn head_forward(
        &self,
        tape: &mut Tape,
        j: usize,
        feature: &Tensor,
    ) -> Result<Tensor, ModelError> {
        if j >= self.config.n_tasks() {
            return Err(ModelError::BadTaskIndex {
                index: j,
                n_tasks: self.config.n_tasks(),
            });
        }
        Ok(head_forward_impl(&self.config, &self.params, tape, j, feature)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (config, params) = read_checkpoint(path)?;
        HeadsSlice::from_parts(config, params)
    }
}

fn validate_backbone_params(config: &ModelConfig, params: &ParamStore) -> Result<(), ModelError> {
    for ((w_name, b_name), (fan_in, fan_out)) in config
        .backbone_param_names()
        .into_iter()
        .zip(config.backbone_layer_dims())
    {
        expect_shape(params, &w_name, &[fan_in, fan_out])?;
        expect_shape(params, &b_name, &[fan_out])?;
    }
    Ok(())
}

fn validate_head_params(config: &ModelConfig, params: &ParamStore) -> Result<(), ModelError> {
    for j in 0..config.n_tasks() {
        for ((w_name, b_name), (fan_in, fan_out)) in config
            .head_param_names(j)
            .into_iter()
            .zip(config.head_layer_dims(j))
        {
            expect_shape(params, &w_name, &[fan_in, fan_out])?;
            expect_shape(params, &b_name, &[fan_out])?;
        }
    }
    Ok(())
}

fn expect_shape(params: &ParamStore, name: &str, expected: &[usize]) -> Result<(), ModelError> {
    let t = params.require(name)?;
    if t.shape() != expected {
        return Err(ModelError::ParamShape {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Flatten `[w,h,c]` or `[batch,w,h,c]` input to `[batch, input_len]`.
fn to_batch_rows(
    config: &ModelConfig,
    tape: &mut Tape,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    let (w, h, c) = config.input_shape;
    let expected = [w, h, c];
    match x.shape() {
        s if s == expected => tape.reshape(x, vec![1, config.input_len()]),
        [b, xw, xh, xc] if [*xw, *xh, *xc] == expected => {
            tape.reshape(x, vec![*b, config.input_len()])
        }
        _ => Err(TensorError::ShapeMismatch {
            op: "backbone_forward",
            lhs: x.shape().to_vec(),
            rhs: expected.to_vec(),
        }),
    }
}

fn backbone_forward_impl(
    config: &ModelConfig,
    params: &ParamStore,
    tape: &mut Tape,
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut h = to_batch_rows(config, tape, x)?;
    for (w_name, b_name) in config.backbone_param_names() {
        let weight = tape.param(&w_name, params.get(&w_name).expect("validated"));
        let bias = tape.param(&b_name, params.get(&b_name).expect("validated"));
        h = tape.matmul(&h, &weight)?;
        h = tape.add_bias(&h, &bias)?;
        h = tape.relu(&h);
    }
    Ok(h)
}

fn head_forward_impl(
    config: &ModelConfig,
    params: &ParamStore,
    tape: &mut Tape,
    j: usize,
    feature: &Tensor,
) -> Result<Tensor, TensorError> {
    let feature = match feature.shape() {
        [n] if *n == config.feature_len => tape.reshape(feature, vec![1, *n])?,
        [_, n] if *n == config.feature_len => feature.clone(),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "head_forward",
                lhs: feature.shape().to_vec(),
                rhs: vec![config.feature_len],
            })
        }
    };
    let names = config.head_param_names(j);
    let (w0, b0) = &names[0];
    let (w1, b1) = &names[1];

    let weight = tape.param(w0, params.get(w0).expect("validated"));
    let bias = tape.param(b0, params.get(b0).expect("validated"));
    let mut h = tape.matmul(&feature, &weight)?;
    h = tape.add_bias(&h, &bias)?;
    h = tape.relu(&h);

    let weight = tape.param(w1, params.get(w1).expect("validated"));
    let bias = tape.param(b1, params.get(b1).expect("validated"));
    let mut z = tape.matmul(&h, &weight)?;
    z = tape.add_bias(&z, &bias)?;
    Ok(z)
}

/// Row-major flattening of any tensor into a plain `f32` sequence.
pub fn flatten_feature(t: &Tensor) -> Vec<f32> {
    t.data().to_vec()
}

// ── Checkpoint container ─────────────────────────────────────────────

fn write_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ParamStore,
) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = canonical::to_canonical_json(config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore), ModelError> {
    let mut cursor = Cursor::new(bytes);
    let magic = cursor.take_array::<4>()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(cursor.take_array::<2>()?);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let cfg_len = u32::from_le_bytes(cursor.take_array::<4>()?) as usize;
    let cfg_bytes = cursor.take(cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)?;

    let mut params = ParamStore::new();
    while !cursor.done() {
        let name_len = u16::from_le_bytes(cursor.take_array::<2>()?) as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Corrupt("parameter name is not UTF-8".into()))?;
        let ndims = cursor.take_array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u32::from_le_bytes(cursor.take_array::<4>()?) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f32::from_le_bytes(cursor.take_array::<4>()?));
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((config, params))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "truncated at offset {} (wanted {n} bytes)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        let slice = self.take(N)?;
        let mut arr = [0u8; N];
        arr.copy_from_slice(slice);
        Ok(arr)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
