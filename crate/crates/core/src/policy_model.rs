//! Fully connected policy/value network, shared by every agent of a policy
//! tag, with exact reverse-mode gradients, Adam and binary checkpoints.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{uniform, SampleKey};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward cache missing or does not match the parameters")]
    MissingCache,
    #[error("invalid policy map: {0}")]
    InvalidMap(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Layer widths of a policy network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub categories: usize,
    pub choices: usize,
}

impl PolicyDims {
    pub fn logit_width(&self) -> usize {
        self.categories * self.choices
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.obs_dim == 0 || self.categories == 0 || self.choices == 0 || self.hidden.contains(&0) {
            return Err(PolicyError::ShapeMismatch(format!("zero-sized layer in {self:?}")));
        }
        Ok(())
    }
}

/// Affine map `x · w + b`, `w` stored as `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

const INIT_SALT: u64 = 0x1f83_d9ab_fb41_bd6b;

/// Parameters of one policy: tanh hidden layers, then a logit head (all
/// categories side by side) and a scalar value head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub hidden: Vec<Layer>,
    pub logits: Layer,
    pub value: Layer,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by each hidden layer's output.
    activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, categories * choices]`
    pub logits: Array2<f64>,
    pub values: Array1<f64>,
    pub cache: ForwardCache,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Result<Self, PolicyError> {
        dims.validate()?;
        let mut fan_in = dims.obs_dim;
        let mut hidden = Vec::with_capacity(dims.hidden.len());
        for &width in &dims.hidden {
            hidden.push(Layer::zeros(fan_in, width));
            fan_in = width;
        }
        Ok(Self {
            logits: Layer::zeros(fan_in, dims.logit_width()),
            value: Layer::zeros(fan_in, 1),
            hidden,
            dims,
        })
    }

    /// Glorot-uniform weights and zero biases, a pure function of `seed`.
    pub fn init(seed: u64, dims: PolicyDims) -> Result<Self, PolicyError> {
        let mut params = Self::zeros(dims)?;
        for (layer_idx, layer) in params.layers_mut().into_iter().enumerate() {
            let (fan_in, fan_out) = layer.w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for (i, w) in layer.w.iter_mut().enumerate() {
                let u = uniform(&SampleKey::new(seed ^ INIT_SALT, layer_idx as u64, 0, i, 0, 0));
                *w = (2.0 * u - 1.0) * bound;
            }
        }
        Ok(params)
    }

    pub fn layers(&self) -> Vec<&Layer> {
        self.hidden.iter().chain([&self.logits, &self.value]).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        self.hidden
            .iter_mut()
            .chain([&mut self.logits, &mut self.value])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Every parameter in checkpoint order: per layer, weights row-major then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), PolicyError> {
        if values.len() != self.num_params() {
            return Err(PolicyError::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut rest = values;
        for layer in self.layers_mut() {
            for dst in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *dst = rest[0];
                rest = &rest[1..];
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, obs: ArrayView2<f64>) -> Result<ForwardOutput, PolicyError> {
        if obs.ncols() != self.dims.obs_dim {
            return Err(PolicyError::ShapeMismatch(format!(
                "observation width {} but network expects {}",
                obs.ncols(),
                self.dims.obs_dim
            )));
        }
        let mut activations = Vec::with_capacity(self.hidden.len() + 1);
        activations.push(obs.to_owned());
        for layer in &self.hidden {
            let h = layer.apply(&activations.last().unwrap().view()).mapv_into(f64::tanh);
            activations.push(h);
        }
        let top = activations.last().unwrap().view();
        let logits = self.logits.apply(&top);
        let values = self.value.apply(&top).index_axis_move(Axis(1), 0);
        Ok(ForwardOutput {
            logits,
            values,
            cache: ForwardCache { activations },
        })
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradients with respect to the forward outputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: ArrayView2<f64>,
        d_values: &Array1<f64>,
    ) -> Result<PolicyParams, PolicyError> {
        let widths = std::iter::once(self.dims.obs_dim).chain(self.dims.hidden.iter().copied());
        if cache.activations.len() != self.hidden.len() + 1
            || cache.activations.iter().zip(widths).any(|(a, w)| a.ncols() != w)
        {
            return Err(PolicyError::MissingCache);
        }
        let batch = cache.activations[0].nrows();
        if d_logits.dim() != (batch, self.dims.logit_width()) || d_values.len() != batch {
            return Err(PolicyError::ShapeMismatch(format!(
                "output gradients {:?}/{} for batch {batch}",
                d_logits.dim(),
                d_values.len()
            )));
        }
        let mut grads = Self::zeros(self.dims.clone())?;
        let top = cache.activations.last().unwrap();
        let d_values = d_values.view().insert_axis(Axis(1));

        grads.logits.w = top.t().dot(&d_logits);
        grads.logits.b = d_logits.sum_axis(Axis(0));
        grads.value.w = top.t().dot(&d_values);
        grads.value.b = d_values.sum_axis(Axis(0));

        let mut d_h = d_logits.dot(&self.logits.w.t()) + d_values.dot(&self.value.w.t());
        for i in (0..self.hidden.len()).rev() {
            let h = &cache.activations[i + 1];
            let d_z = d_h * &h.mapv(|v| 1.0 - v * v);
            let input = &cache.activations[i];
            grads.hidden[i].w = input.t().dot(&d_z);
            grads.hidden[i].b = d_z.sum_axis(Axis(0));
            d_h = d_z.dot(&self.hidden[i].w.t());
        }
        Ok(grads)
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &PolicyParams) -> f64 {
    grads
        .layers()
        .iter()
        .flat_map(|l| l.w.iter().chain(l.b.iter()))
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut PolicyParams, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for layer in grads.layers_mut() {
            layer.w *= scale;
            layer.b *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &PolicyParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        for (p_layer, g_layer) in params.layers_mut().into_iter().zip(grads.layers()) {
            let p_iter = p_layer.w.iter_mut().chain(p_layer.b.iter_mut());
            let g_iter = g_layer.w.iter().chain(g_layer.b.iter());
            for (p, &g) in p_iter.zip(g_iter) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// Which agents each policy tag controls. Tags keep insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyMap {
    num_agents: usize,
    groups: IndexMap<String, Vec<usize>>,
}

impl PolicyMap {
    /// `groups` must partition `0..num_agents`.
    pub fn new(
        num_agents: usize,
        groups: impl IntoIterator<Item = (String, Vec<usize>)>,
    ) -> Result<Self, PolicyError> {
        let mut owner = vec![None::<String>; num_agents];
        let mut map = IndexMap::new();
        for (tag, mut agents) in groups {
            if agents.is_empty() {
                return Err(PolicyError::InvalidMap(format!("tag {tag:?} has no agents")));
            }
            agents.sort_unstable();
            for &a in &agents {
                let slot = owner
                    .get_mut(a)
                    .ok_or_else(|| PolicyError::InvalidMap(format!("agent {a} outside 0..{num_agents}")))?;
                if let Some(prev) = slot.replace(tag.clone()) {
                    return Err(PolicyError::InvalidMap(format!("agent {a} in both {prev:?} and {tag:?}")));
                }
            }
            if map.insert(tag.clone(), agents).is_some() {
                return Err(PolicyError::InvalidMap(format!("tag {tag:?} listed twice")));
            }
        }
        if let Some(a) = owner.iter().position(Option::is_none) {
            return Err(PolicyError::InvalidMap(format!("agent {a} has no policy")));
        }
        Ok(Self { num_agents, groups: map })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn agents(&self, tag: &str) -> Option<&[usize]> {
        self.groups.get(tag).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn tag_of(&self, agent: usize) -> Option<&str> {
        self.iter().find(|(_, a)| a.binary_search(&agent).is_ok()).map(|(t, _)| t)
    }
}

const MAGIC: &[u8; 8] = b"WARPPOL\0";
const FORMAT_VERSION: u32 = 1;

/// Sidecar JSON written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tag: String,
    pub seed: u64,
    pub config_hash: String,
    pub iteration: u64,
    pub dims: PolicyDims,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), PolicyError> {
    let v = u32::try_from(v).map_err(|_| PolicyError::Checkpoint(format!("dimension {v} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl PolicyParams {
    /// Binary layout: magic, version, then little-endian u32 dims
    /// (obs_dim, hidden count, hidden widths, categories, choices), then all
    /// parameters as little-endian f64 in [`PolicyParams::flat`] order.
    pub fn to_bytes(&self) -> Result<Vec<u8>, PolicyError> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, self.dims.obs_dim)?;
        put_u32(&mut out, self.dims.hidden.len())?;
        for &h in &self.dims.hidden {
            put_u32(&mut out, h)?;
        }
        put_u32(&mut out, self.dims.categories)?;
        put_u32(&mut out, self.dims.choices)?;
        for v in self.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(PolicyError::Checkpoint("bad magic".into()));
        }
        let mut reader = io::Cursor::new(bytes);
        reader.set_position(8);
        let mut read_u32 = || -> Result<usize, PolicyError> {
            let mut buf = [0u8; 4];
            reader
                .read_exact(&mut buf)
                .map_err(|_| PolicyError::Checkpoint("truncated".into()))?;
            Ok(u32::from_le_bytes(buf) as usize)
        };
        let version = read_u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(PolicyError::Checkpoint(format!("unsupported version {version}")));
        }
        let obs_dim = read_u32()?;
        let n_hidden = read_u32()?;
        if n_hidden > 64 {
            return Err(PolicyError::Checkpoint(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden).map(|_| read_u32()).collect::<Result<Vec<_>, _>>()?;
        let categories = read_u32()?;
        let choices = read_u32()?;
        let mut params = Self::zeros(PolicyDims {
            obs_dim,
            hidden,
            categories,
            choices,
        })?;
        let offset = reader.position() as usize;
        let body = &bytes[offset..];
        if body.len() != 8 * params.num_params() {
            return Err(PolicyError::Checkpoint(format!(
                "{} parameter bytes, expected {}",
                body.len(),
                8 * params.num_params()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.set_flat(&values)?;
        Ok(params)
    }

    /// Writes `<path>` (binary) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), PolicyError> {
        fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        fs::write(meta_path(path), serde_json::to_vec_pretty(meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta), PolicyError> {
        let params = Self::from_bytes(&fs::read(path)?)?;
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(meta_path(path))?)?;
        if meta.dims != params.dims {
            return Err(PolicyError::Checkpoint("metadata dims disagree with binary header".into()));
        }
        Ok((params, meta))
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dims() -> PolicyDims {
        PolicyDims {
            obs_dim: 3,
            hidden: vec![4, 4],
            categories: 2,
            choices: 3,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = PolicyParams::zeros(dims()).unwrap();
        let out = p.forward(array![[1.0, -2.0, 0.5]].view()).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
        assert_eq!(out.values, array![0.0]);
    }

    #[test]
    fn single_unit_tanh() {
        let mut p = PolicyParams::zeros(PolicyDims {
            obs_dim: 1,
            hidden: vec![1],
            categories: 1,
            choices: 1,
        })
        .unwrap();
        p.hidden[0].w[[0, 0]] = 1.0;
        p.logits.w[[0, 0]] = 1.0;
        let out = p.forward(array![[0.5]].view()).unwrap();
        assert!((out.logits[[0, 0]] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((out.logits[[0, 0]] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = PolicyParams::init(3, dims()).unwrap();
        let b = PolicyParams::init(3, dims()).unwrap();
        let c = PolicyParams::init(4, dims()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in a.layers() {
            let (i, o) = layer.w.dim();
            let bound = (6.0 / (i + o) as f64).sqrt();
            assert!(layer.w.iter().all(|w| w.abs() <= bound));
            assert!(layer.b.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn width_mismatch_is_error() {
        let p = PolicyParams::zeros(dims()).unwrap();
        assert!(matches!(
            p.forward(array![[1.0, 2.0]].view()),
            Err(PolicyError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = PolicyParams::init(1, dims()).unwrap();
        let out = p.forward(array![[0.1, 0.2, 0.3], [0.0, -1.0, 2.0]].view()).unwrap();
        let g = p
            .backward(&out.cache, Array2::zeros((2, 6)).view(), &Array1::zeros(2))
            .unwrap();
        assert_eq!(grad_norm(&g), 0.0);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let p = PolicyParams::init(1, dims()).unwrap();
        let q = PolicyParams::init(1, PolicyDims { hidden: vec![4], ..dims() }).unwrap();
        let out = q.forward(array![[0.1, 0.2, 0.3]].view()).unwrap();
        assert!(matches!(
            p.backward(&out.cache, Array2::zeros((1, 6)).view(), &Array1::zeros(1)),
            Err(PolicyError::MissingCache)
        ));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = PolicyParams::init(9, dims()).unwrap();
        let before = clip_grad_norm(&mut g, 0.5);
        assert!(before > 0.5);
        assert!((grad_norm(&g) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bytes_round_trip() {
        let p = PolicyParams::init(5, dims()).unwrap();
        let q = PolicyParams::from_bytes(&p.to_bytes().unwrap()).unwrap();
        assert_eq!(p, q);
        let mut bad = p.to_bytes().unwrap();
        bad.pop();
        assert!(PolicyParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn policy_map_partition() {
        assert!(PolicyMap::new(3, [("a".to_string(), vec![0]), ("b".to_string(), vec![2, 1])]).is_ok());
        assert!(PolicyMap::new(3, [("a".to_string(), vec![0, 1])]).is_err());
        assert!(PolicyMap::new(2, [("a".to_string(), vec![0, 1]), ("b".to_string(), vec![1])]).is_err());
        assert!(PolicyMap::new(2, [("a".to_string(), vec![0, 1, 2])]).is_err());
        let m = PolicyMap::new(3, [("a".to_string(), vec![0]), ("b".to_string(), vec![2, 1])]).unwrap();
        assert_eq!(m.agents("b"), Some(&[1, 2][..]));
        assert_eq!(m.tag_of(2), Some("b"));
    }
}
