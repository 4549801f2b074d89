//! Named parameter storage and the small set of layers the models are built from.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{config_err, input_err, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Parameter-group tag. Denoiser parameters must carry one of the two
/// non-`Untagged` variants so the trainable subset can be derived from tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Untagged,
    CrossAttention,
    Backbone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub tag: Tag,
}

/// Flat, ordered, uniquely named collection of every model parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, tag: Tag) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(config_err!("duplicate parameter name {}", name));
        }
        self.entries.push(ParamEntry { name: name.to_string(), value, tag });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tag(&self, id: ParamId) -> Tag {
        self.entries[id.0].tag
    }

    pub fn set_tag(&mut self, id: ParamId, tag: Tag) {
        self.entries[id.0].tag = tag;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Parameters whose name starts with `prefix` followed by `.`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| {
                let n = self.name(id);
                n.len() > prefix.len() && n.starts_with(prefix) && n.as_bytes()[prefix.len()] == b'.'
            })
            .collect()
    }

    /// Boolean mask over all ids, set for members of `ids`.
    pub fn mask(&self, ids: &[ParamId]) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for id in ids {
            m[id.0] = true;
        }
        m
    }

    /// Overwrite a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(input_err!(
                "parameter {} expects shape {:?}, got {:?}",
                self.name(id),
                self.get(id).shape(),
                value.shape()
            ));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn zero(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| std * rng::normal(rng)).collect()).expect("init shape")
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        tag: Tag,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt(in_dim as f64);
        let weight = store.add(&alloc::format!("{name}.weight"), normal_tensor(&[in_dim, out_dim], std, rng), tag)?;
        let bias = if bias {
            Some(store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[out_dim]), tag)?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    /// Applies to `[n, in]` rows or a single `[in]` vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let is_vec = shape.len() == 1;
        let last = *shape.last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(config_err!("linear expects input dim {}, got {:?}", self.in_dim, shape));
        }
        let x2 = if is_vec { g.reshape(x, &[1, self.in_dim])? } else { x };
        let w = g.param(self.weight, store.get(self.weight));
        let mut y = g.matmul(x2, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b, store.get(b));
            y = g.add_row(y, b)?;
        }
        if is_vec {
            y = g.reshape(y, &[self.out_dim])?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Multi-layer perceptron with an activation and dropout between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

/// Shape of an [`Mlp`]: `dims[0] → dims[1] → … → dims[last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub bias: bool,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &MlpConfig, tag: Tag, rng: &mut Rng) -> Result<Self> {
        if cfg.dims.len() < 2 {
            return Err(config_err!("{} needs at least one layer", name));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", cfg.dropout));
        }
        let layers = cfg
            .dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &alloc::format!("{name}.{i}"), w[0], w[1], cfg.bias, tag, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation: cfg.activation, dropout: cfg.dropout })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = g.act(h, self.activation);
                h = g.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    /// Set every weight to the (rectangular) identity and every bias to zero.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for l in &self.layers {
            let w = store.get_mut(l.weight);
            w.data_mut().fill(0.0);
            for i in 0..l.in_dim.min(l.out_dim) {
                w.data_mut()[i * l.out_dim + i] = 1.0;
            }
            if let Some(b) = l.bias {
                store.get_mut(b).data_mut().fill(0.0);
            }
        }
    }
}

/// Square-kernel 2-D convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        tag: Tag,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt((in_ch * kernel * kernel) as f64);
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            normal_tensor(&[out_ch, in_ch, kernel, kernel], std, rng),
            tag,
        )?;
        let bias =
            if bias { Some(store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[out_ch]), tag)?) } else { None };
        Ok(Self { weight, bias, stride, pad: kernel / 2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(self.weight, store.get(self.weight));
        let mut y = g.conv2d(x, w, self.stride, self.pad)?;
        if let Some(b) = self.bias {
            let b = g.param(b, store.get(b));
            y = g.add_channel(y, b)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Affine normalisation (group norm over `[C,H,W]` or layer norm over rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, groups: usize, tag: Tag) -> Result<Self> {
        let gamma = store.add(&alloc::format!("{name}.gamma"), Tensor::full(&[dim], 1.0), tag)?;
        let beta = store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[dim]), tag)?;
        Ok(Self { gamma, beta, groups })
    }

    pub fn group(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma, store.get(self.gamma));
        let bt = g.param(self.beta, store.get(self.beta));
        g.group_norm(x, gm, bt, self.groups)
    }

    pub fn layer(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma, store.get(self.gamma));
        let bt = g.param(self.beta, store.get(self.beta));
        g.layer_norm(x, gm, bt)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Sinusoidal embedding of a scalar position (timestep or token index).
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half.max(1) as f64);
        out[i] = libm::sin(position * freq);
        out[half + i] = libm::cos(position * freq);
    }
    out
}
