//! Parameter storage, forward sessions, and the convolution / fully connected layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batchnorm::BnStore;
use crate::diagnostics::TraceEntry;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_conv(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::ConvBias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value: value.with_requires_grad(true) });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

enum BnAccess<'m> {
    Exclusive(&'m mut BnStore),
    Shared(&'m BnStore),
}

/// One forward pass: the graph under construction plus the model state it reads.
///
/// Parameters are bound lazily as graph leaves; trainable ones collect gradients.
pub struct Session<'m> {
    pub graph: Graph,
    params: &'m ParamStore,
    bn: BnAccess<'m>,
    bound: Vec<Option<Var>>,
    update_running: bool,
    taps: Option<Vec<TraceEntry>>,
}

impl<'m> Session<'m> {
    /// Session that may update BN running statistics in TRAIN mode.
    pub fn new(params: &'m ParamStore, bn: &'m mut BnStore) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bn: BnAccess::Exclusive(bn),
            bound: vec![None; params.len()],
            update_running: true,
            taps: None,
        }
    }

    /// Session that never mutates model state.
    pub fn read_only(params: &'m ParamStore, bn: &'m BnStore) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bn: BnAccess::Shared(bn),
            bound: vec![None; params.len()],
            update_running: false,
            taps: None,
        }
    }

    /// Disables running-statistic updates even in TRAIN mode.
    pub fn freeze_running_stats(mut self) -> Self {
        self.update_running = false;
        self
    }

    pub fn with_taps(mut self) -> Self {
        self.taps = Some(Vec::new());
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.params.get(id).value;
        let v = self.graph.leaf(p.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bn_store(&self) -> &BnStore {
        match &self.bn {
            BnAccess::Exclusive(b) => b,
            BnAccess::Shared(b) => b,
        }
    }

    pub(crate) fn bn_store_mut(&mut self) -> Option<&mut BnStore> {
        match &mut self.bn {
            BnAccess::Exclusive(b) => Some(b),
            BnAccess::Shared(_) => None,
        }
    }

    pub(crate) fn updates_running(&self) -> bool {
        self.update_running
    }

    pub(crate) fn record_tap(&mut self, name: &str, depth: usize, v: Var) {
        if let Some(taps) = self.taps.as_mut() {
            taps.push(TraceEntry { name: name.to_string(), depth, output: self.graph.tensor(v) });
        }
    }

    pub fn take_taps(&mut self) -> Vec<TraceEntry> {
        self.taps.take().unwrap_or_default()
    }

    /// Gradients of every bound parameter that collected one, after `graph.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// He-uniform initialization over fan-in.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid init shape")
}

/// 2-D cross-correlation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = he_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in);
        let weight = store.add(format!("{name}.weight"), ParamKind::ConvWeight, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::ConvBias, Tensor::zeros(&[out_channels])));
        Conv2d { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = self.bias.map(|b| sess.param(b));
        sess.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let w = he_uniform(rng, &[out_features, in_features], in_features);
        let weight = store.add(format!("{name}.weight"), ParamKind::LinearWeight, w);
        let bias = store.add(format!("{name}.bias"), ParamKind::LinearBias, Tensor::zeros(&[out_features]));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = sess.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::shape("linear", format!("input {shape:?}, layer expects {} features", self.in_features)));
        }
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        sess.graph.linear(x, w, Some(b))
    }
}
