//! Batch normalization with three statistics regimes.
//!
//! * `Train`: normalize by batch moments and fold them into the running averages.
//! * `Tr`: normalize by the stored running averages.
//! * `Tt`: normalize by the moments of the inference batch, leaving stored state alone.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NormStats, Var};
use crate::diagnostics::ActivationTrace;
use crate::layers::{ParamId, ParamKind, ParamStore, Session};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    #[default]
    Train,
    Tr,
    Tt,
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatsMode::Train => "train",
            StatsMode::Tr => "tr",
            StatsMode::Tt => "tt",
        })
    }
}

impl FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(StatsMode::Train),
            "tr" => Ok(StatsMode::Tr),
            "tt" => Ok(StatsMode::Tt),
            other => Err(Error::invalid(format!("unknown stats mode {other:?}"))),
        }
    }
}

/// An evaluation statistics regime: frozen running averages, or test-time
/// batch statistics over batches of a fixed size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalStats {
    Tr,
    Tt(usize),
}

impl EvalStats {
    pub fn mode(self) -> StatsMode {
        match self {
            EvalStats::Tr => StatsMode::Tr,
            EvalStats::Tt(_) => StatsMode::Tt,
        }
    }

    pub fn tt_batch_size(self) -> Option<usize> {
        match self {
            EvalStats::Tr => None,
            EvalStats::Tt(b) => Some(b),
        }
    }
}

impl fmt::Display for EvalStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalStats::Tr => f.write_str("tr"),
            EvalStats::Tt(b) => write!(f, "tt{b}"),
        }
    }
}

impl FromStr for EvalStats {
    type Err = Error;

    /// Parses `tr`, or `tt<batch>` such as `tt8`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "tr" {
            return Ok(EvalStats::Tr);
        }
        if let Some(rest) = s.strip_prefix("tt") {
            if let Ok(b) = rest.parse::<usize>() {
                if b >= 1 {
                    return Ok(EvalStats::Tt(b));
                }
            }
        }
        Err(Error::invalid(format!("stats regime must be `tr` or `tt<batch>`, got {s:?}")))
    }
}

impl Serialize for EvalStats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EvalStats {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BnId(pub(crate) usize);

/// Non-learned state of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: StatsMode,
}

impl BnState {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BnState {
            name: name.into(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            mode: StatsMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `r <- (1 - momentum)·r + momentum·batch`, with the unbiased batch variance.
    pub fn update_running(&mut self, mean: &[f64], biased_var: &[f64], count: usize) {
        debug_assert!(count >= 2);
        let m = self.momentum;
        let correction = count as f64 / (count - 1) as f64;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(biased_var) {
            *r = ((1.0 - m) * *r + m * b * correction).max(0.0);
        }
    }
}

/// Running statistics of every BN layer of a network, in network order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStore {
    layers: Vec<BnState>,
    tt_batch_size: Option<usize>,
}

impl BnStore {
    pub fn add(&mut self, state: BnState) -> BnId {
        self.layers.push(state);
        BnId(self.layers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, id: BnId) -> &BnState {
        &self.layers[id.0]
    }

    pub fn get_mut(&mut self, id: BnId) -> &mut BnState {
        &mut self.layers[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BnState> {
        self.layers.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut BnState> {
        self.layers.iter_mut()
    }

    /// The mode shared by all layers (`Train` for an empty store).
    pub fn mode(&self) -> StatsMode {
        self.layers.first().map_or(StatsMode::Train, |l| l.mode)
    }

    pub fn tt_batch_size(&self) -> Option<usize> {
        self.tt_batch_size
    }

    /// Switches every layer to `mode`. A batch size is required for, and only for, `Tt`.
    pub fn set_mode(&mut self, mode: StatsMode, tt_batch_size: Option<usize>) -> Result<()> {
        match (mode, tt_batch_size) {
            (StatsMode::Tt, None) => return Err(Error::invalid("TT mode requires a batch size")),
            (StatsMode::Tt, Some(0)) => return Err(Error::invalid("TT batch size must be positive")),
            (StatsMode::Train | StatsMode::Tr, Some(_)) => {
                return Err(Error::invalid(format!("a TT batch size only applies to TT mode, not {mode}")))
            }
            _ => {}
        }
        for l in &mut self.layers {
            l.mode = mode;
        }
        self.tt_batch_size = tt_batch_size;
        Ok(())
    }

    pub fn set_eval(&mut self, stats: EvalStats) {
        self.set_mode(stats.mode(), stats.tt_batch_size()).expect("EvalStats is always consistent");
    }
}

/// Splits `n` samples into consecutive TT batches of `batch_size`. A final
/// partial batch of a single sample is merged into the preceding batch.
pub fn tt_partition(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut out: Vec<Range<usize>> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() < 2 && r.len() < batch_size) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = tail.end;
    }
    out
}

/// A BN layer: learnable `gamma`/`beta` in the parameter store plus running
/// statistics in the BN store.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(params: &mut ParamStore, bn: &mut BnStore, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::ones(&[channels]));
        let beta = params.add(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(&[channels]));
        let state = bn.add(BnState::new(name, channels));
        BatchNorm2d { gamma, beta, state, channels }
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        let (mode, eps) = {
            let st = sess.bn_store().get(self.state);
            (st.mode, st.eps)
        };
        let y = match mode {
            StatsMode::Train => {
                let (y, moments) = sess.graph.batch_norm(x, gamma, beta, NormStats::Batch, eps)?;
                if sess.updates_running() {
                    let m = moments.expect("batch statistics yield moments");
                    let store = sess
                        .bn_store_mut()
                        .ok_or_else(|| Error::invalid("TRAIN-mode running update needs exclusive model access"))?;
                    store.get_mut(self.state).update_running(&m.mean, &m.var, m.count);
                }
                y
            }
            StatsMode::Tt => sess.graph.batch_norm(x, gamma, beta, NormStats::Batch, eps)?.0,
            StatsMode::Tr => {
                let st = sess.bn_store().get(self.state);
                let (mean, var) = (st.running_mean.clone(), st.running_var.clone());
                sess.graph.batch_norm(x, gamma, beta, NormStats::Fixed { mean: &mean, var: &var }, eps)?.0
            }
        };
        let name = sess.bn_store().get(self.state).name.clone();
        sess.record_tap(&name, self.state.0, y);
        Ok(y)
    }
}

/// Post-BN outputs of every BN layer for `batch` under the model's current
/// mode. Running statistics are never updated.
pub fn tap_activations(model: &Model, batch: &Tensor) -> Result<ActivationTrace> {
    if model.bn.is_empty() {
        return Err(Error::invalid("model has no BN layers to tap"));
    }
    model.check_input(batch)?;
    let (net, sess) = model.session_ref();
    let mut sess = sess.with_taps();
    let x = sess.graph.constant(batch.clone());
    net.forward(&mut sess, x)?;
    Ok(ActivationTrace { entries: sess.take_taps() })
}
