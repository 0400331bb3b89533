//! Gradient reversal scheduling and the domain classifier for adversarial training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Linear, ParamStore, Session};

/// `λ(p) = 2·τ_max / (1 + exp(−γ·p)) − τ_max`, i.e. `τ_max·tanh(γ·p/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaScheduler {
    pub tau_max: f64,
    pub gamma_rate: f64,
}

impl Default for LambdaScheduler {
    fn default() -> Self {
        LambdaScheduler { tau_max: 1.0, gamma_rate: 10.0 }
    }
}

impl LambdaScheduler {
    pub fn new(tau_max: f64, gamma_rate: f64) -> Result<Self> {
        if !(tau_max > 0.0 && tau_max <= 1.0) {
            return Err(Error::invalid(format!("tau_max must lie in (0, 1], got {tau_max}")));
        }
        if !(gamma_rate > 0.0 && gamma_rate.is_finite()) {
            return Err(Error::invalid(format!("gamma_rate must be positive, got {gamma_rate}")));
        }
        Ok(LambdaScheduler { tau_max, gamma_rate })
    }
}

pub fn schedule_lambda(p: f64, s: &LambdaScheduler) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("training progress must lie in [0, 1], got {p}")));
    }
    Ok(2.0 * s.tau_max / (1.0 + (-s.gamma_rate * p).exp()) - s.tau_max)
}

/// Three Linear+ReLU layers and a 2-way softmax over {source, target}.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainHead {
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl DomainHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_features: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = in_features;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{name}.fc{}", i + 1), prev, w, rng));
            prev = w;
        }
        let out = Linear::new(store, &format!("{name}.out"), prev, 2, rng);
        DomainHead { hidden, out }
    }

    pub fn in_features(&self) -> usize {
        self.hidden.first().map_or(self.out.in_features, |l| l.in_features)
    }

    /// Probabilities over {source, target}, with gradient reversal on the features.
    pub fn forward(&self, sess: &mut Session<'_>, features: Var, lambda_domain: f64) -> Result<Var> {
        let width = sess.graph.shape(features).get(1).copied();
        if width != Some(self.in_features()) {
            return Err(Error::shape(
                "domain_forward",
                format!("features {:?}, head expects {} columns", sess.graph.shape(features), self.in_features()),
            ));
        }
        let mut h = sess.graph.grl(features, lambda_domain)?;
        for layer in &self.hidden {
            let z = layer.forward(sess, h)?;
            h = sess.graph.relu(z);
        }
        let logits = self.out.forward(sess, h)?;
        Ok(sess.graph.softmax(logits))
    }
}

pub fn domain_forward(sess: &mut Session<'_>, features: Var, head: &DomainHead, lambda_domain: f64) -> Result<Var> {
    head.forward(sess, features, lambda_domain)
}
