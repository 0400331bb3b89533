//! Losses, Adam, freeze masks, the experiment runner, and the experiment matrix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{schedule_lambda, LambdaScheduler};
use crate::batchnorm::{tap_activations, tt_partition, EvalStats, StatsMode};
use crate::datagen::{
    augment, derive_seed, training_pool, AugmentConfig, BatchComposer, BatchItem, ClassLabel, DomainDataset, DomainLabel, ImageRef, Phase, Split,
};
use crate::diagnostics::{layer_divergence, ActivationTrace, DivergenceProfile};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ParamId, ParamStore};
use crate::metrics::{aggregate_views, pr_auc, report, MetricsReport, ScoredBreast, ViewScore};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

// ----- losses ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta_reg: f64,
    pub dat_enabled: bool,
}

/// Predictions of the three classification heads plus the saliency map.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub y_global: Var,
    pub y_local: Var,
    pub y_fusion: Var,
    pub saliency: Var,
}

/// Σ over classes of batch-mean BCE for each head, plus `beta`·Σ over classes
/// of the pixel-mean |saliency|. `targets` is row-major `N×C`.
pub fn classification_loss(g: &mut Graph, heads: &Heads, targets: &[f64], beta: f64) -> Result<Var> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta_reg must be non-negative, got {beta}")));
    }
    let classes = *g.shape(heads.y_fusion).get(1).ok_or_else(|| Error::shape("classification_loss", "heads must be N×C"))?;
    for head in [heads.y_global, heads.y_local, heads.y_fusion] {
        if g.shape(head) != g.shape(heads.y_fusion) {
            return Err(Error::shape("classification_loss", format!("head shapes {:?} vs {:?}", g.shape(head), g.shape(heads.y_fusion))));
        }
    }
    if g.shape(heads.saliency).get(..2) != g.shape(heads.y_fusion).get(..2) {
        return Err(Error::shape("classification_loss", format!("saliency {:?} does not match heads", g.shape(heads.saliency))));
    }
    let mut total: Option<Var> = None;
    for head in [heads.y_local, heads.y_global, heads.y_fusion] {
        let l = g.bce(head, targets)?;
        let l = g.scale(l, classes as f64);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let a = g.abs(heads.saliency);
    let m = g.mean(a);
    let reg = g.scale(m, beta * classes as f64);
    g.add(total.expect("three heads"), reg)
}

/// Mean BCE of domain probabilities against one-hot `{source, target}` rows.
pub fn domain_loss(g: &mut Graph, pred: Var, targets: &[f64]) -> Result<Var> {
    if g.shape(pred).len() != 2 || g.shape(pred)[1] != 2 {
        return Err(Error::shape("domain_loss", format!("expected N×2 predictions, got {:?}", g.shape(pred))));
    }
    for row in targets.chunks(2) {
        if !(row == [1.0, 0.0] || row == [0.0, 1.0]) {
            return Err(Error::invalid(format!("domain label {row:?} is not one-hot")));
        }
    }
    g.bce(pred, targets)
}

pub fn total_loss(g: &mut Graph, class_loss: Var, dom_loss: Option<Var>) -> Result<Var> {
    match dom_loss {
        Some(d) => g.add(class_loss, d),
        None => Ok(class_loss),
    }
}

// ----- optimizer -------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Per-parameter Adam moments; step counts advance only for parameters that received a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: HashMap<ParamId, Moments>,
}

pub fn adam_step(params: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], state: &mut AdamState, lr: f64) -> Result<()> {
    for (id, g) in grads {
        let p = params.get_mut(*id);
        if !p.value.requires_grad() {
            continue;
        }
        if g.len() != p.value.numel() {
            return Err(Error::shape("adam_step", format!("{} grads for {} values of {}", g.len(), p.value.numel(), p.name)));
        }
        let st = state.moments.entry(*id).or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
        st.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(st.t);
        let c2 = 1.0 - ADAM_BETA2.powi(st.t);
        for (((w, &gi), m), v) in p.value.data_mut().iter_mut().zip(g).zip(&mut st.m).zip(&mut st.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Which parameters train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMask {
    #[default]
    Full,
    /// Convolution weights and biases frozen; BN affine parameters and linear layers train.
    Bnfc,
}

impl FreezeMask {
    pub fn apply(self, params: &mut ParamStore) {
        for (_, p) in params.iter_mut() {
            let trainable = match self {
                FreezeMask::Full => true,
                FreezeMask::Bnfc => !p.kind.is_conv(),
            };
            p.value.set_requires_grad(trainable);
        }
    }
}

/// Log10 bounds of the random hyperparameter search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub log10_lr: (f64, f64),
    pub log10_beta: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace { log10_lr: (-5.5, -4.0), log10_beta: (-5.5, -3.5) }
    }
}

/// Log-uniform `(lr, beta_reg)`.
pub fn sample_hyperparams<R: Rng + ?Sized>(rng: &mut R, space: &SearchSpace) -> (f64, f64) {
    let draw = |rng: &mut R, (lo, hi): (f64, f64)| 10f64.powf(rng.random_range(lo..=hi));
    let lr = draw(rng, space.log10_lr);
    (lr, draw(rng, space.log10_beta))
}

// ----- data registry ---------------------------------------------------------

/// Loaded domains plus their preprocessed network inputs.
pub struct Registry {
    pub datasets: Vec<DomainDataset>,
    pub inputs: Vec<Vec<Tensor>>,
}

impl Registry {
    pub fn new(datasets: Vec<DomainDataset>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, d) in datasets.iter().enumerate() {
            if seen.insert(d.name().to_string(), i).is_some() {
                return Err(Error::Data(format!("domain {} registered twice", d.name())));
            }
            d.validate()?;
        }
        let inputs = datasets.iter().map(|d| d.prepared(d.image_size)).collect::<Result<_>>()?;
        Ok(Registry { datasets, inputs })
    }

    /// Every subdirectory of `dir` holding a dataset manifest, in name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut dirs: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read data directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(crate::datagen::MANIFEST_FILE).is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Data(format!("no datasets under {}", dir.display())));
        }
        Registry::new(dirs.iter().map(|d| DomainDataset::load(d)).collect::<Result<_>>()?)
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d.name() == name)
            .ok_or_else(|| Error::Data(format!("dataset {name:?} is not registered")))
    }

    pub fn names(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.name().to_string()).collect()
    }

    fn input(&self, r: ImageRef) -> &Tensor {
        &self.inputs[r.dataset][r.record]
    }
}

/// Stacks `1×H×W` images into `N×1×H×W`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for t in images {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

// ----- evaluation ------------------------------------------------------------

/// Worker count from `BNSHIFT_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("BNSHIFT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Batch size of frozen-statistics inference; results do not depend on it.
const TR_EVAL_BATCH: usize = 32;

/// Malignant scores for `records` of one dataset. Under TT statistics the
/// records are cut into consecutive batches in the given order, or in a
/// seeded shuffle when `shuffle` is set.
pub fn score_records(model: &Model, reg: &Registry, dataset: usize, records: &[usize], stats: EvalStats, shuffle: Option<u64>) -> Result<Vec<ViewScore>> {
    let mut order = records.to_vec();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut model = model.clone();
    model.set_eval(stats);
    let batches = match stats {
        EvalStats::Tr => tt_partition(order.len(), TR_EVAL_BATCH),
        EvalStats::Tt(b) => tt_partition(order.len(), b),
    };
    let threads = thread_count().min(batches.len()).max(1);
    let run = |chunk: &[std::ops::Range<usize>]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for range in chunk {
            let imgs: Vec<&Tensor> = order[range.clone()].iter().map(|&i| &reg.inputs[dataset][i]).collect();
            out.extend(model.predict(&stack(&imgs)?)?.malignant());
        }
        Ok(out)
    };
    let per = batches.len().div_ceil(threads);
    let scores: Vec<f64> = if threads == 1 {
        run(&batches)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = batches.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let ds = &reg.datasets[dataset];
    Ok(order
        .iter()
        .zip(scores)
        .map(|(&i, score)| {
            let r = &ds.records[i];
            ViewScore { patient_id: r.patient_id, study_id: r.study_id, side: r.side, view: r.view, score, label: r.label.is_malignant() as u8 }
        })
        .collect())
}

/// Breast-level malignant PR-AUC on the validation split of `datasets`, tr statistics.
fn validation_pr_auc(model: &Model, reg: &Registry, datasets: &[usize]) -> Result<f64> {
    let mut breasts = Vec::new();
    for &d in datasets {
        breasts.extend(breast_scores(model, reg, d, Split::Val, EvalStats::Tr, None)?);
    }
    let scores: Vec<f64> = breasts.iter().map(ScoredBreast::score).collect();
    let labels: Vec<u8> = breasts.iter().map(|b| b.label).collect();
    pr_auc(&scores, &labels)
}

pub fn breast_scores(model: &Model, reg: &Registry, dataset: usize, split: Split, stats: EvalStats, shuffle: Option<u64>) -> Result<Vec<ScoredBreast>> {
    let idx = reg.datasets[dataset].indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("dataset {} has no {split:?} records", reg.datasets[dataset].name())));
    }
    aggregate_views(&score_records(model, reg, dataset, &idx, stats, shuffle)?)
}

/// One evaluation line of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub experiment: String,
    pub dataset: String,
    pub stats: EvalStats,
    pub report: MetricsReport,
}

/// What to score and how.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub stats: EvalStats,
    /// Bootstrap resamples for the ROC-AUC interval; 0 skips it.
    pub resamples: usize,
    pub seed: u64,
    /// Shuffle seed for the record order before TT batching.
    pub shuffle: Option<u64>,
}

impl EvalOptions {
    pub fn test(stats: EvalStats, resamples: usize, seed: u64) -> Self {
        EvalOptions { split: Split::Test, stats, resamples, seed, shuffle: None }
    }
}

/// Breast-level metrics of `model` on one split of `dataset`.
pub fn evaluate(model: &Model, reg: &Registry, dataset: usize, experiment: &str, opts: &EvalOptions) -> Result<EvalRow> {
    let breasts = breast_scores(model, reg, dataset, opts.split, opts.stats, opts.shuffle)?;
    let report = if opts.resamples == 0 {
        let scores: Vec<f64> = breasts.iter().map(ScoredBreast::score).collect();
        let labels: Vec<u8> = breasts.iter().map(|b| b.label).collect();
        MetricsReport {
            experiment: experiment.to_string(),
            n_breasts: breasts.len(),
            roc_auc: crate::metrics::roc_auc(&scores, &labels)?,
            roc_ci: (f64::NAN, f64::NAN),
            pr_auc: pr_auc(&scores, &labels)?,
            pr_ci: (f64::NAN, f64::NAN),
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, dataset as u64));
        report(experiment, &breasts, opts.resamples, &mut rng)?
    };
    Ok(EvalRow { experiment: experiment.to_string(), dataset: reg.datasets[dataset].name().to_string(), stats: opts.stats, report })
}

pub const METRICS_HEADER: &str = "experiment,dataset,stats_mode,roc_auc,pr_auc,ci_low,ci_high";

fn fmt_ci(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.9}")
    }
}

pub fn metrics_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.9},{:.9},{},{}",
            r.experiment,
            r.dataset,
            r.stats,
            r.report.roc_auc,
            r.report.pr_auc,
            fmt_ci(r.report.roc_ci.0),
            fmt_ci(r.report.roc_ci.1)
        );
    }
    s
}

// ----- diagnostics -----------------------------------------------------------

pub const DIAGNOSTIC_BATCH: usize = 16;

/// A seeded batch of `size` training images of one dataset, benign,
/// malignant, and negative in a 1:1:2 ratio. `size` must be a multiple of 4.
pub fn diagnostic_batch(reg: &Registry, dataset: usize, size: usize, seed: u64) -> Result<Tensor> {
    if size == 0 || size % 4 != 0 {
        return Err(Error::invalid(format!("diagnostic batch size must be a positive multiple of 4, got {size}")));
    }
    let ds = &reg.datasets[dataset];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for (class, n) in [(ClassLabel::Benign, size / 4), (ClassLabel::Malignant, size / 4), (ClassLabel::Negative, size / 2)] {
        let mut idx: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].split == Split::Train && ds.records[i].label == class).collect();
        if idx.len() < n {
            return Err(Error::Data(format!("{} has {} {class:?} training images, need {n}", ds.name(), idx.len())));
        }
        idx.shuffle(&mut rng);
        picks.extend(idx[..n].iter().map(|&i| &reg.inputs[dataset][i]));
    }
    stack(&picks)
}

/// BN-output divergence between two statistics regimes on the same batch.
pub fn stats_divergence(model: &Model, batch: &Tensor, a: EvalStats, b: EvalStats, bins: usize) -> Result<(DivergenceProfile, ActivationTrace, ActivationTrace)> {
    let trace = |stats| {
        let mut m = model.clone();
        m.set_eval(stats);
        tap_activations(&m, batch)
    };
    let (ta, tb) = (trace(a)?, trace(b)?);
    Ok((layer_divergence(&ta, &tb, bins)?, ta, tb))
}

// ----- experiments -----------------------------------------------------------

fn default_epochs() -> usize {
    15
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta() -> f64 {
    1e-4
}

fn default_stats() -> Vec<EvalStats> {
    vec![EvalStats::Tr]
}

fn default_resamples() -> usize {
    crate::metrics::DEFAULT_RESAMPLES
}

/// One training run and its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Source domains whose labelled training split is used.
    pub source: Vec<String>,
    /// Domain whose unlabelled training images feed the domain classifier.
    #[serde(default)]
    pub target: Option<String>,
    /// Statistics regimes for the final evaluation.
    #[serde(default = "default_stats")]
    pub stats: Vec<EvalStats>,
    #[serde(default)]
    pub freeze: FreezeMask,
    #[serde(default)]
    pub dat: bool,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta")]
    pub beta_reg: f64,
    /// Model to fine-tune: a checkpoint path, or an earlier experiment of the same matrix.
    #[serde(default)]
    pub init: Option<String>,
    /// Defaults to one pass over the pooled source training images.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub lambda: LambdaScheduler,
    /// Domains to evaluate; every registered domain when absent.
    #[serde(default)]
    pub eval_on: Option<Vec<String>>,
    #[serde(default = "default_resamples")]
    pub bootstrap: usize,
    #[serde(default)]
    pub model: ModelConfig,
}

impl ExperimentSpec {
    pub fn new(name: &str, source: &[&str]) -> Self {
        ExperimentSpec {
            name: name.into(),
            source: source.iter().map(|s| s.to_string()).collect(),
            target: None,
            stats: default_stats(),
            freeze: FreezeMask::Full,
            dat: false,
            epochs: default_epochs(),
            seed: 0,
            lr: default_lr(),
            beta_reg: default_beta(),
            init: None,
            batches_per_epoch: None,
            augment: None,
            lambda: LambdaScheduler::default(),
            eval_on: None,
            bootstrap: default_resamples(),
            model: ModelConfig::default(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '\n', '/']) {
            return Err(Error::Config(format!("experiment name {:?} must be non-empty without ',', '/' or newlines", self.name)));
        }
        if self.source.is_empty() {
            return Err(Error::Config(format!("{}: at least one source domain is required", self.name)));
        }
        if self.dat && self.target.is_none() {
            return Err(Error::Config(format!("{}: adversarial training needs a target domain", self.name)));
        }
        if self.stats.is_empty() {
            return Err(Error::Config(format!("{}: at least one statistics regime is required", self.name)));
        }
        for s in &self.stats {
            if let EvalStats::Tt(b) = s {
                if *b < 2 {
                    return Err(Error::Config(format!("{}: TT batch size must be at least 2", self.name)));
                }
                if *b != 8 && *b != 64 {
                    warn!("{}: TT batch size {b} differs from the usual 8 or 64", self.name);
                }
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.beta_reg >= 0.0 && self.beta_reg.is_finite()) {
            return Err(Error::Config(format!("{}: lr must be positive and beta_reg non-negative", self.name)));
        }
        LambdaScheduler::new(self.lambda.tau_max, self.lambda.gamma_rate)?;
        if self.bootstrap > 0 && self.bootstrap < 10 {
            return Err(Error::Config(format!("{}: bootstrap needs at least 10 resamples or 0 to disable", self.name)));
        }
        self.model.validate()
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("spec serializes");
        sha256_hex(text.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches; NaN for the initial model.
    pub loss: f64,
    pub val_pr_auc: f64,
    /// Gradient reversal weight used during the epoch; 0 without adversarial training.
    pub lambda: f64,
}

/// Model selection outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub best_epoch: usize,
    pub best_val_pr_auc: f64,
}

pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    /// The selected (best validation) model.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub rows: Vec<EvalRow>,
}

fn one_hot_domains(items: &[BatchItem]) -> Vec<f64> {
    items
        .iter()
        .flat_map(|i| match i.domain {
            DomainLabel::Source => [1.0, 0.0],
            DomainLabel::Target => [0.0, 1.0],
        })
        .collect()
}

/// Forward, loss, backward, and Adam step on one composed batch. Source
/// images come first; in adversarial batches the target images share the
/// forward pass (and so the BN batch statistics) but are masked out of the
/// classification loss.
fn train_step(
    model: &mut Model,
    reg: &Registry,
    items: &[BatchItem],
    lambda: Option<f64>,
    spec: &ExperimentSpec,
    aug_rng: &mut ChaCha8Rng,
    adam: &mut AdamState,
) -> Result<f64> {
    let mut ordered: Vec<&BatchItem> = items.iter().filter(|i| i.domain == DomainLabel::Source).collect();
    let ns = ordered.len();
    ordered.extend(items.iter().filter(|i| i.domain == DomainLabel::Target));
    let imgs = ordered
        .iter()
        .map(|i| match &spec.augment {
            Some(cfg) => augment(reg.input(i.image), cfg, aug_rng),
            None => Ok(reg.input(i.image).clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let x = stack(&imgs.iter().collect::<Vec<_>>())?;
    let class_targets: Vec<f64> = ordered[..ns].iter().flat_map(|i| i.label.targets()).collect();

    model.set_mode(StatsMode::Train, None)?;
    let (net, mut sess) = model.session();
    let xv = sess.graph.constant(x);
    let out = net.forward(&mut sess, xv)?;
    let heads = if ns == ordered.len() {
        Heads { y_global: out.y_global, y_local: out.y_local, y_fusion: out.y_fusion, saliency: out.saliency }
    } else {
        let g = &mut sess.graph;
        Heads {
            y_global: g.slice_rows(out.y_global, 0, ns)?,
            y_local: g.slice_rows(out.y_local, 0, ns)?,
            y_fusion: g.slice_rows(out.y_fusion, 0, ns)?,
            saliency: g.slice_rows(out.saliency, 0, ns)?,
        }
    };
    let lc = classification_loss(&mut sess.graph, &heads, &class_targets, spec.beta_reg)?;
    let ld = match lambda {
        Some(lam) => {
            let pd = net.domain.forward(&mut sess, out.fused, lam)?;
            let targets = one_hot_domains(&ordered.iter().map(|i| (*i).clone()).collect::<Vec<_>>());
            Some(domain_loss(&mut sess.graph, pd, &targets)?)
        }
        None => None,
    };
    let loss = total_loss(&mut sess.graph, lc, ld)?;
    let value = sess.graph.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("{}: non-finite loss {value}", spec.name)));
    }
    sess.graph.backward(loss)?;
    let grads = sess.param_grads();
    drop(sess);
    if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged(format!("{}: non-finite gradient", spec.name)));
    }
    adam_step(&mut model.params, &grads, adam, spec.lr)?;
    Ok(value)
}

/// Trains per `spec` starting from `init` (or a fresh model), keeps the epoch
/// with the best validation PR-AUC, and evaluates it on every test split.
pub fn run_experiment(spec: &ExperimentSpec, reg: &Registry, init: Option<&Model>) -> Result<ExperimentResult> {
    spec.validate()?;
    let sources: Vec<usize> = spec.source.iter().map(|s| reg.index(s)).collect::<Result<_>>()?;
    let target = spec.target.as_deref().map(|t| reg.index(t)).transpose()?;
    let eval_on: Vec<usize> = match &spec.eval_on {
        Some(names) => names.iter().map(|n| reg.index(n)).collect::<Result<_>>()?,
        None => (0..reg.datasets.len()).collect(),
    };
    let mut model = match init {
        Some(m) => m.clone(),
        None => Model::new(spec.model.clone(), spec.seed)?,
    };
    for &d in sources.iter().chain(&target).chain(&eval_on) {
        if reg.datasets[d].image_size != model.config.input_size {
            return Err(Error::Data(format!(
                "dataset {} has {}px images, model expects {}px",
                reg.datasets[d].name(),
                reg.datasets[d].image_size,
                model.config.input_size
            )));
        }
    }
    spec.freeze.apply(&mut model.params);

    let source_refs: Vec<&DomainDataset> = sources.iter().map(|&i| &reg.datasets[i]).collect();
    let pool: Vec<_> = training_pool(&source_refs)
        .into_iter()
        .map(|(r, c)| (ImageRef { dataset: sources[r.dataset], record: r.record }, c))
        .collect();
    let target_pool: Vec<ImageRef> = target
        .map(|t| reg.datasets[t].indices(Split::Train).into_iter().map(|record| ImageRef { dataset: t, record }).collect())
        .unwrap_or_default();
    let batches = spec.batches_per_epoch.unwrap_or(pool.len().div_ceil(8)).max(1);
    let mut composer = BatchComposer::new(pool, target_pool, derive_seed(spec.seed, 1))?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let mut adam = AdamState::default();

    let val0 = validation_pr_auc(&model, reg, &sources)?;
    let mut history = vec![EpochLog { epoch: 0, loss: f64::NAN, val_pr_auc: val0, lambda: 0.0 }];
    let mut best = (0, val0, model.clone());
    info!("{}: initial validation PR-AUC {val0:.4}", spec.name);
    for epoch in 1..=spec.epochs {
        let lambda = if spec.dat { Some(schedule_lambda((epoch - 1) as f64 / spec.epochs as f64, &spec.lambda)?) } else { None };
        let phase = if spec.dat { Phase::Adversarial } else { Phase::Classification };
        let mut loss_sum = 0.0;
        for _ in 0..batches {
            let items = composer.compose(phase)?;
            loss_sum += train_step(&mut model, reg, &items, lambda, spec, &mut aug_rng, &mut adam)?;
        }
        let val = validation_pr_auc(&model, reg, &sources)?;
        let loss = loss_sum / batches as f64;
        info!("{}: epoch {epoch}/{} loss {loss:.4} val PR-AUC {val:.4}", spec.name, spec.epochs);
        history.push(EpochLog { epoch, loss, val_pr_auc: val, lambda: lambda.unwrap_or(0.0) });
        if val > best.1 {
            best = (epoch, val, model.clone());
        }
    }
    let (best_epoch, _, mut model) = best;
    // Selected models are handed on for further fine-tuning with everything trainable.
    FreezeMask::Full.apply(&mut model.params);
    let mut rows = Vec::new();
    for &stats in &spec.stats {
        for &d in &eval_on {
            rows.push(evaluate(&model, reg, d, &spec.name, &EvalOptions::test(stats, spec.bootstrap, spec.seed))?);
        }
    }
    Ok(ExperimentResult { spec: spec.clone(), model, best_epoch, history, rows })
}

pub fn history_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,val_pr_auc,lambda\n");
    for h in history {
        let loss = if h.loss.is_nan() { String::new() } else { format!("{:.9}", h.loss) };
        let _ = writeln!(s, "{},{loss},{:.9},{:.12}", h.epoch, h.val_pr_auc, h.lambda);
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance sidecar written next to every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    pub fn new(seed: u64, config_digest: String) -> Self {
        Provenance { tool_version: env!("CARGO_PKG_VERSION").to_string(), seed, config_digest }
    }
}

/// Writes `contents` to `path` and its provenance to `path.meta.json`.
pub fn write_with_provenance(path: &Path, contents: &[u8], prov: &Provenance) -> Result<()> {
    fs::write(path, contents)?;
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta.json");
    fs::write(meta, serde_json::to_string_pretty(prov)? + "\n")?;
    Ok(())
}

impl ExperimentResult {
    /// `metrics.csv`, `history.csv`, and `model.bnck`, each with a provenance sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let prov = Provenance::new(self.spec.seed, self.spec.digest());
        write_with_provenance(&dir.join("metrics.csv"), metrics_csv(&self.rows).as_bytes(), &prov)?;
        write_with_provenance(&dir.join("history.csv"), history_csv(&self.history).as_bytes(), &prov)?;
        write_with_provenance(&dir.join("model.bnck"), &self.model.to_checkpoint_bytes(), &prov)?;
        let summary = RunSummary {
            experiment: self.spec.name.clone(),
            best_epoch: self.best_epoch,
            best_val_pr_auc: self.history[self.best_epoch].val_pr_auc,
        };
        write_with_provenance(&dir.join("summary.json"), (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(), &prov)?;
        Ok(())
    }
}

// ----- matrix ----------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    /// Added to every experiment's own seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, rename = "experiment")]
    pub experiments: Vec<ExperimentSpec>,
}

impl MatrixConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let m: MatrixConfig = toml::from_str(s)?;
        let mut names = std::collections::HashSet::new();
        for e in &m.experiments {
            e.validate()?;
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("experiment {} defined twice", e.name)));
            }
        }
        Ok(m)
    }

    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("matrix serializes");
        sha256_hex(text.as_bytes())
    }
}

pub struct MatrixResult {
    pub results: Vec<ExperimentResult>,
    pub domains: Vec<String>,
}

/// Runs experiments in order. `init` names an earlier experiment of the
/// matrix or else a checkpoint path.
pub fn run_matrix(cfg: &MatrixConfig, reg: &Registry) -> Result<MatrixResult> {
    let mut results: Vec<ExperimentResult> = Vec::new();
    for spec in &cfg.experiments {
        let mut spec = spec.clone();
        spec.seed = spec.seed.wrapping_add(cfg.seed);
        let loaded;
        let init = match spec.init.as_deref() {
            None => None,
            Some(name) => match results.iter().find(|r| r.spec.name == name) {
                Some(r) => Some(&r.model),
                None => {
                    loaded = Model::load(Path::new(name))
                        .map_err(|e| Error::Config(format!("{}: init {name:?} is neither an earlier experiment nor a checkpoint: {e}", spec.name)))?;
                    Some(&loaded)
                }
            },
        };
        info!("matrix: running {}", spec.name);
        let r = run_experiment(&spec, reg, init).map_err(|e| match e {
            Error::Diverged(m) => Error::Diverged(format!("experiment {}: {m}", spec.name)),
            other => Error::Data(format!("experiment {} failed: {other}", spec.name)),
        })?;
        results.push(r);
    }
    Ok(MatrixResult { results, domains: reg.names() })
}

impl MatrixResult {
    /// One row per (experiment, stats) with ROC/PR AUC columns per domain; blank where not evaluated.
    pub fn consolidated_csv(&self) -> String {
        let mut s = String::from("model,stats");
        for d in &self.domains {
            let _ = write!(s, ",{d}_roc_auc,{d}_pr_auc");
        }
        s.push('\n');
        for r in &self.results {
            for stats in &r.spec.stats {
                let _ = write!(s, "{},{stats}", r.spec.name);
                for d in &self.domains {
                    match r.rows.iter().find(|row| row.stats == *stats && &row.dataset == d) {
                        Some(row) => {
                            let _ = write!(s, ",{:.6},{:.6}", row.report.roc_auc, row.report.pr_auc);
                        }
                        None => s.push_str(",,"),
                    }
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, cfg: &MatrixConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let prov = Provenance::new(cfg.seed, cfg.digest());
        write_with_provenance(&dir.join("matrix.csv"), self.consolidated_csv().as_bytes(), &prov)?;
        for r in &self.results {
            r.write(&dir.join(&r.spec.name))?;
        }
        Ok(())
    }
}
