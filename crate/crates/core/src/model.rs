//! Desk-scale global/local/fusion classifier.
//!
//! ```text
//! image ─ stem ─ residual blocks ─┬─ 1×1 conv ─ sigmoid ─ saliency ─ top-t pool ─ ŷ_global
//!                                 │                          │
//!                                 │                   patch selection
//!                                 │                          │
//!                                 │       patches ─ local convs ─ attention ─ ŷ_local
//!                                 └─ GAP ──────── concat ◄───┘
//!                                                   ├─ linear ─ sigmoid ─ ŷ_fusion
//!                                                   └─ GRL ─ domain head ─ source/target
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::DomainHead;
use crate::batchnorm::{BatchNorm2d, BnStore, EvalStats, StatsMode};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{Conv2d, Linear, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub global_channels: usize,
    pub global_blocks: usize,
    /// Fraction of saliency pixels averaged by the global head.
    pub top_t: f64,
    pub patch_count: usize,
    pub patch_size: usize,
    pub local_channels: usize,
    pub domain_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            in_channels: 1,
            stem_kernel: 5,
            global_channels: 4,
            global_blocks: 3,
            top_t: 0.05,
            patch_count: 2,
            patch_size: 16,
            local_channels: 4,
            domain_widths: vec![64, 32, 16],
        }
    }
}

impl ModelConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Spatial extent after the stem convolution (stride 2) and 2×2 pooling.
    pub fn feature_extent(&self) -> usize {
        let pad = self.stem_kernel / 2;
        ((self.input_size + 2 * pad - self.stem_kernel) / 2 + 1) / 2
    }

    pub fn fused_width(&self) -> usize {
        self.global_channels + self.local_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.global_channels == 0 || self.local_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 {
            return bad(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        if self.input_size < self.stem_kernel {
            return bad(format!("input_size {} smaller than the stem kernel", self.input_size));
        }
        let pad = self.stem_kernel / 2;
        let stem_out = (self.input_size + 2 * pad - self.stem_kernel) / 2 + 1;
        if stem_out < 2 || stem_out % 2 != 0 {
            return bad(format!("input_size {} gives odd or tiny stem output {stem_out}", self.input_size));
        }
        if !(self.top_t > 0.0 && self.top_t <= 1.0) {
            return bad(format!("top_t must lie in (0, 1], got {}", self.top_t));
        }
        if self.patch_count == 0 {
            return bad("patch_count must be at least 1".into());
        }
        if self.patch_size == 0 || self.patch_size > self.input_size {
            return bad(format!("patch_size {} must lie in 1..={}", self.patch_size, self.input_size));
        }
        if self.domain_widths.iter().any(|&w| w == 0) {
            return bad("domain head widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(sess, x)?;
        self.bn.forward(sess, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModule {
    stem: ConvBn,
    blocks: Vec<ResBlock>,
    saliency: Conv2d,
    top_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalModule {
    layers: Vec<ConvBn>,
    attention: Linear,
    head: Linear,
}

/// Greedy patch selection settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchExtractor {
    pub count: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmicMini {
    pub global: GlobalModule,
    pub patches: PatchExtractor,
    pub local: LocalModule,
    pub fusion: Linear,
    pub domain: DomainHead,
}

pub struct GlobalOut {
    /// `N×2×h'×w'`, values in (0, 1).
    pub saliency: Var,
    /// `N×2`.
    pub y_global: Var,
    /// `N×C` pooled features of the last block.
    pub features: Var,
}

pub struct ForwardOut {
    pub y_global: Var,
    pub y_local: Var,
    pub y_fusion: Var,
    pub saliency: Var,
    /// `N×K` attention over patches.
    pub attention: Var,
    /// Input of the fusion layer and of the domain head.
    pub fused: Var,
    /// Top-left corners `(row, col)` of the selected patches, per sample.
    pub patch_origins: Vec<Vec<(usize, usize)>>,
}

impl GmicMini {
    pub fn build(cfg: &ModelConfig, params: &mut ParamStore, bn: &mut BnStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.global_channels;
        let mut conv_bn = |params: &mut ParamStore, bn: &mut BnStore, name: &str, cin, cout, k, stride| ConvBn {
            conv: Conv2d::new(params, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, &mut rng),
            bn: BatchNorm2d::new(params, bn, &format!("{name}.bn"), cout),
        };
        let stem = conv_bn(params, bn, "global.stem", cfg.in_channels, c, cfg.stem_kernel, 2);
        let blocks = (1..=cfg.global_blocks)
            .map(|i| ResBlock {
                a: conv_bn(params, bn, &format!("global.block{i}.a"), c, c, 3, 1),
                b: conv_bn(params, bn, &format!("global.block{i}.b"), c, c, 3, 1),
            })
            .collect();
        let l = cfg.local_channels;
        let local_layers = vec![
            conv_bn(params, bn, "local.layer1", cfg.in_channels, l, 3, 1),
            conv_bn(params, bn, "local.layer2", l, l, 3, 1),
        ];
        let saliency = Conv2d::new(params, "global.saliency", c, 2, 1, 1, 0, true, &mut rng);
        let attention = Linear::new(params, "local.attention", l, 1, &mut rng);
        let head = Linear::new(params, "local.head", l, 2, &mut rng);
        let fusion = Linear::new(params, "fusion", cfg.fused_width(), 2, &mut rng);
        let domain = DomainHead::new(params, "domain", cfg.fused_width(), &cfg.domain_widths, &mut rng);
        Ok(GmicMini {
            global: GlobalModule { stem, blocks, saliency, top_t: cfg.top_t },
            patches: PatchExtractor { count: cfg.patch_count, size: cfg.patch_size },
            local: LocalModule { layers: local_layers, attention, head },
            fusion,
            domain,
        })
    }

    pub fn global_forward(&self, sess: &mut Session<'_>, x: Var) -> Result<GlobalOut> {
        let g = &self.global;
        let s = g.stem.forward(sess, x)?;
        let s = sess.graph.relu(s);
        let mut h = sess.graph.avg_pool2d(s, 2)?;
        for block in &g.blocks {
            let a = block.a.forward(sess, h)?;
            let a = sess.graph.relu(a);
            let b = block.b.forward(sess, a)?;
            let sum = sess.graph.add(b, h)?;
            h = sess.graph.relu(sum);
        }
        let logits = g.saliency.forward(sess, h)?;
        let saliency = sess.graph.sigmoid(logits);
        let y_global = sess.graph.top_t_pool(saliency, g.top_t)?;
        let features = sess.graph.global_avg_pool(h)?;
        Ok(GlobalOut { saliency, y_global, features })
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: Var) -> Result<ForwardOut> {
        let shape = sess.graph.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("model", format!("expected N×C×H×W input, got {shape:?}")));
        }
        let n = shape[0];
        let gout = self.global_forward(sess, x)?;
        let sal = sess.graph.tensor(gout.saliency);
        let img = sess.graph.tensor(x);
        let (patches, patch_origins) = extract_patches(&sal, &img, &self.patches)?;
        let k = self.patches.count;

        let mut p = sess.graph.constant(patches);
        for layer in &self.local.layers {
            let y = layer.forward(sess, p)?;
            p = sess.graph.relu(y);
        }
        let local_feat = sess.graph.global_avg_pool(p)?;
        let scores = self.local.attention.forward(sess, local_feat)?;
        let scores = sess.graph.reshape(scores, vec![n, k])?;
        let attention = sess.graph.softmax(scores);
        let pooled = sess.graph.weighted_sum(local_feat, attention)?;
        let local_logits = self.local.head.forward(sess, pooled)?;
        let y_local = sess.graph.sigmoid(local_logits);

        let fused = sess.graph.concat_cols(gout.features, pooled)?;
        let fusion_logits = self.fusion.forward(sess, fused)?;
        let y_fusion = sess.graph.sigmoid(fusion_logits);
        Ok(ForwardOut {
            y_global: gout.y_global,
            y_local,
            y_fusion,
            saliency: gout.saliency,
            attention,
            fused,
            patch_origins,
        })
    }

    /// Names of BN layers in the stem and the first residual block.
    pub fn first_stage_bn(&self, bn: &BnStore) -> Vec<String> {
        let mut ids = vec![self.global.stem.bn.state];
        if let Some(b) = self.global.blocks.first() {
            ids.extend([b.a.bn.state, b.b.bn.state]);
        }
        ids.into_iter().map(|id| bn.get(id).name.clone()).collect()
    }

    /// Names of BN layers in the last residual block.
    pub fn last_stage_bn(&self, bn: &BnStore) -> Vec<String> {
        self.global
            .blocks
            .last()
            .map(|b| vec![bn.get(b.a.bn.state).name.clone(), bn.get(b.b.bn.state).name.clone()])
            .unwrap_or_default()
    }
}

/// Saliency cell `(i, j)` of an `h'×w'` map mapped to the nearest image pixel.
fn cell_center(i: usize, cells: usize, pixels: usize) -> usize {
    (((i as f64 + 0.5) * pixels as f64 / cells as f64).floor() as usize).min(pixels - 1)
}

/// Greedy selection of `count` patch centers (in image pixels) from a summed
/// saliency map. Ties go to the first cell in row-major order; cells whose
/// center lies within `size` of a chosen center on both axes are suppressed,
/// falling back to any unchosen cell once everything is suppressed.
pub fn select_centers(sal: &[f64], h: usize, w: usize, img_h: usize, img_w: usize, count: usize, size: usize) -> Vec<(usize, usize)> {
    debug_assert_eq!(sal.len(), h * w);
    let mut chosen_cells: Vec<usize> = Vec::with_capacity(count);
    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(count);
    let mut suppressed = vec![false; h * w];
    for _ in 0..count {
        let pick = |allow: &dyn Fn(usize) -> bool| {
            let mut best: Option<usize> = None;
            for idx in 0..h * w {
                if allow(idx) && best.is_none_or(|b| sal[idx] > sal[b]) {
                    best = Some(idx);
                }
            }
            best
        };
        let idx = pick(&|i| !suppressed[i])
            .or_else(|| pick(&|i| !chosen_cells.contains(&i)))
            .unwrap_or(0);
        let (cy, cx) = (cell_center(idx / w, h, img_h), cell_center(idx % w, w, img_w));
        chosen_cells.push(idx);
        centers.push((cy, cx));
        for j in 0..h * w {
            let (y, x) = (cell_center(j / w, h, img_h), cell_center(j % w, w, img_w));
            if y.abs_diff(cy) < size && x.abs_diff(cx) < size {
                suppressed[j] = true;
            }
        }
    }
    centers
}

/// Top-left corner of a `size`-wide window centered at `c`, clamped inside `[0, extent)`.
fn window_origin(c: usize, size: usize, extent: usize) -> usize {
    c.saturating_sub(size / 2).min(extent - size)
}

/// Cuts `count` patches per sample from `image` (`N×C×H×W`) at the peaks of
/// the class-summed `saliency` (`N×2×h×w`). Returns `(N·K)×C×size×size` and
/// the patch origins.
pub fn extract_patches(saliency: &Tensor, image: &Tensor, cfg: &PatchExtractor) -> Result<(Tensor, Vec<Vec<(usize, usize)>>)> {
    let (ss, is) = (saliency.shape(), image.shape());
    if ss.len() != 4 || is.len() != 4 || ss[0] != is[0] {
        return Err(Error::shape("extract_patches", format!("saliency {ss:?}, image {is:?}")));
    }
    if cfg.count == 0 {
        return Err(Error::invalid("patch count must be at least 1"));
    }
    let (n, classes, h, w) = (ss[0], ss[1], ss[2], ss[3]);
    let (c, ih, iw) = (is[1], is[2], is[3]);
    let p = cfg.size;
    if p == 0 || p > ih || p > iw {
        return Err(Error::invalid(format!("patch size {p} does not fit a {ih}×{iw} image")));
    }
    let mut out = Vec::with_capacity(n * cfg.count * c * p * p);
    let mut origins = Vec::with_capacity(n);
    let sd = saliency.data();
    let id = image.data();
    for s in 0..n {
        let mut summed = vec![0.0; h * w];
        for cls in 0..classes {
            let base = (s * classes + cls) * h * w;
            for (acc, v) in summed.iter_mut().zip(&sd[base..base + h * w]) {
                *acc += v;
            }
        }
        let centers = select_centers(&summed, h, w, ih, iw, cfg.count, p);
        let mut sample_origins = Vec::with_capacity(cfg.count);
        for (cy, cx) in centers {
            let (y0, x0) = (window_origin(cy, p, ih), window_origin(cx, p, iw));
            sample_origins.push((y0, x0));
            for ch in 0..c {
                let plane = &id[(s * c + ch) * ih * iw..(s * c + ch + 1) * ih * iw];
                for y in y0..y0 + p {
                    out.extend_from_slice(&plane[y * iw + x0..y * iw + x0 + p]);
                }
            }
        }
        origins.push(sample_origins);
    }
    Ok((Tensor::new(vec![n * cfg.count, c, p, p], out)?, origins))
}

/// Network, learnable parameters, and BN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub net: GmicMini,
    pub params: ParamStore,
    pub bn: BnStore,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_global: Tensor,
    pub y_local: Tensor,
    pub y_fusion: Tensor,
    pub saliency: Tensor,
    pub attention: Tensor,
}

impl Prediction {
    /// Malignant-class fusion probability per sample.
    pub fn malignant(&self) -> Vec<f64> {
        self.y_fusion.data().chunks(2).map(|r| r[1]).collect()
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut bn = BnStore::default();
        let net = GmicMini::build(&config, &mut params, &mut bn, seed)?;
        Ok(Model { config, seed, net, params, bn })
    }

    /// Session allowed to update running statistics, plus the network to drive it.
    pub fn session(&mut self) -> (&GmicMini, Session<'_>) {
        (&self.net, Session::new(&self.params, &mut self.bn))
    }

    /// Session that leaves all model state untouched.
    pub fn session_ref(&self) -> (&GmicMini, Session<'_>) {
        (&self.net, Session::read_only(&self.params, &self.bn))
    }

    pub fn set_mode(&mut self, mode: StatsMode, tt_batch_size: Option<usize>) -> Result<()> {
        self.bn.set_mode(mode, tt_batch_size)
    }

    pub fn set_eval(&mut self, stats: EvalStats) {
        self.bn.set_eval(stats);
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.input_size, c.input_size];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::shape("model", format!("input {:?}, expected N×{:?}", x.shape(), want)));
        }
        Ok(())
    }

    /// Forward pass on one batch without touching model state.
    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        self.check_input(x)?;
        let (net, mut sess) = self.session_ref();
        let xv = sess.graph.constant(x.clone());
        let out = net.forward(&mut sess, xv)?;
        let g = &sess.graph;
        Ok(Prediction {
            y_global: g.tensor(out.y_global),
            y_local: g.tensor(out.y_local),
            y_fusion: g.tensor(out.y_fusion),
            saliency: g.tensor(out.saliency),
            attention: g.tensor(out.attention),
        })
    }
}
