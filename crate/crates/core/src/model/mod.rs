//! Counting networks for the LC and RLC frameworks.
//!
//! A shared convolutional backbone feeds a classification head (category
//! maps `M`, peak-based class confidences) and either a per-category density
//! head (LC) or a reduced-count branch (RLC) in which per-category count
//! weights are produced from the classifier weights by a small network `Ψ`
//! and modulated by a class-agnostic total-density head.

mod checkpoint;
pub mod peaks;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use peaks::{class_confidence, kth_largest, local_maxima_mask, peak_map, peak_mask, spatial_mask, SpatialMask};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormConfig, BatchNormStats, BnMode, SgdConfig, SgdState, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Lc,
    Rlc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Heads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub framework: Framework,
    pub num_categories: usize,
    /// Backbone output channels.
    pub feature_dim: usize,
    /// Chebyshev radius of the peak neighborhood.
    pub peak_radius: usize,
    /// Fixed factor applied to density-head outputs.
    pub density_scale: f32,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(framework: Framework, num_categories: usize) -> Self {
        ModelConfig {
            framework,
            num_categories,
            feature_dim: 32,
            peak_radius: 1,
            density_scale: default_density_scale(framework),
            init_seed: 0,
        }
    }

    /// Hidden width `P = ceil(1.5 C)` of the 1x1 heads.
    pub fn head_width(&self) -> usize {
        (3 * self.num_categories).div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(Error::Config(format!("num_categories {} < 2", self.num_categories)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.peak_radius == 0 {
            return Err(Error::Config("peak_radius must be positive".into()));
        }
        if !(self.density_scale.is_finite() && self.density_scale > 0.0) {
            return Err(Error::Config(format!(
                "density_scale {} must be positive",
                self.density_scale
            )));
        }
        Ok(())
    }
}

/// Density outputs are summed over every map cell, so their curvature
/// grows with the map area; this factor keeps SGD stable at the default
/// learning rates. The reduced-count density is a product of two learned
/// maps and needs the smaller value.
pub fn default_density_scale(framework: Framework) -> f32 {
    match framework {
        Framework::Lc => 1.0 / 16.0,
        Framework::Rlc => 1.0 / 32.0,
    }
}

/// The total-count map sums over all categories at once.
const TOTAL_SCALE_RATIO: f32 = 0.25;

/// Backbone: 3x3 convolutions with ReLU, spatial stride 4 overall.
const BACKBONE: [(usize, usize); 4] = [(16, 1), (32, 2), (32, 2), (0, 1)];

#[derive(Clone, Copy, Debug)]
enum Init {
    He,
    Ones,
    Zeros,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    init: Init,
}

fn layout(cfg: &ModelConfig) -> (Vec<Slot>, Vec<(String, usize)>) {
    let mut slots = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, group, init| {
        slots.push(Slot {
            name: name.into(),
            shape,
            group,
            init,
        })
    };
    let mut cin = 3;
    for (i, &(w, _)) in BACKBONE.iter().enumerate() {
        let cout = if w == 0 { cfg.feature_dim } else { w };
        add(
            &format!("backbone.conv{}.weight", i + 1),
            vec![cout, cin, 3, 3],
            ParamGroup::Backbone,
            Init::He,
        );
        cin = cout;
    }
    let (f, p, c) = (cfg.feature_dim, cfg.head_width(), cfg.num_categories);
    let h = ParamGroup::Heads;
    add("cls.conv1.weight", vec![p, f, 1, 1], h, Init::He);
    add("cls.bn.gamma", vec![p], h, Init::Ones);
    add("cls.bn.beta", vec![p], h, Init::Zeros);
    add("cls.conv2.weight", vec![c, p, 1, 1], h, Init::He);
    add("cls.conv2.bias", vec![c], h, Init::Zeros);
    let mut bn = vec![("cls.bn".to_string(), p)];
    match cfg.framework {
        Framework::Lc => {
            add("den.conv1.weight", vec![p, f, 1, 1], h, Init::He);
            add("den.bn.gamma", vec![p], h, Init::Ones);
            add("den.bn.beta", vec![p], h, Init::Zeros);
            add("den.conv2.weight", vec![c, p, 1, 1], h, Init::Zeros);
            bn.push(("den.bn".into(), p));
        }
        Framework::Rlc => {
            let q = p / 2;
            add("cnt.conv1.weight", vec![p, f, 1, 1], h, Init::He);
            add("cnt.bn.gamma", vec![p], h, Init::Ones);
            add("cnt.bn.beta", vec![p], h, Init::Zeros);
            add("tot.conv.weight", vec![1, p, 1, 1], h, Init::Zeros);
            add("psi.fc1.weight", vec![q, p], h, Init::Uniform);
            add("psi.fc1.bias", vec![q], h, Init::Zeros);
            add("psi.fc2.weight", vec![p, q], h, Init::Uniform);
            add("psi.fc2.bias", vec![p], h, Init::Zeros);
            bn.push(("cnt.bn".into(), p));
        }
    }
    (slots, bn)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub groups: Vec<ParamGroup>,
    pub params: Vec<Tensor>,
    pub bn: Vec<(String, BatchNormStats)>,
}

impl ModelState {
    /// Fresh parameters: He-normal convolutions, unit/zero batch-norm
    /// affine terms, uniform fully connected weights with zero bias.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (slots, bn) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::new();
        let mut groups = Vec::new();
        let mut params = Vec::new();
        for slot in slots {
            let n: usize = slot.shape.iter().product();
            let fan_in: usize = slot.shape[1..].iter().product::<usize>().max(1);
            let data: Vec<f32> = match slot.init {
                Init::He => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("finite std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Uniform => {
                    let b = 1.0 / (fan_in as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-b..b)).collect()
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            names.push(slot.name);
            groups.push(slot.group);
            params.push(Tensor::new(slot.shape, data)?);
        }
        let bn = bn.into_iter().map(|(n, ch)| (n, BatchNormStats::new(ch))).collect();
        Ok(ModelState {
            config,
            names,
            groups,
            params,
            bn,
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Optimizer buffers matching this model's parameters.
    pub fn new_optimizer(&self, config: SgdConfig) -> SgdState {
        SgdState::new(config, self.params.iter().map(Tensor::shape))
    }

    /// Per-parameter learning rates from the two groups.
    pub fn learning_rates(&self, backbone: f32, heads: f32) -> Vec<f32> {
        self.groups
            .iter()
            .map(|g| match g {
                ParamGroup::Backbone => backbone,
                ParamGroup::Heads => heads,
            })
            .collect()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    fn bn_stats(&mut self, name: &str) -> &mut BatchNormStats {
        let i = self
            .bn
            .iter()
            .position(|(n, _)| n == name)
            .expect("known batch-norm layer");
        &mut self.bn[i].1
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index_of(name).expect("known parameter")]
    }

    fn backbone(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let mut x = images;
        for (i, &(_, stride)) in BACKBONE.iter().enumerate() {
            let w = self.var(bound, &format!("backbone.conv{}.weight", i + 1));
            x = tape.conv2d(x, w, stride, 1)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// `ReLU(BN(conv1x1(x)))`
    fn trunk(&mut self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str, mode: BnMode) -> Result<Var> {
        let w = self.var(bound, &format!("{prefix}.conv1.weight"));
        let gamma = self.var(bound, &format!("{prefix}.bn.gamma"));
        let beta = self.var(bound, &format!("{prefix}.bn.beta"));
        let y = tape.conv2d(x, w, 1, 0)?;
        let stats = self.bn_stats(&format!("{prefix}.bn"));
        let y = tape.batchnorm2d(y, gamma, beta, stats, mode, BatchNormConfig::default())?;
        tape.relu(y)
    }

    /// Forward pass over `images: [N, 3, H, W]`. Train mode uses and updates
    /// batch-norm batch statistics.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, images: Var, mode: BnMode) -> Result<Forward> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "forward",
                format!("images must be [N, 3, H, W], got {shape:?}"),
            ));
        }
        let features = self.backbone(tape, bound, images)?;
        let cls = self.trunk(tape, bound, features, "cls", mode)?;
        let w_cls = self.var(bound, "cls.conv2.weight");
        let class_map = tape.conv2d(cls, w_cls, 1, 0)?;
        // The offset lets suppression of an absent category lower the whole
        // map, background included, instead of only sinking its peaks below
        // a flat background where they stop being peaks.
        let b_cls = self.var(bound, "cls.conv2.bias");
        let class_map = tape.channel_bias(class_map, b_cls)?;
        let mask = peak_mask(tape.value(class_map), self.config.peak_radius);
        let peaks = tape.mask(class_map, mask)?;
        let scores = tape.nonzero_mean(peaks)?;
        let scale = self.config.density_scale;
        match self.config.framework {
            Framework::Lc => {
                let den = self.trunk(tape, bound, features, "den", mode)?;
                let w = self.var(bound, "den.conv2.weight");
                let density = tape.conv2d(den, w, 1, 0)?;
                let density = tape.scale(density, scale)?;
                Ok(Forward {
                    class_map,
                    peaks,
                    scores,
                    density,
                    rlc: None,
                })
            }
            Framework::Rlc => {
                let f_cnt = self.trunk(tape, bound, features, "cnt", mode)?;
                let w_tot = self.var(bound, "tot.conv.weight");
                let total = tape.conv2d(f_cnt, w_tot, 1, 0)?;
                let total = tape.scale(total, scale * TOTAL_SCALE_RATIO)?;
                let count_weights = self.count_weights(tape, bound, w_cls)?;
                // The reduced-count branch trains only Ψ: both of its inputs
                // are cut from the graph, and the spatial modulation enters
                // as a constant.
                let f_cnt_const = tape.detach(f_cnt);
                let raw = tape.conv2d(f_cnt_const, count_weights, 1, 0)?;
                let raw = tape.scale(raw, scale)?;
                let gate = weight_modulation(tape.value(class_map), tape.value(total))?;
                let gate = tape.constant(gate);
                let density = tape.mul(raw, gate)?;
                Ok(Forward {
                    class_map,
                    peaks,
                    scores,
                    density,
                    rlc: Some(RlcVars {
                        total,
                        raw,
                        count_weights,
                    }),
                })
            }
        }
    }

    /// `w_cnt = Ψ(sg(w_cls))` as `[C, P, 1, 1]` convolution weights.
    fn count_weights(&self, tape: &mut Tape, bound: &Bound, w_cls: Var) -> Result<Var> {
        let (c, p) = (self.config.num_categories, self.config.head_width());
        let rows = tape.detach(w_cls);
        let rows = tape.reshape(rows, &[c, p])?;
        let (w1, b1) = (self.var(bound, "psi.fc1.weight"), self.var(bound, "psi.fc1.bias"));
        let (w2, b2) = (self.var(bound, "psi.fc2.weight"), self.var(bound, "psi.fc2.bias"));
        let h = tape.fully_connected(rows, w1, b1)?;
        let h = tape.softmax(h)?;
        let out = tape.fully_connected(h, w2, b2)?;
        tape.reshape(out, &[c, p, 1, 1])
    }

    /// Evaluation-mode predictions for a list of `[3, H, W]` images,
    /// processed in chunks of `batch_size`.
    pub fn predict(&mut self, images: &[&Tensor], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
            let batch = Tensor::stack(&owned)?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let x = tape.constant(batch);
            let fwd = self.forward(&mut tape, &bound, x, BnMode::Eval)?;
            let scores = tape.value(fwd.scores);
            let density = tape.value(fwd.density);
            let c = self.config.num_categories;
            for n in 0..chunk.len() {
                let s = scores.data()[n * c..(n + 1) * c].to_vec();
                let d = density.index(n)?;
                let sums: Vec<f64> = (0..c).map(|k| d.index(k).map(|p| p.sum())).collect::<Result<_>>()?;
                let counts = predict_counts(&s, &sums);
                let total_head = match &fwd.rlc {
                    Some(r) => Some(tape.value(r.total).index(n)?.sum() as f32),
                    None => None,
                };
                out.push(Prediction {
                    scores: s,
                    density_sums: sums,
                    counts,
                    total_head,
                    density: d,
                });
            }
        }
        Ok(out)
    }
}

/// Tape handles for the model parameters, in [`ModelState::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    /// Gradients after `backward`; `None` for parameters the loss did not
    /// reach.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RlcVars {
    /// Total-count density `D_tot`, `[N, 1, h, w]`.
    pub total: Var,
    /// Unmodulated per-category density `D_raw`, `[N, C, h, w]`.
    pub raw: Var,
    /// `w_cnt`, `[C, P, 1, 1]`.
    pub count_weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Category maps `M`, `[N, C, h, w]`.
    pub class_map: Var,
    /// `M` restricted to its local maxima.
    pub peaks: Var,
    /// Class confidences `s`, `[N, C]`.
    pub scores: Var,
    /// Per-category density (`D` for LC, `D_hat` for RLC), `[N, C, h, w]`.
    pub density: Var,
    pub rlc: Option<RlcVars>,
}

/// `G = σ(M) ⊙ D_tot` broadcast over categories; `class_map` is
/// `[N, C, h, w]` and `total` is `[N, 1, h, w]`.
pub fn weight_modulation(class_map: &Tensor, total: &Tensor) -> Result<Tensor> {
    let ms = class_map.shape();
    let ts = total.shape();
    if ms.len() != 4 || ts.len() != 4 || ts[1] != 1 || ms[0] != ts[0] || ms[2..] != ts[2..] {
        return Err(Error::shape(
            "weight_modulation",
            format!("class map {ms:?} vs total density {ts:?}"),
        ));
    }
    let plane = ms[2] * ms[3];
    let mut out = Vec::with_capacity(class_map.len());
    for n in 0..ms[0] {
        let t = &total.data()[n * plane..(n + 1) * plane];
        for c in 0..ms[1] {
            let m = &class_map.data()[(n * ms[1] + c) * plane..][..plane];
            out.extend(m.iter().zip(t).map(|(&mv, &tv)| crate::autodiff::sigmoid(mv) * tv));
        }
    }
    Tensor::new(ms.to_vec(), out)
}

/// Count per category: the density sum where the class confidence is
/// positive, zero otherwise.
pub fn predict_counts(scores: &[f32], density_sums: &[f64]) -> Vec<f32> {
    scores
        .iter()
        .zip(density_sums)
        .map(|(&s, &d)| if s > 0.0 { d as f32 } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f32>,
    pub density_sums: Vec<f64>,
    /// Confidence-gated, unrounded counts.
    pub counts: Vec<f32>,
    /// Output of the total-count head (RLC only).
    pub total_head: Option<f32>,
    /// `[C, h, w]`
    pub density: Tensor,
}
