//! The full restoration network: shallow-feature head, a cascade of
//! collaborative attention blocks (feature extraction followed by dual-branch
//! fusion), a tail conv back to image space, and a global residual.
//!
//! Parameter namespace (`{i}` = block, `{j}` = layer):
//!
//! ```text
//! head.weight / head.bias
//! cab.{i}.fem.{j}.conv.*  cab.{i}.fem.{j}.bn.{weight,bias}      basic FEM
//! cab.{i}.fem.{j}.conv1.* cab.{i}.fem.{j}.conv2.*               enhanced FEM
//! cab.{i}.nl.{theta,phi,g}.*                                    1×1 embeddings
//! cab.{i}.local.short.*  cab.{i}.local.long1.*  cab.{i}.local.long2.*
//! cab.{i}.local.{short,long}_ca.{fc1,fc2}.*                     channel gates
//! cab.{i}.fuse.{fc1,fc2}.*
//! tail.weight / tail.bias
//! ```
//!
//! Batch-norm running statistics are buffers named
//! `cab.{i}.fem.{j}.bn.running_{mean,var}`; they are saved with the weights but
//! are not trainable and do not count as parameters.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::attention::{
    self, AffineVars, AttentionTrace, ChannelAttentionVars, ConvVars, FusionVars, LocalVars, NonLocalOptions,
    NonLocalVars,
};
use crate::degradation::Rng;
use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::patch::{covering_size, PatchGeometry};
use crate::tensor::{ParamTensor, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Stacked conv–BN–ReLU feature extraction.
    Basic,
    /// Residual conv–ReLU–conv feature extraction.
    Enhanced,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Enhanced => "enhanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "enhanced" => Ok(Variant::Enhanced),
            _ => Err(config_err!("unknown variant '{s}' (expected basic|enhanced)")),
        }
    }

    pub fn default_depth(self) -> usize {
        match self {
            Variant::Basic => 6,
            Variant::Enhanced => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_cab: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub fem_depth: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub ca_reduction: usize,
    /// Scale patch similarities by 1/sqrt(vector length) before the softmax.
    pub attn_scaled: bool,
    /// Use one channel gate for both local paths.
    pub share_local_ca: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Inference tile side; matches the training crop.
    pub tile: usize,
    pub tile_overlap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::basic()
    }
}

impl ModelConfig {
    pub fn basic() -> Self {
        Self {
            variant: Variant::Basic,
            num_cab: 4,
            channels: 64,
            in_channels: 1,
            fem_depth: Variant::Basic.default_depth(),
            patch_size: 7,
            patch_stride: 4,
            ca_reduction: 4,
            attn_scaled: false,
            share_local_ca: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            tile: 64,
            tile_overlap: 16,
        }
    }

    pub fn enhanced() -> Self {
        Self { variant: Variant::Enhanced, fem_depth: Variant::Enhanced.default_depth(), ..Self::basic() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_cab", self.num_cab),
            ("channels", self.channels),
            ("fem_depth", self.fem_depth),
            ("patch_size", self.patch_size),
            ("patch_stride", self.patch_stride),
            ("ca_reduction", self.ca_reduction),
            ("tile", self.tile),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("model.{name} must be positive"));
            }
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(config_err!("model.in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.channels % self.ca_reduction != 0 {
            return Err(config_err!(
                "model.ca_reduction {} does not divide model.channels {}",
                self.ca_reduction,
                self.channels
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(config_err!("batch norm eps must be > 0 and momentum in [0,1]"));
        }
        if self.tile < self.patch_size || self.tile_overlap >= self.tile {
            return Err(config_err!("tile {} must be ≥ patch size and > overlap {}", self.tile, self.tile_overlap));
        }
        Ok(())
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<PatchGeometry> {
        PatchGeometry::square(self.channels, height, width, self.patch_size, self.patch_stride)
    }
}

enum Init {
    /// Gaussian with std sqrt(2 / fan_in).
    He(usize),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Vec<(String, Vec<usize>, f64)>) {
    let c = cfg.channels;
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let conv = |params: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize| {
        params.push((format!("{name}.weight"), vec![cout, cin, k, k], Init::He(cin * k * k)));
        params.push((format!("{name}.bias"), vec![cout], Init::Zeros));
    };
    let affine = |params: &mut Vec<_>, name: String, din: usize, dout: usize| {
        params.push((format!("{name}.weight"), vec![dout, din], Init::He(din)));
        params.push((format!("{name}.bias"), vec![dout], Init::Zeros));
    };

    conv(&mut params, "head".into(), cfg.in_channels, c, 3);
    for i in 0..cfg.num_cab {
        let cab = format!("cab.{i}");
        for j in 0..cfg.fem_depth {
            let blk = format!("{cab}.fem.{j}");
            match cfg.variant {
                Variant::Basic => {
                    conv(&mut params, format!("{blk}.conv"), c, c, 3);
                    params.push((format!("{blk}.bn.weight"), vec![c], Init::Ones));
                    params.push((format!("{blk}.bn.bias"), vec![c], Init::Zeros));
                    buffers.push((format!("{blk}.bn.running_mean"), vec![c], 0.0));
                    buffers.push((format!("{blk}.bn.running_var"), vec![c], 1.0));
                }
                Variant::Enhanced => {
                    conv(&mut params, format!("{blk}.conv1"), c, c, 3);
                    conv(&mut params, format!("{blk}.conv2"), c, c, 3);
                }
            }
        }
        for e in ["theta", "phi", "g"] {
            conv(&mut params, format!("{cab}.nl.{e}"), c, c, 1);
        }
        conv(&mut params, format!("{cab}.local.short"), c, c, 3);
        conv(&mut params, format!("{cab}.local.long1"), c, c, 3);
        conv(&mut params, format!("{cab}.local.long2"), c, c, 3);
        let mid = c / cfg.ca_reduction.max(1);
        let gates: &[&str] = if cfg.share_local_ca { &["short_ca"] } else { &["short_ca", "long_ca"] };
        for gate in gates {
            affine(&mut params, format!("{cab}.local.{gate}.fc1"), c, mid);
            affine(&mut params, format!("{cab}.local.{gate}.fc2"), mid, c);
        }
        affine(&mut params, format!("{cab}.fuse.fc1"), c, c);
        affine(&mut params, format!("{cab}.fuse.fc2"), c, c);
    }
    conv(&mut params, "tail".into(), c, cfg.in_channels, 3);
    (params, buffers)
}

/// The named parameter store of one network, plus batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    pub config: ModelConfig,
    params: Vec<ParamTensor<T>>,
    buffers: Vec<ParamTensor<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Real> ModelWeights<T> {
    /// Fresh weights: He-scaled Gaussians for conv/affine weights, zero biases,
    /// unit batch-norm scale.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (plan, bufs) = layout(config);
        let mut rng = Rng::new(seed, u64::MAX);
        let params = plan
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::He(fan_in) => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(&shape, |_| T::lit(std * rng.gaussian()))
                    }
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, T::one()),
                };
                ParamTensor::new(name, value)
            })
            .collect();
        let buffers = bufs
            .into_iter()
            .map(|(name, shape, fill)| ParamTensor::new(name, Tensor::full(&shape, T::lit(fill))))
            .collect();
        Ok(Self::assemble(config.clone(), params, buffers))
    }

    /// Rebuild from stored tensors, checking names and shapes against the layout.
    pub fn from_parts(config: ModelConfig, params: Vec<ParamTensor<T>>, buffers: Vec<ParamTensor<T>>) -> Result<Self> {
        config.validate()?;
        let (plan, bufs) = layout(&config);
        let expect = |got: &[ParamTensor<T>], want: Vec<(String, Vec<usize>)>, what: &str| -> Result<()> {
            if got.len() != want.len() {
                return Err(Error::Format(format!("expected {} {what} tensors, found {}", want.len(), got.len())));
            }
            for (p, (name, shape)) in got.iter().zip(want) {
                if p.name != name || p.value.shape() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "{what} '{}' {:?} does not match expected '{name}' {shape:?}",
                        p.name,
                        p.value.shape()
                    )));
                }
            }
            Ok(())
        };
        expect(&params, plan.into_iter().map(|(n, s, _)| (n, s)).collect(), "parameter")?;
        expect(&buffers, bufs.into_iter().map(|(n, s, _)| (n, s)).collect(), "buffer")?;
        Ok(Self::assemble(config, params, buffers))
    }

    fn assemble(config: ModelConfig, params: Vec<ParamTensor<T>>, buffers: Vec<ParamTensor<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let buffer_index = buffers.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { config, params, buffers, index, buffer_index }
    }

    pub fn params(&self) -> &[ParamTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[ParamTensor<T>] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i].value)
    }

    fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &mut self.buffers[i].value)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Add the gradients of a finished pass into each parameter's grad slot.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &Gradients<T>) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.raw(v) {
                p.value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Fold observed batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for (prefix, s) in stats {
            if let Some(rm) = self.buffer_mut(&format!("{prefix}.running_mean")) {
                rm.data_mut().iter_mut().zip(&s.mean).for_each(|(r, &b)| *r = keep * *r + m * b);
            }
            if let Some(rv) = self.buffer_mut(&format!("{prefix}.running_var")) {
                rv.data_mut().iter_mut().zip(&s.var).for_each(|(r, &b)| *r = keep * *r + m * b);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights::assemble(
            self.config.clone(),
            self.params.iter().map(|p| p.cast()).collect(),
            self.buffers.iter().map(|p| p.cast()).collect(),
        )
    }
}

/// Scalar parameter count, total and grouped by module prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Census {
    pub total: usize,
    /// (`head` | `cab.{i}.{fem,nl,local,fuse}` | `tail`, count) in layout order.
    pub groups: Vec<(String, usize)>,
}

impl Census {
    /// Sum of the groups under `cab.{i}`.
    pub fn cab_total(&self, i: usize) -> usize {
        let prefix = format!("cab.{i}.");
        self.groups.iter().filter(|(g, _)| g.starts_with(&prefix)).map(|(_, n)| n).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (g, n) in &self.groups {
            s.push_str(&format!("{g:<16} {n:>10}\n"));
        }
        s.push_str(&format!("{:<16} {:>10}\n", "total", self.total));
        s
    }
}

pub fn param_census<T: Real>(params: &[ParamTensor<T>]) -> Census {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for p in params {
        let parts: Vec<&str> = p.name.split('.').collect();
        let key = if parts[0] == "cab" && parts.len() > 2 { parts[..3].join(".") } else { parts[0].to_string() };
        match groups.last_mut() {
            Some((k, n)) if *k == key => *n += p.value.numel(),
            _ => groups.push((key, p.value.numel())),
        }
    }
    Census { total: groups.iter().map(|(_, n)| n).sum(), groups }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running estimates are collected.
    Train,
    /// Running statistics in batch norm.
    Infer,
}

/// One pass of the network bound to a graph: every parameter is a leaf.
pub struct Forward<'a, T: Real> {
    graph: &'a Graph<T>,
    weights: &'a ModelWeights<T>,
    vars: Vec<Var>,
    mode: Mode,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(graph: &'a Graph<T>, weights: &'a ModelWeights<T>, mode: Mode) -> Self {
        let vars = weights.params.iter().map(|p| graph.param(p.value.clone())).collect();
        Self { graph, weights, vars, mode, stats: RefCell::new(Vec::new()) }
    }

    /// Bind to existing leaves, one per parameter in layout order.
    pub fn with_vars(graph: &'a Graph<T>, weights: &'a ModelWeights<T>, vars: Vec<Var>, mode: Mode) -> Result<Self> {
        if vars.len() != weights.params.len() {
            return Err(shape_err!("{} leaves for {} parameters", vars.len(), weights.params.len()));
        }
        Ok(Self { graph, weights, vars, mode, stats: RefCell::new(Vec::new()) })
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    /// Leaf handles aligned with [`ModelWeights::params`].
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.weights
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("no parameter named '{name}'")))
    }

    fn conv(&self, prefix: &str) -> Result<ConvVars> {
        Ok(ConvVars { weight: self.var(&format!("{prefix}.weight"))?, bias: self.var(&format!("{prefix}.bias"))? })
    }

    fn affine(&self, prefix: &str) -> Result<AffineVars> {
        Ok(AffineVars { weight: self.var(&format!("{prefix}.weight"))?, bias: self.var(&format!("{prefix}.bias"))? })
    }

    fn gate(&self, prefix: &str) -> Result<ChannelAttentionVars> {
        Ok(ChannelAttentionVars { fc1: self.affine(&format!("{prefix}.fc1"))?, fc2: self.affine(&format!("{prefix}.fc2"))? })
    }

    /// Batch statistics gathered by training-mode batch norms, by layer prefix.
    pub fn take_batch_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    fn batch_norm(&self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.graph;
        let gamma = self.var(&format!("{prefix}.weight"))?;
        let beta = self.var(&format!("{prefix}.bias"))?;
        let eps = self.weights.config.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                self.stats.borrow_mut().push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Infer => {
                let missing = |n: &str| Error::Config(format!("missing buffer {prefix}.{n}"));
                let rm = self.weights.buffer(&format!("{prefix}.running_mean")).ok_or_else(|| missing("running_mean"))?;
                let rv = self.weights.buffer(&format!("{prefix}.running_var")).ok_or_else(|| missing("running_var"))?;
                g.batch_norm_infer(x, gamma, beta, rm, rv, eps)
            }
        }
    }

    fn check_channels(&self, x: Var) -> Result<()> {
        let (_, c, _, _) = self.graph.value(x).dims4()?;
        if c != self.weights.config.channels {
            return Err(shape_err!("feature map has {c} channels, model expects {}", self.weights.config.channels));
        }
        Ok(())
    }

    /// `fem_depth` conv→BN→ReLU blocks of block `cab`.
    pub fn fem_basic(&self, cab: usize, x: Var) -> Result<Var> {
        self.check_channels(x)?;
        let g = self.graph;
        let mut h = x;
        for j in 0..self.weights.config.fem_depth {
            let blk = format!("cab.{cab}.fem.{j}");
            let conv = self.conv(&format!("{blk}.conv"))?;
            h = g.conv2d(h, conv.weight, conv.bias, 1)?;
            h = self.batch_norm(&format!("{blk}.bn"), h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    /// `fem_depth` residual blocks `x + conv2(relu(conv1(x)))` of block `cab`.
    pub fn fem_enhanced(&self, cab: usize, x: Var) -> Result<Var> {
        self.check_channels(x)?;
        let g = self.graph;
        let mut h = x;
        for j in 0..self.weights.config.fem_depth {
            let blk = format!("cab.{cab}.fem.{j}");
            let c1 = self.conv(&format!("{blk}.conv1"))?;
            let c2 = self.conv(&format!("{blk}.conv2"))?;
            let r = g.conv2d(h, c1.weight, c1.bias, 1)?;
            let r = g.relu(r);
            let r = g.conv2d(r, c2.weight, c2.bias, 1)?;
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    pub fn fem(&self, cab: usize, x: Var) -> Result<Var> {
        match self.weights.config.variant {
            Variant::Basic => self.fem_basic(cab, x),
            Variant::Enhanced => self.fem_enhanced(cab, x),
        }
    }

    pub fn nonlocal_vars(&self, cab: usize) -> Result<NonLocalVars> {
        let p = format!("cab.{cab}.nl");
        Ok(NonLocalVars {
            theta: self.conv(&format!("{p}.theta"))?,
            phi: self.conv(&format!("{p}.phi"))?,
            g: self.conv(&format!("{p}.g"))?,
        })
    }

    pub fn local_vars(&self, cab: usize) -> Result<LocalVars> {
        let p = format!("cab.{cab}.local");
        let short_ca = self.gate(&format!("{p}.short_ca"))?;
        let long_ca = if self.weights.config.share_local_ca { short_ca } else { self.gate(&format!("{p}.long_ca"))? };
        Ok(LocalVars {
            short: self.conv(&format!("{p}.short"))?,
            long1: self.conv(&format!("{p}.long1"))?,
            long2: self.conv(&format!("{p}.long2"))?,
            short_ca,
            long_ca,
        })
    }

    pub fn fusion_vars(&self, cab: usize) -> Result<FusionVars> {
        let p = format!("cab.{cab}.fuse");
        Ok(FusionVars { fc1: self.affine(&format!("{p}.fc1"))?, fc2: self.affine(&format!("{p}.fc2"))? })
    }

    /// One collaborative attention block: FEM, then the non-local and local
    /// branches in parallel, then adaptive fusion.
    pub fn cab_forward(&self, cab: usize, x: Var) -> Result<(Var, AttentionTrace<T>)> {
        let cfg = &self.weights.config;
        let g = self.graph;
        let feat = self.fem(cab, x)?;
        let (_, _, h, w) = g.value(feat).dims4()?;
        let geom = cfg.geometry(h, w)?;
        let opts = NonLocalOptions { scaled: cfg.attn_scaled };
        let (f_nl, distance) = attention::nonlocal_attention(g, feat, &self.nonlocal_vars(cab)?, geom, opts)?;
        let f_l = attention::local_attention(g, feat, &self.local_vars(cab)?, cfg.ca_reduction)?;
        let (out, fw) = attention::fuse_branches(g, f_nl, f_l, &self.fusion_vars(cab)?)?;
        let trace = AttentionTrace { cab_index: cab, distance, fusion_w_nl: fw.w_nl, fusion_w_l: fw.w_l };
        Ok((out, trace))
    }

    /// Full network on N×Cin×H×W. Sizes the patch grid does not tile exactly
    /// are reflect-padded on the bottom/right and cropped back at the end.
    pub fn cola_forward(&self, x: Var) -> Result<(Var, Vec<AttentionTrace<T>>)> {
        let cfg = &self.weights.config;
        let g = self.graph;
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != cfg.in_channels {
            return Err(shape_err!("input has {c} channels, model expects {}", cfg.in_channels));
        }
        if h < cfg.patch_size || w < cfg.patch_size {
            return Err(shape_err!("input {h}×{w} smaller than patch size {}", cfg.patch_size));
        }
        let (hp, wp) = (covering_size(h, cfg.patch_size, cfg.patch_stride), covering_size(w, cfg.patch_size, cfg.patch_stride));
        let xin = if (hp, wp) != (h, w) { g.pad_reflect(x, hp - h, wp - w)? } else { x };

        let head = self.conv("head")?;
        let mut feat = g.conv2d(xin, head.weight, head.bias, 1)?;
        let mut traces = Vec::with_capacity(cfg.num_cab);
        for i in 0..cfg.num_cab {
            let (next, trace) = self.cab_forward(i, feat)?;
            feat = next;
            traces.push(trace);
        }
        let tail = self.conv("tail")?;
        let residual = g.conv2d(feat, tail.weight, tail.bias, 1)?;
        let out = g.add(xin, residual)?;
        let out = if (hp, wp) != (h, w) { g.crop(out, h, w)? } else { out };
        Ok((out, traces))
    }
}

/// Per-element mean squared error.
pub fn l2_loss<T: Real>(g: &Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// One inference tile and the attention it produced.
#[derive(Clone, Debug)]
pub struct TileTrace {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// One trace per block; batch item 0 of each trace belongs to this tile.
    pub traces: Vec<AttentionTrace<f32>>,
}

#[derive(Clone, Debug)]
pub struct Restoration {
    /// Restored 1×Cin×H×W image on the 0–255 scale.
    pub image: Tensor<f32>,
    pub tiles: Vec<TileTrace>,
}

fn tile_starts(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < n).collect();
    starts.push(n - tile);
    starts
}

/// Restore a 1×Cin×H×W image on the 0–255 scale. Large images run in
/// overlapping tiles whose outputs are averaged.
pub fn restore(weights: &ModelWeights<f32>, image: &Tensor<f32>) -> Result<Restoration> {
    let cfg = &weights.config;
    let (n, c, h, w) = image.dims4()?;
    if n != 1 {
        return Err(shape_err!("restore takes one image, got batch {n}"));
    }
    let tile_h = h.min(cfg.tile);
    let tile_w = w.min(cfg.tile);
    let mut boxes = Vec::new();
    for &top in &tile_starts(h, cfg.tile, cfg.tile_overlap) {
        for &left in &tile_starts(w, cfg.tile, cfg.tile_overlap) {
            boxes.push((top, left));
        }
    }
    let scale = 1.0f32 / 255.0;
    // summed residuals (output minus input) on the unit scale
    let mut acc = vec![0.0f32; c * h * w];
    let mut count = vec![0u32; h * w];
    let mut tiles = Vec::with_capacity(boxes.len());
    for &(top, left) in &boxes {
        let mut crop = Vec::with_capacity(c * tile_h * tile_w);
        for ch in 0..c {
            for y in top..top + tile_h {
                let base = (ch * h + y) * w + left;
                crop.extend(image.data()[base..base + tile_w].iter().map(|v| v * scale));
            }
        }
        let input = Tensor::new(&[1, c, tile_h, tile_w], crop)?;
        let g = Graph::<f32>::new();
        let fwd = Forward::new(&g, weights, Mode::Infer);
        let x = g.input(input);
        let (out, traces) = fwd.cola_forward(x)?;
        let out = g.value(out);
        let inp = g.value(x);
        for ch in 0..c {
            for y in 0..tile_h {
                for xx in 0..tile_w {
                    let i = (ch * tile_h + y) * tile_w + xx;
                    acc[(ch * h + top + y) * w + left + xx] += out.data()[i] - inp.data()[i];
                }
            }
        }
        for y in top..top + tile_h {
            count[y * w + left..y * w + left + tile_w].iter_mut().for_each(|v| *v += 1);
        }
        tiles.push(TileTrace { top, left, height: tile_h, width: tile_w, traces });
    }
    // residuals are averaged and added to the untouched input, so a zero
    // residual reproduces the input bit for bit
    let hw = h * w;
    let data = acc
        .iter()
        .zip(image.data())
        .enumerate()
        .map(|(i, (&r, &v))| v + r / count[i % hw] as f32 * 255.0)
        .collect();
    Ok(Restoration { image: Tensor::new(&[1, c, h, w], data)?, tiles })
}

/// Per-block heat maps in [0,1]: each tile contributes its heat value to the
/// pixels it covers; overlaps are averaged.
pub fn heat_maps(restoration: &Restoration) -> Result<Vec<Tensor<f32>>> {
    let (_, _, h, w) = restoration.image.dims4()?;
    let blocks = restoration.tiles.first().map_or(0, |t| t.traces.len());
    let mut maps = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut acc = vec![0.0f64; h * w];
        let mut count = vec![0u32; h * w];
        for t in &restoration.tiles {
            let tr = &t.traces[b];
            let c = tr.fusion_w_nl.shape()[1];
            let heat = attention::heat_map(&tr.fusion_w_nl.data()[..c], &tr.fusion_w_l.data()[..c])?;
            for y in t.top..t.top + t.height {
                for x in t.left..t.left + t.width {
                    acc[y * w + x] += heat;
                    count[y * w + x] += 1;
                }
            }
        }
        let data = acc.iter().zip(&count).map(|(&a, &k)| (a / k.max(1) as f64) as f32).collect();
        maps.push(Tensor::new(&[1, 1, h, w], data)?);
    }
    Ok(maps)
}
