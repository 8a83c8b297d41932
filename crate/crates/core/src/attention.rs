//! The dual-branch fusion module: patch-wise non-local attention, multi-scale
//! local channel attention, and the adaptive softmax fusion of the two.

use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::patch::PatchGeometry;
use crate::tensor::{Real, Tensor};

/// Weight and bias of a convolution already bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Weight (Dout×Din) and bias of an affine map bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

/// The three 1×1 embeddings θ, φ, g of the non-local branch.
#[derive(Clone, Copy, Debug)]
pub struct NonLocalVars {
    pub theta: ConvVars,
    pub phi: ConvVars,
    pub g: ConvVars,
}

/// Squeeze (C→C/r) and excite (C/r→C) maps of a channel gate.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionVars {
    pub fc1: AffineVars,
    pub fc2: AffineVars,
}

/// Local branch: a one-conv path and a two-conv path, each channel-gated.
#[derive(Clone, Copy, Debug)]
pub struct LocalVars {
    pub short: ConvVars,
    pub long1: ConvVars,
    pub long2: ConvVars,
    pub short_ca: ChannelAttentionVars,
    pub long_ca: ChannelAttentionVars,
}

/// The two independent C→C maps producing the branch logits.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub fc1: AffineVars,
    pub fc2: AffineVars,
}

/// What one collaborative block looked at: the patch affinity matrix and the
/// per-channel branch weights.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T = f32> {
    pub cab_index: usize,
    /// N×P×P, each row a softmax over key patches.
    pub distance: Tensor<T>,
    /// N×C weight of the non-local branch.
    pub fusion_w_nl: Tensor<T>,
    /// N×C weight of the local branch.
    pub fusion_w_l: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FusionWeights<T = f32> {
    pub w_nl: Tensor<T>,
    pub w_l: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NonLocalOptions {
    /// Divide patch similarities by sqrt(patch vector length).
    pub scaled: bool,
}

/// Patch-wise non-local attention. Returns the updated features and the N×P×P
/// affinity matrix.
pub fn nonlocal_attention<T: Real>(
    g: &Graph<T>,
    x: Var,
    p: &NonLocalVars,
    geometry: PatchGeometry,
    opts: NonLocalOptions,
) -> Result<(Var, Tensor<T>)> {
    let (_, c, h, w) = g.value(x).dims4()?;
    if (geometry.channels, geometry.height, geometry.width) != (c, h, w) {
        return Err(shape_err!(
            "patch geometry {}×{}×{} incompatible with features {c}×{h}×{w}",
            geometry.channels,
            geometry.height,
            geometry.width
        ));
    }
    for conv in [p.theta, p.phi, p.g] {
        let ws = g.shape(conv.weight);
        if ws != [c, c, 1, 1] {
            return Err(shape_err!("embedding weight {ws:?} must be {c}×{c}×1×1"));
        }
    }
    let q = g.conv2d(x, p.theta.weight, p.theta.bias, 0)?;
    let k = g.conv2d(x, p.phi.weight, p.phi.bias, 0)?;
    let v = g.conv2d(x, p.g.weight, p.g.bias, 0)?;
    let uq = g.unfold(q, geometry)?;
    let uk = g.unfold(k, geometry)?;
    let uv = g.unfold(v, geometry)?;
    let mut sim = g.bmm(uq, uk, false, true)?;
    if opts.scaled {
        sim = g.scale(sim, T::lit(1.0 / (geometry.patch_len() as f64).sqrt()));
    }
    let m = g.softmax(sim, 2)?;
    let updated = g.bmm(m, uv, false, false)?;
    let out = g.fold(updated, geometry)?;
    let distance = g.value(m).clone();
    Ok((out, distance))
}

/// Squeeze-and-excitation gate: `x · sigmoid(fc2(relu(fc1(gap(x)))))`.
pub fn channel_attention<T: Real>(g: &Graph<T>, x: Var, p: &ChannelAttentionVars, reduction: usize) -> Result<Var> {
    let (_, c, _, _) = g.value(x).dims4()?;
    if reduction == 0 || c % reduction != 0 {
        return Err(config_err!("channel-attention reduction {reduction} does not divide {c} channels"));
    }
    let mid = c / reduction;
    let s1 = g.shape(p.fc1.weight);
    let s2 = g.shape(p.fc2.weight);
    if s1 != [mid, c] || s2 != [c, mid] {
        return Err(shape_err!("channel attention maps {s1:?}/{s2:?} do not fit C={c}, r={reduction}"));
    }
    let v = g.global_avg_pool(x)?;
    let z = g.linear(v, p.fc1.weight, p.fc1.bias)?;
    let z = g.relu(z);
    let s = g.linear(z, p.fc2.weight, p.fc2.bias)?;
    let s = g.sigmoid(s);
    g.channel_scale(x, s)
}

/// Two-path local attention: a 3×3 conv + relu path and a conv–relu–conv path
/// (effective 5×5 field), each gated by its own channel attention, then summed.
pub fn local_attention<T: Real>(g: &Graph<T>, x: Var, p: &LocalVars, reduction: usize) -> Result<Var> {
    let a = g.conv2d(x, p.short.weight, p.short.bias, 1)?;
    let a = g.relu(a);
    let b = g.conv2d(x, p.long1.weight, p.long1.bias, 1)?;
    let b = g.relu(b);
    let b = g.conv2d(b, p.long2.weight, p.long2.bias, 1)?;
    let a = channel_attention(g, a, &p.short_ca, reduction)?;
    let b = channel_attention(g, b, &p.long_ca, reduction)?;
    g.add(a, b)
}

/// Adaptive fusion: per-channel softmax over the two branch logits computed
/// from the pooled sum of both branches.
pub fn fuse_branches<T: Real>(g: &Graph<T>, f_nl: Var, f_l: Var, p: &FusionVars) -> Result<(Var, FusionWeights<T>)> {
    let (sa, sb) = (g.shape(f_nl), g.shape(f_l));
    if sa != sb {
        return Err(shape_err!("branch shapes differ: {sa:?} vs {sb:?}"));
    }
    let sum = g.add(f_nl, f_l)?;
    let v = g.global_avg_pool(sum)?;
    let l1 = g.linear(v, p.fc1.weight, p.fc1.bias)?;
    let l2 = g.linear(v, p.fc2.weight, p.fc2.bias)?;
    let logits = g.stack(&[l1, l2])?;
    let w = g.softmax(logits, 1)?;
    let w_nl = g.select(w, 0)?;
    let w_l = g.select(w, 1)?;
    let a = g.channel_scale(f_nl, w_nl)?;
    let b = g.channel_scale(f_l, w_l)?;
    let out = g.add(a, b)?;
    let weights = FusionWeights { w_nl: g.value(w_nl).clone(), w_l: g.value(w_l).clone() };
    Ok((out, weights))
}

/// Fraction of channels whose local weight is at least the non-local one.
pub fn heat_map<T: Real>(w_nl: &[T], w_l: &[T]) -> Result<f64> {
    if w_nl.len() != w_l.len() {
        return Err(shape_err!("heat map weights differ in length: {} vs {}", w_nl.len(), w_l.len()));
    }
    if w_nl.is_empty() {
        return Err(shape_err!("heat map of empty weight vectors"));
    }
    let local = w_nl.iter().zip(w_l).filter(|(nl, l)| l >= nl).count();
    Ok(local as f64 / w_nl.len() as f64)
}
