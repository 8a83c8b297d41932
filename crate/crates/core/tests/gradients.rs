//! Tape gradients against central differences, in f64.

use colanet::attention::{
    channel_attention, fuse_branches, local_attention, nonlocal_attention, AffineVars, ChannelAttentionVars, ConvVars,
    FusionVars, LocalVars, NonLocalOptions, NonLocalVars,
};
use colanet::degradation::Rng;
use colanet::gradcheck::grad_check;
use colanet::network::{l2_loss, Forward, Mode, ModelConfig, ModelWeights};
use colanet::{Graph, PatchGeometry, Result, Tensor, Var};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 7);
    Tensor::from_fn(shape, |_| std * rng.gaussian())
}

/// Values bounded away from zero so relu kinks stay out of reach of the probe.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed, 9);
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_range(0.2, 1.5);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// Reduce any output to a scalar with fixed random weights.
fn project(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(randn(&g.shape(y), seed, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check(name: &str, params: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>) {
    let report = grad_check(f, params, EPS, TOL, 40).unwrap();
    assert!(report.passed(), "{name}: rel error {:.2e} at {:?}", report.max_rel_error, report.worst);
}

#[test]
fn conv2d_all_inputs() {
    let ps = [randn(&[2, 3, 5, 6], 1, 1.0), randn(&[4, 3, 3, 3], 2, 0.5), randn(&[4], 3, 0.5)];
    for pad in [0, 1] {
        check("conv2d", &ps, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], pad)?;
            project(g, y, 4)
        });
    }
}

#[test]
fn batch_norm_train_and_infer() {
    let ps = [randn(&[3, 2, 3, 3], 5, 2.0), randn(&[2], 6, 1.0), randn(&[2], 7, 1.0)];
    check("bn_train", &ps, |g, v| {
        let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 8)
    });
    let rm = Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap();
    let rv = Tensor::from_f64(&[2], &[1.5, 0.7]).unwrap();
    check("bn_infer", &ps, |g, v| {
        let y = g.batch_norm_infer(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
        project(g, y, 8)
    });
}

#[test]
fn pointwise_activations() {
    let ps = [away_from_zero(&[2, 3, 4], 9)];
    check("relu", &ps, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 10)
    });
    check("sigmoid", &ps, |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 10)
    });
}

#[test]
fn products() {
    let ps = [randn(&[3, 4], 11, 1.0), randn(&[4, 5], 12, 1.0)];
    check("matmul", &ps, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 13)
    });
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let ps = [randn(&a, 14, 1.0), randn(&b, 15, 1.0)];
        check("bmm", &ps, |g, v| {
            let y = g.bmm(v[0], v[1], ta, tb)?;
            project(g, y, 16)
        });
    }
}

#[test]
fn softmax_every_axis() {
    let ps = [randn(&[2, 3, 4], 17, 1.5)];
    for axis in 0..3 {
        check("softmax", &ps, |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 18)
        });
    }
}

#[test]
fn pooling_affine_and_scaling() {
    let ps = [randn(&[2, 3, 4, 4], 19, 1.0), randn(&[5, 3], 20, 1.0), randn(&[5], 21, 1.0), randn(&[2, 3], 22, 1.0)];
    check("gap+linear", &ps, |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let y = g.linear(p, v[1], v[2])?;
        project(g, y, 23)
    });
    check("channel_scale", &ps, |g, v| {
        let y = g.channel_scale(v[0], v[3])?;
        project(g, y, 24)
    });
}

#[test]
fn elementwise_and_structural() {
    let ps = [randn(&[2, 3], 25, 1.0), randn(&[2, 3], 26, 1.0)];
    check("add/sub/mul/scale", &ps, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(v[0], v[1])?;
        let m = g.mul(a, s)?;
        let y = g.scale(m, 0.7);
        project(g, y, 27)
    });
    check("stack/select", &ps, |g, v| {
        let st = g.stack(&[v[0], v[1]])?;
        let sm = g.softmax(st, 0)?;
        let a = g.select(sm, 0)?;
        let b = g.select(st, 1)?;
        let y = g.mul(a, b)?;
        project(g, y, 28)
    });
    check("mean/reshape", &ps, |g, v| {
        let r = g.reshape(v[0], &[3, 2])?;
        let sq = g.mul(r, r)?;
        Ok(g.mean(sq))
    });
}

#[test]
fn patches_padding_and_crop() {
    let ps = [randn(&[2, 2, 6, 7], 29, 1.0)];
    check("pad/crop", &ps, |g, v| {
        let p = g.pad_reflect(v[0], 3, 2)?;
        let c = g.crop(p, 8, 8)?;
        project(g, c, 30)
    });
    let geom = PatchGeometry::square(2, 7, 7, 3, 2).unwrap();
    let xs = [randn(&[2, 2, 7, 7], 31, 1.0)];
    check("unfold/fold", &xs, |g, v| {
        let u = g.unfold(v[0], geom)?;
        let sq = g.mul(u, u)?;
        let f = g.fold(sq, geom)?;
        project(g, f, 32)
    });
}

#[test]
fn l2_loss_matches_closed_form() {
    let ps = [randn(&[1, 1, 3, 3], 33, 1.0), randn(&[1, 1, 3, 3], 34, 1.0)];
    check("l2", &ps, |g, v| l2_loss(g, v[0], v[1]));
}

fn conv_params(c: usize, k: usize, seed: u64) -> [Tensor<f64>; 2] {
    [randn(&[c, c, k, k], seed, (1.0 / (c * k * k) as f64).sqrt()), randn(&[c], seed + 1, 0.1)]
}

fn affine_params(din: usize, dout: usize, seed: u64) -> [Tensor<f64>; 2] {
    [randn(&[dout, din], seed, (1.0 / din as f64).sqrt()), randn(&[dout], seed + 1, 0.1)]
}

#[test]
fn nonlocal_branch() {
    let c = 3;
    let geom = PatchGeometry::square(c, 7, 7, 3, 2).unwrap();
    let mut ps = vec![randn(&[2, c, 7, 7], 40, 1.0)];
    for s in [41, 43, 45] {
        ps.extend(conv_params(c, 1, s));
    }
    for scaled in [false, true] {
        check("nonlocal", &ps, |g, v| {
            let conv = |i: usize| ConvVars { weight: v[i], bias: v[i + 1] };
            let p = NonLocalVars { theta: conv(1), phi: conv(3), g: conv(5) };
            let (y, _) = nonlocal_attention(g, v[0], &p, geom, NonLocalOptions { scaled })?;
            project(g, y, 47)
        });
    }
}

fn gate(v: &[Var], i: usize) -> ChannelAttentionVars {
    ChannelAttentionVars {
        fc1: AffineVars { weight: v[i], bias: v[i + 1] },
        fc2: AffineVars { weight: v[i + 2], bias: v[i + 3] },
    }
}

#[test]
fn channel_gate() {
    let (c, r) = (4, 2);
    let mut ps = vec![randn(&[2, c, 3, 3], 50, 1.0)];
    ps.extend(affine_params(c, c / r, 51));
    ps.extend(affine_params(c / r, c, 53));
    check("channel_attention", &ps, |g, v| {
        let y = channel_attention(g, v[0], &gate(v, 1), r)?;
        project(g, y, 55)
    });
}

#[test]
fn local_branch() {
    let (c, r) = (4, 2);
    let mut ps = vec![randn(&[1, c, 5, 5], 60, 1.0)];
    for s in [61, 63, 65] {
        ps.extend(conv_params(c, 3, s));
    }
    for s in [67, 69, 71, 73] {
        let (din, dout) = if s % 4 == 3 { (c, c / r) } else { (c / r, c) };
        ps.extend(affine_params(din, dout, s));
    }
    check("local_attention", &ps, |g, v| {
        let conv = |i: usize| ConvVars { weight: v[i], bias: v[i + 1] };
        let p = LocalVars { short: conv(1), long1: conv(3), long2: conv(5), short_ca: gate(v, 7), long_ca: gate(v, 11) };
        let y = local_attention(g, v[0], &p, r)?;
        project(g, y, 75)
    });
}

#[test]
fn branch_fusion() {
    let c = 3;
    let mut ps = vec![randn(&[2, c, 4, 4], 80, 1.0), randn(&[2, c, 4, 4], 81, 1.0)];
    ps.extend(affine_params(c, c, 82));
    ps.extend(affine_params(c, c, 84));
    check("fuse_branches", &ps, |g, v| {
        let p = FusionVars {
            fc1: AffineVars { weight: v[2], bias: v[3] },
            fc2: AffineVars { weight: v[4], bias: v[5] },
        };
        let (y, _) = fuse_branches(g, v[0], v[1], &p)?;
        project(g, y, 86)
    });
}

fn micro(variant: ModelConfig) -> ModelWeights<f64> {
    let cfg = ModelConfig { num_cab: 1, channels: 8, fem_depth: 2, ..variant };
    ModelWeights::init(&cfg, 3).unwrap()
}

/// Checks d/du of loss(θ0 + s·u) at u = 0. The shrunken coordinates keep the
/// probe from stepping across relu kinks buried in hidden layers, which no
/// choice of input can avoid at these widths.
fn whole_network(weights: ModelWeights<f64>) {
    const S: f64 = 0.05;
    let theta0: Vec<Tensor<f64>> = weights.params().iter().map(|p| p.value.clone()).collect();
    let u: Vec<Tensor<f64>> = theta0.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let x = randn(&[2, 1, 12, 12], 90, 0.5);
    let target = randn(&[2, 1, 12, 12], 91, 0.5);
    check("network", &u, |g, v| {
        let mut leaves = Vec::with_capacity(v.len());
        for (t0, &ui) in theta0.iter().zip(v) {
            let base = g.input(t0.clone());
            let step = g.scale(ui, S);
            leaves.push(g.add(base, step)?);
        }
        let fwd = Forward::with_vars(g, &weights, leaves, Mode::Train)?;
        let input = g.input(x.clone());
        let (y, _) = fwd.cola_forward(input)?;
        let t = g.input(target.clone());
        l2_loss(g, y, t)
    });
}

#[test]
fn basic_network_end_to_end() {
    whole_network(micro(ModelConfig::basic()));
}

#[test]
fn enhanced_network_end_to_end() {
    whole_network(micro(ModelConfig::enhanced()));
}
