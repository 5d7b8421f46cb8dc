//! Finite-difference checks of every differentiable op and of whole
//! networks run with the smooth proxy spike.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{fd_check_with, Graph, Var};
use crate::error::{Error, Result};
use crate::network::{combine_outputs, BlockSpec, Mode, Network, NetworkSpec, BN_EPS};
use crate::neuron::{lif_charge, lif_reset, proxy_fire_with, FireMode, NeuronConfig, SurrogateSpec};
use crate::tensor::Tensor;

pub const OP_TOL: f64 = 1e-5;
pub const NET_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

/// Every op covered by [`op_check`].
pub const OPS: &[&str] = &[
    "add",
    "scale",
    "mul",
    "sum",
    "reshape",
    "rows",
    "concat",
    "repeat",
    "time_mean",
    "linear",
    "conv2d",
    "global_avg_pool",
    "batch_norm",
    "batch_norm_eval",
    "softmax_cross_entropy",
    "charge",
    "fire",
    "reset",
];

/// Deliberate corruption used to confirm the suite catches bad gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Scales the surrogate derivative used by the fire step by 1.1.
    Surrogate,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = rand_distr::StandardNormal;
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(dist))
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// FD check of `sum(op(inputs) * r)` with respect to all inputs at once,
/// where `r` is a fixed random tensor.
fn check_inputs<F>(seed: u64, inputs: Vec<Tensor>, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let x = Tensor::new(vec![flat.len()], flat)?;
    let mut weights: Option<Tensor> = None;
    let f = |x: &Tensor| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let mut off = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            vars.push(g.leaf(Tensor::new(s.clone(), x.data()[off..off + n].to_vec())?));
            off += n;
        }
        let out = build(&mut g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            normal(&mut r, g.shape(out))
        });
        let w = g.constant(w.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let grads = g.backward(loss, &mut Default::default())?;
        let mut flat = Vec::with_capacity(x.numel());
        for v in &vars {
            match grads.wrt(*v) {
                Some(gv) => flat.extend_from_slice(gv),
                None => flat.extend(std::iter::repeat_n(0.0, g.value(*v).numel())),
            }
        }
        Ok((g.value(loss).data()[0], flat))
    };
    Ok(fd_check_with(f, &x, FD_STEP)?.max_rel_err)
}

fn surrogate_for(seed: u64) -> SurrogateSpec {
    match seed % 3 {
        0 => SurrogateSpec::Triangular { gamma: 1.0 },
        1 => SurrogateSpec::Rectangular { a: 1.0 },
        _ => SurrogateSpec::TanhLike { k: 0.5 },
    }
}

/// Points where the surrogate derivative is discontinuous.
fn kinks(sg: &SurrogateSpec, v_th: f64) -> Vec<f64> {
    match *sg {
        SurrogateSpec::Triangular { .. } => vec![0.0, v_th, 2.0 * v_th],
        SurrogateSpec::Rectangular { a } => vec![v_th - a / 2.0, v_th + a / 2.0],
        SurrogateSpec::TanhLike { .. } => vec![],
    }
}

/// Samples membrane values spread around the threshold but at least `gap`
/// away from any kink, where central differences are not meaningful.
fn membrane(rng: &mut ChaCha8Rng, shape: &[usize], sg: &SurrogateSpec, v_th: f64) -> Tensor {
    let gap = 1e-3;
    let ks = kinks(sg, v_th);
    Tensor::from_fn(shape, |_| loop {
        let u = v_th + 1.5 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        if ks.iter().all(|k| (u - k).abs() > gap) {
            break u;
        }
    })
}

/// Runs the FD check of one op on a random configuration drawn from `seed`.
pub fn op_check(op: &str, seed: u64, mutation: Mutation) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let r = &mut rng;
    let err = match op {
        "add" => {
            let rank = r.random_range(1..=4);
            let s = dims(r, rank, 4);
            let inputs = vec![normal(r, &s), normal(r, &s)];
            check_inputs(seed, inputs, |g, v| g.add(v[0], v[1]))?
        }
        "scale" => {
            let s = dims(r, 3, 4);
            let factor: f64 = r.random_range(-3.0..3.0);
            check_inputs(seed, vec![normal(r, &s)], move |g, v| Ok(g.scale(v[0], factor)))?
        }
        "mul" => {
            let s = dims(r, 3, 4);
            let inputs = vec![normal(r, &s), normal(r, &s)];
            check_inputs(seed, inputs, |g, v| g.mul(v[0], v[1]))?
        }
        "sum" => {
            let s = dims(r, 3, 5);
            check_inputs(seed, vec![normal(r, &s)], |g, v| Ok(g.sum(v[0])))?
        }
        "reshape" => {
            let s = dims(r, 3, 4);
            let n: usize = s.iter().product();
            check_inputs(seed, vec![normal(r, &s)], move |g, v| g.reshape(v[0], &[n]))?
        }
        "rows" => {
            let mut s = dims(r, 3, 4);
            s[0] += 1;
            let start = r.random_range(0..s[0]);
            let len = r.random_range(1..=s[0] - start);
            check_inputs(seed, vec![normal(r, &s)], move |g, v| g.rows(v[0], start, len))?
        }
        "concat" => {
            let tail = dims(r, 2, 3);
            let parts = r.random_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = vec![r.random_range(1..=3)];
                    s.extend(&tail);
                    normal(r, &s)
                })
                .collect();
            check_inputs(seed, inputs, |g, v| g.concat(v))?
        }
        "repeat" => {
            let s = dims(r, 3, 3);
            let times = r.random_range(1..=4);
            check_inputs(seed, vec![normal(r, &s)], move |g, v| g.repeat(v[0], times))?
        }
        "time_mean" => {
            let steps = r.random_range(1..=4);
            let mut s = dims(r, 2, 4);
            s[0] *= steps;
            check_inputs(seed, vec![normal(r, &s)], move |g, v| g.time_mean(v[0], steps))?
        }
        "linear" => {
            let (b, i, o) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=4));
            let inputs = vec![normal(r, &[b, i]), normal(r, &[o, i]), normal(r, &[o])];
            check_inputs(seed, inputs, |g, v| g.linear(v[0], v[1], v[2]))?
        }
        "conv2d" => {
            let k = if r.random_bool(0.5) { 3 } else { 1 };
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=k / 2);
            let (b, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let h = r.random_range(k.max(2)..=6);
            let w = r.random_range(k.max(2)..=6);
            let inputs = vec![normal(r, &[b, ci, h, w]), normal(r, &[co, ci, k, k])];
            check_inputs(seed, inputs, move |g, v| g.conv2d(v[0], v[1], stride, pad))?
        }
        "global_avg_pool" => {
            let s = dims(r, 4, 4);
            check_inputs(seed, vec![normal(r, &s)], |g, v| g.global_avg_pool(v[0]))?
        }
        "batch_norm" => {
            let (n, c) = (r.random_range(2..=4), r.random_range(1..=3));
            let (h, w) = (r.random_range(1..=3), r.random_range(1..=3));
            let inputs = vec![normal(r, &[n, c, h, w]), normal(r, &[c]), normal(r, &[c])];
            check_inputs(seed, inputs, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BN_EPS)?.0))?
        }
        "batch_norm_eval" => {
            let s = dims(r, 4, 3);
            let c = s[1];
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
            let inputs = vec![normal(r, &s), normal(r, &[c]), normal(r, &[c])];
            check_inputs(seed, inputs, move |g, v| {
                g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS)
            })?
        }
        "softmax_cross_entropy" => {
            let (b, c) = (r.random_range(1..=5), r.random_range(2..=6));
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            check_inputs(seed, vec![normal(r, &[b, c])], move |g, v| {
                g.softmax_cross_entropy(v[0], &labels)
            })?
        }
        "charge" => {
            let s = dims(r, 2, 4);
            let cfg = NeuronConfig {
                tau: r.random_range(0.1..0.95),
                ..NeuronConfig::default()
            };
            let inputs = vec![normal(r, &s), normal(r, &s)];
            check_inputs(seed, inputs, move |g, v| lif_charge(g, Some(v[0]), v[1], &cfg))?
        }
        "fire" => {
            let s = dims(r, 2, 5);
            let sg = surrogate_for(seed);
            let v_th = 1.0;
            let boost = if mutation == Mutation::Surrogate { 1.1 } else { 1.0 };
            let derivative: Arc<dyn Fn(f64) -> f64> = Arc::new(move |u| boost * sg.grad(u, v_th));
            let u = membrane(r, &s, &sg, v_th);
            check_inputs(seed, vec![u], move |g, v| {
                Ok(proxy_fire_with(g, v[0], |u| sg.antiderivative(u, v_th), derivative.clone()))
            })?
        }
        "reset" => {
            let s = dims(r, 2, 4);
            let cfg = NeuronConfig::default();
            let o = Tensor::from_fn(&s, |_| r.random_range(0.0..1.0));
            let inputs = vec![normal(r, &s), o];
            check_inputs(seed, inputs, move |g, v| lif_reset(g, v[0], v[1], &cfg))?
        }
        other => return Err(Error::Input(format!("no gradient check for op {other:?}"))),
    };
    Ok(CheckOutcome {
        name: op.to_string(),
        seed,
        max_rel_err: err,
        tol: OP_TOL,
    })
}

/// Checks every op in [`OPS`] for seeds `0..seeds`.
pub fn op_suite(seeds: u64, mutation: Mutation) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(OPS.len() * seeds as usize);
    for op in OPS {
        for seed in 0..seeds {
            out.push(op_check(op, seed, mutation)?);
        }
    }
    Ok(out)
}

/// Three plain blocks on a small input.
pub fn three_block_spec(mode: Mode) -> NetworkSpec {
    NetworkSpec {
        in_channels: 2,
        input_size: [6, 6],
        classes: 3,
        timesteps: 3,
        mode,
        blocks: vec![
            BlockSpec::plain(2, 4, 1),
            BlockSpec::plain(4, 4, 2),
            BlockSpec::plain(4, 6, 1),
        ],
    }
}

fn proxy_net(spec: NetworkSpec, sg: SurrogateSpec, seed: u64) -> Result<Network> {
    let mut net = Network::build(spec, NeuronConfig::default(), sg, seed)?;
    net.set_fire_mode(FireMode::Proxy);
    net.set_training(true);
    Ok(net)
}

fn batch_for(spec: &NetworkSpec, batch: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4000);
    let shape = [batch, spec.in_channels, spec.input_size[0], spec.input_size[1]];
    let x = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
    let labels = (0..batch).map(|i| i % spec.classes).collect();
    (x, labels)
}

fn net_loss(net: &Network, g: &mut Graph, x: &Tensor, labels: &[usize], lambda: f64) -> Result<Var> {
    let (trace, _) = net.trace(g, x, true)?;
    let out = combine_outputs(g, &trace, lambda)?;
    g.softmax_cross_entropy(out, labels)
}

/// End-to-end FD check of a proxy-mode network with every head active.
///
/// Compares the analytic gradient of the combined cross-entropy against
/// central differences on `coords_per_param` random coordinates of every
/// parameter tensor.
pub fn proxy_net_check(
    name: &str,
    spec: NetworkSpec,
    sg: SurrogateSpec,
    seed: u64,
    coords_per_param: usize,
) -> Result<CheckOutcome> {
    let lambda = 0.25;
    let mut net = proxy_net(spec, sg, seed)?;
    let (x, labels) = batch_for(net.spec(), 2, seed);
    let mut g = Graph::new();
    let loss = net_loss(&net, &mut g, &x, &labels, lambda)?;
    net.params_mut().zero_grad();
    g.backward(loss, net.params_mut())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc00d_0000);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        let numel = net.params().get(id).value.numel();
        let picks: Vec<usize> = if numel <= coords_per_param {
            (0..numel).collect()
        } else {
            (0..coords_per_param).map(|_| rng.random_range(0..numel)).collect()
        };
        for i in picks {
            let analytic = net.params().get(id).grad[i];
            let orig = net.params().get(id).value.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                net.params_mut().get_mut(id).value.data_mut()[i] = v;
                let mut g = Graph::no_grad();
                let l = net_loss(&net, &mut g, &x, &labels, lambda)?;
                Ok(g.value(l).data()[0])
            };
            let plus = eval_at(orig + FD_STEP)?;
            let minus = eval_at(orig - FD_STEP)?;
            net.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("{name}: loss near {}", net.params().get(id).name)));
            }
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        seed,
        max_rel_err: worst,
        tol: NET_TOL,
    })
}

/// Proxy-network checks on the three-block net with each surrogate and on
/// the eight-block reference topology.
pub fn proxy_net_suite(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let sg = surrogate_for(seed);
        out.push(proxy_net_check(
            &format!("proxy-net/3-block/{}", sg.name()),
            three_block_spec(Mode::Shortcut),
            sg,
            seed,
            6,
        )?);
    }
    let mut deep = NetworkSpec::deep8(1, [8, 8], 4, Mode::Shortcut);
    deep.timesteps = 2;
    out.push(proxy_net_check(
        "proxy-net/deep8/triangular",
        deep,
        SurrogateSpec::default(),
        0,
        3,
    )?);
    Ok(out)
}

/// Largest absolute difference between the first conv's gradient from one
/// backward of the combined loss and the sum of per-branch backward passes
/// seeded with each branch's share of the output gradient.
pub fn branch_decomposition_gap(seed: u64, lambda: f64) -> Result<f64> {
    let mut net = proxy_net(three_block_spec(Mode::Shortcut), SurrogateSpec::default(), seed)?;
    let (x, labels) = batch_for(net.spec(), 3, seed);
    let first = net
        .params()
        .find("block.1.conv1.weight")
        .ok_or_else(|| Error::State("network has no first conv".into()))?;

    let mut g = Graph::new();
    let (trace, _) = net.trace(&mut g, &x, true)?;
    let out = combine_outputs(&mut g, &trace, lambda)?;
    let loss = g.softmax_cross_entropy(out, &labels)?;
    net.params_mut().zero_grad();
    g.backward(loss, net.params_mut())?;
    let joint = net.params().get(first).grad.clone();

    // dL/do_final for mean softmax cross-entropy: (softmax - onehot) / batch.
    let logits = g.value(out);
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut d_out = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..c {
            let p = (row[j] - m).exp() / z;
            d_out[i * c + j] = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    let mut summed = vec![0.0; joint.len()];
    let n = trace.b.len();
    for (l, &bl) in trace.b.iter().enumerate() {
        let weight = if l + 1 == n { 1.0 } else { lambda };
        let seed_grad = d_out.iter().map(|d| weight * d).collect();
        net.params_mut().zero_grad();
        g.backward_seeded(bl, seed_grad, net.params_mut())?;
        for (s, v) in summed.iter_mut().zip(&net.params().get(first).grad) {
            *s += v;
        }
    }
    Ok(joint
        .iter()
        .zip(&summed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_seeds() {
        for op in OPS {
            for seed in 0..3 {
                let r = op_check(op, seed, Mutation::None).unwrap();
                assert!(r.passed(), "{op} seed {seed}: {}", r.max_rel_err);
            }
        }
    }

    #[test]
    fn surrogate_mutation_is_caught() {
        let caught = (0..6).any(|s| !op_check("fire", s, Mutation::Surrogate).unwrap().passed());
        assert!(caught);
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(op_check("nope", 0, Mutation::None).is_err());
    }

    #[test]
    fn small_proxy_net_passes() {
        let r = proxy_net_check(
            "t",
            three_block_spec(Mode::Shortcut),
            SurrogateSpec::TanhLike { k: 0.5 },
            1,
            2,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_err);
    }

    #[test]
    fn decomposition_gap_is_tiny() {
        assert!(branch_decomposition_gap(0, 0.25).unwrap() < 1e-10);
    }
}
