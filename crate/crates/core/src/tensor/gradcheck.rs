//! Finite-difference verification of reverse-mode gradients.
//!
//! A test helper, public so integration suites can reuse it. Non-scalar
//! outputs are reduced with fixed pseudo-random weights so every output
//! element contributes.

use crate::error::{Error, Result};

use super::{Graph, NodeId, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Deterministic projection weights in [-1, 1].
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|k| ((k as f64 + 1.0) * 0.754_877_666).sin()).collect()
}

fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let w = projection(g.value(out).numel());
    let loss = g.dot_const(out, &w)?;
    Ok((g, ids, loss))
}

/// Checks every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coordinates(inputs, &build, &coords)
}

/// Checks at most `per_input` elements of each input, chosen by a seeded
/// partial shuffle; small inputs are checked exhaustively.
pub fn check_gradients_sampled<F>(inputs: &[Tensor<f64>], build: F, per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    use rand::seq::index::sample;
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .enumerate()
        .map(|(t, x)| {
            let mut rng = crate::gumbel::derive_rng(seed, t as u64, x.numel() as u64);
            let mut idx = sample(&mut rng, x.numel(), per_input.min(x.numel())).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coordinates(inputs, &build, &coords)
}

fn check_coordinates<F>(inputs: &[Tensor<f64>], build: &F, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (g, ids, loss) = evaluate(inputs, build)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let zeros = vec![0.0; inputs[t].numel()];
        let analytic = grads.get(*id).unwrap_or(&zeros).to_vec();
        for &k in &coords[t] {
            let orig = inputs[t].data()[k];
            perturbed[t].data_mut()[k] = orig + STEP;
            let up = evaluate(&perturbed, build)?;
            let f_up = up.0.value(up.2).item();
            perturbed[t].data_mut()[k] = orig - STEP;
            let down = evaluate(&perturbed, build)?;
            let f_down = down.0.value(down.2).item();
            perturbed[t].data_mut()[k] = orig;
            let numeric = (f_up - f_down) / (2.0 * STEP);
            let a = analytic[k];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite gradient at input {t}[{k}]")));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Uniform tensor in `[lo, hi)`.
pub fn random_tensor<R: rand::Rng>(rng: &mut R, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks.
pub fn random_signed<R: rand::Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Names of the operations covered by [`op_suite`].
pub const OPS: [&str; 17] = [
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "sigmoid",
    "add",
    "scale",
    "upsample",
    "global_avg_pool",
    "channel_mul",
    "bias_add",
    "concat",
    "channel_pad",
    "mix",
    "masked_softmax",
    "dot_const",
    "cross_entropy_2d",
];

/// Gradient-checks one operation on one random configuration.
pub fn check_op<R: rand::Rng>(op: &str, rng: &mut R) -> Result<GradCheckReport> {
    let b = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=5);
    let w = rng.gen_range(2..=5);
    let x = random_signed(rng, [b, c, h, w]);
    match op {
        "conv2d" => {
            let (k, d) = [(1, 1), (3, 1), (3, 2), (5, 1)][rng.gen_range(0..4)];
            let s = rng.gen_range(1..=2);
            let g = rng.gen_range(1..=2);
            let c_in = g * rng.gen_range(1..=2);
            let c_out = g * rng.gen_range(1..=2);
            let x = random_signed(rng, [b, c_in, s * h, s * w]);
            let wt = random_signed(rng, [c_out, c_in / g, k, k]);
            check_gradients(&[x, wt], |gr, ids| gr.conv2d_same(ids[0], ids[1], s, d, g))
        }
        "batchnorm_train" => {
            let b = b + 1;
            let x = random_signed(rng, [b, c, h, w]);
            let scale = random_tensor(rng, [1, 1, 1, c], 0.5, 1.5);
            let shift = random_signed(rng, [1, 1, 1, c]);
            check_gradients(&[x, scale, shift], |gr, ids| Ok(gr.batchnorm_train(ids[0], ids[1], ids[2])?.0))
        }
        "batchnorm_eval" => {
            let scale = random_tensor(rng, [1, 1, 1, c], 0.5, 1.5);
            let shift = random_signed(rng, [1, 1, 1, c]);
            let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            check_gradients(&[x, scale, shift], |gr, ids| gr.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var))
        }
        "relu" => check_gradients(&[x], |gr, ids| Ok(gr.relu(ids[0]))),
        "sigmoid" => check_gradients(&[x], |gr, ids| Ok(gr.sigmoid(ids[0]))),
        "add" => {
            let y = random_signed(rng, [b, c, h, w]);
            check_gradients(&[x, y], |gr, ids| gr.add(ids[0], ids[1]))
        }
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            check_gradients(&[x], |gr, ids| Ok(gr.scale(ids[0], f)))
        }
        "upsample" => {
            let oh = rng.gen_range(1..=3) * h + rng.gen_range(0..=1);
            let ow = rng.gen_range(1..=3) * w;
            check_gradients(&[x], |gr, ids| gr.upsample(ids[0], oh, ow))
        }
        "global_avg_pool" => check_gradients(&[x], |gr, ids| Ok(gr.global_avg_pool(ids[0]))),
        "channel_mul" => {
            let gate = random_signed(rng, [b, c, 1, 1]);
            check_gradients(&[x, gate], |gr, ids| gr.channel_mul(ids[0], ids[1]))
        }
        "bias_add" => {
            let bias = random_signed(rng, [1, 1, 1, c]);
            check_gradients(&[x, bias], |gr, ids| gr.bias_add(ids[0], ids[1]))
        }
        "concat" => {
            let c2 = rng.gen_range(1..=3);
            let y = random_signed(rng, [b, c2, h, w]);
            check_gradients(&[x, y], |gr, ids| gr.concat(&[ids[0], ids[1]]))
        }
        "channel_pad" => {
            let extra = rng.gen_range(1..=3);
            check_gradients(&[x], |gr, ids| gr.channel_pad(ids[0], c + extra))
        }
        "mix" => {
            let n = rng.gen_range(2..=4);
            let mut inputs: Vec<Tensor<f64>> = (0..n).map(|_| random_signed(rng, [b, c, h, w])).collect();
            inputs.push(random_tensor(rng, [1, 1, 1, n + 1], 0.0, 1.0));
            check_gradients(&inputs, |gr, ids| {
                let pairs: Vec<(usize, NodeId)> = (0..n).map(|k| (k + usize::from(k > 0), ids[k])).collect();
                gr.mix(&pairs, ids[n])
            })
        }
        "masked_softmax" => {
            let n = rng.gen_range(2..=13);
            let logits = random_tensor(rng, [1, 1, 1, n], -2.0, 2.0);
            let noise: Vec<f64> = (0..n).map(|_| crate::gumbel::gumbel(rng)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            let t = rng.gen_range(0.5..5.0);
            check_gradients(&[logits], |gr, ids| gr.masked_softmax(ids[0], &noise, &mask, t))
        }
        "dot_const" => {
            let coeffs: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            check_gradients(&[x], |gr, ids| gr.dot_const(ids[0], &coeffs))
        }
        "cross_entropy_2d" => {
            let k = rng.gen_range(2..=4);
            let logits = random_tensor(rng, [b, k, h, w], -2.0, 2.0);
            let ignore = k;
            let labels: Vec<usize> = (0..b * h * w)
                .map(|_| if rng.gen_bool(0.1) { ignore } else { rng.gen_range(0..k) })
                .collect();
            check_gradients(&[logits], |gr, ids| gr.cross_entropy_2d(ids[0], &labels, Some(ignore)))
        }
        other => Err(Error::InvalidArgument(format!("unknown op `{other}`"))),
    }
}

/// Runs `configs` random configurations of every operation; returns the
/// worst relative error per operation.
pub fn op_suite(seed: u64, configs: usize) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::with_capacity(OPS.len());
    for (i, op) in OPS.iter().enumerate() {
        let mut worst = GradCheckReport {
            max_rel_err: 0.0,
            checked: 0,
        };
        for cfg in 0..configs {
            let mut rng = crate::gumbel::derive_rng(seed, i as u64, cfg as u64);
            let r = check_op(op, &mut rng)?;
            worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            worst.checked += r.checked;
        }
        out.push((*op, worst));
    }
    Ok(out)
}
