use rand::Rng;

use super::gradcheck::{op_suite, random_signed, random_tensor};
use super::*;
use crate::gumbel::derive_rng;
use crate::search_space::CANDIDATES;

#[test]
fn identity_pointwise_conv() {
    let mut rng = derive_rng(1, 0, 0);
    let x = random_tensor(&mut rng, [2, 3, 4, 5], -1.0, 1.0);
    let w = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let wi = g.constant(w);
    let y = g.conv2d(xi, wi, 1, 1, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_matches_reference_on_candidate_configs() {
    let mut rng = derive_rng(2, 0, 0);
    for c in CANDIDATES.iter().filter(|c| !c.is_skip) {
        for s in [1, 2] {
            let c_in = 2 * rng.gen_range(1..=3);
            let hidden = c.expansion * c_in;
            let h = s * rng.gen_range(2..=6);
            let w = s * rng.gen_range(2..=6);
            let x = random_tensor(&mut rng, [2, c_in, h, w], -1.0, 1.0);
            // expansion, depthwise, projection stages of the candidate
            let stages = [
                (c_in, hidden, 1, 1, 1, c.groups),
                (hidden, hidden, c.kernel, s, c.dilation, hidden),
                (hidden, 2 * c.groups, 1, 1, 1, c.groups),
            ];
            let mut cur = x;
            for (ci, co, k, st, d, g) in stages {
                let wt = random_tensor(&mut rng, [co, ci / g, k, k], -1.0, 1.0);
                let pad = d * (k - 1) / 2;
                let mut gr = Graph::new();
                let xi = gr.constant(cur.clone());
                let wi = gr.constant(wt.clone());
                let y = gr.conv2d(xi, wi, st, d, g, pad).unwrap();
                let reference = conv2d_reference(&cur, &wt, st, d, g, pad).unwrap();
                assert_eq!(gr.shape(y), reference.shape());
                assert!(gr.value(y).max_abs_diff(&reference) < 1e-10, "{c} s{s}");
                cur = reference;
            }
        }
    }
}

#[test]
fn grouped_conv_is_split_and_concat() {
    let mut rng = derive_rng(3, 0, 0);
    let x = random_tensor(&mut rng, [1, 4, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, [6, 2, 3, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let wi = g.constant(w.clone());
    let grouped = g.conv2d(xi, wi, 1, 2, 2, 2).unwrap();
    let half = |t: &Tensor<f64>, lo: usize, n: usize| Tensor::from_fn([t.shape()[0], n, t.shape()[2], t.shape()[3]], |[b, c, h, ww]| t.at([b, lo + c, h, ww]));
    let x0 = g.constant(half(&x, 0, 2));
    let x1 = g.constant(half(&x, 2, 2));
    let w0 = g.constant(half(&w.clone().reshape([1, 6, 2, 9]).unwrap(), 0, 3).reshape([3, 2, 3, 3]).unwrap());
    let w1 = g.constant(half(&w.reshape([1, 6, 2, 9]).unwrap(), 3, 3).reshape([3, 2, 3, 3]).unwrap());
    let y0 = g.conv2d(x0, w0, 1, 2, 1, 2).unwrap();
    let y1 = g.conv2d(x1, w1, 1, 2, 1, 2).unwrap();
    let cat = g.concat(&[y0, y1]).unwrap();
    assert!(g.value(grouped).max_abs_diff(g.value(cat)) < 1e-12);
}

#[test]
fn dilated_same_padding_keeps_dims() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 7, 9]));
    let w = g.constant(Tensor::zeros([2, 1, 3, 3]));
    let y = g.conv2d_same(x, w, 1, 2, 2).unwrap();
    assert_eq!(g.shape(y), [1, 2, 7, 9]);
    let w5 = g.constant(Tensor::zeros([2, 1, 5, 5]));
    let y = g.conv2d_same(x, w5, 1, 1, 2).unwrap();
    assert_eq!(g.shape(y), [1, 2, 7, 9]);
    assert!(g.conv2d_same(x, w5, 1, 1, 3).is_err());
}

#[test]
fn batchnorm_semantics() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([2, 1, 3, 3], 4.0));
    let scale = g.constant(Tensor::vector(vec![2.0]));
    let shift = g.constant(Tensor::vector(vec![0.7]));
    let (y, stats) = g.batchnorm_train(x, scale, shift).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    assert_eq!(stats.mean, vec![4.0]);

    let mut rng = derive_rng(4, 0, 0);
    let xr = g.constant(random_tensor(&mut rng, [4, 2, 5, 5], -3.0, 5.0));
    let scale = g.constant(Tensor::vector(vec![1.5, -0.5]));
    let shift = g.constant(Tensor::vector(vec![0.25, 2.0]));
    let (y, _) = g.batchnorm_train(xr, scale, shift).unwrap();
    let v = g.value(y);
    for (ch, (s, b)) in [(1.5f64, 0.25f64), (-0.5, 2.0)].into_iter().enumerate() {
        let vals: Vec<f64> = (0..4)
            .flat_map(|bi| (0..25).map(move |p| (bi, p)))
            .map(|(bi, p)| v.at([bi, ch, p / 5, p % 5]))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mean - b).abs() < 1e-6);
        assert!((std - s.abs()).abs() < 1e-5, "{std}");
    }
}

#[test]
fn relu_and_upsample_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![-1.0, 2.0, -3.0, 4.0]));
    let r = g.relu(x);
    let loss = g.dot_const(r, &[1.0; 4]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);

    let mut rng = derive_rng(5, 0, 0);
    let t = random_tensor(&mut rng, [1, 2, 3, 4], -1.0, 1.0);
    let u = g.constant(t.clone());
    let up = g.upsample(u, 3, 4).unwrap();
    assert_eq!(g.value(up), &t);
    // Half-pixel centers: a 2x upsample of [a, b] is [a, .75a+.25b, .25a+.75b, b].
    let p = g.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 4.0]).unwrap());
    let up = g.upsample(p, 1, 4).unwrap();
    assert_eq!(g.value(up).data(), &[0.0, 1.0, 3.0, 4.0]);
}

#[test]
fn cross_entropy_limits() {
    let mut g = Graph::<f64>::new();
    let k = 3;
    let uniform = g.constant(Tensor::zeros([2, k, 2, 2]));
    let labels = vec![0, 1, 2, 1, 0, 0, 2, 2];
    let l = g.cross_entropy_2d(uniform, &labels, None).unwrap();
    assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);

    let confident = g.constant(Tensor::from_fn([2, k, 2, 2], |[b, c, h, w]| {
        if labels[b * 4 + h * 2 + w] == c {
            60.0
        } else {
            0.0
        }
    }));
    let l = g.cross_entropy_2d(confident, &labels, None).unwrap();
    assert!(g.value(l).item() < 1e-20);

    let mut ignored = labels.clone();
    ignored[0] = 255;
    assert!(g.cross_entropy_2d(uniform, &ignored, Some(255)).is_ok());
    assert!(g.cross_entropy_2d(uniform, &ignored, None).is_err());
}

#[test]
fn every_op_passes_gradient_check() {
    for (op, report) in op_suite(17, 3).unwrap() {
        assert!(report.checked > 0, "{op}");
        assert!(report.max_rel_err < 1e-4, "{op}: {}", report.max_rel_err);
    }
}

#[test]
fn forward_is_bit_identical() {
    let run = || {
        let mut rng = derive_rng(6, 0, 0);
        let x = random_signed(&mut rng, [2, 4, 8, 8]);
        let w = random_signed(&mut rng, [8, 2, 3, 3]);
        let mut g = Graph::<f32>::new();
        let xi = g.constant(x.cast());
        let wi = g.param(w.cast());
        let y = g.conv2d_same(xi, wi, 2, 1, 2).unwrap();
        let r = g.relu(y);
        let p = g.global_avg_pool(r);
        let coeffs = vec![0.5f32; g.value(p).numel()];
        let l = g.dot_const(p, &coeffs).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(r).clone(), grads.get(wi).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_requires_scalar_and_skips_constants() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = g.param(Tensor::vector(vec![3.0, 4.0]));
    let s = g.add(c, p).unwrap();
    assert!(g.backward(s).is_err());
    let l = g.dot_const(s, &[1.0, 1.0]).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap(), &[1.0, 1.0]);
}

#[test]
fn construction_checks_length() {
    assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |[b, c, h, w]| (b * 1000 + c * 100 + h * 10 + w) as f64);
    assert_eq!(t.at([1, 2, 3, 4]), 1234.0);
    assert_eq!(t.numel(), 120);
    assert_eq!(t.clone().reshape([1, 1, 1, 120]).unwrap().data(), t.data());
    assert!(t.reshape([1, 1, 1, 7]).is_err());
}

#[test]
fn cast_round_trip() {
    let t = Tensor::<f64>::vector(vec![0.5, -2.0, 3.25]);
    assert_eq!(t.cast::<f32>().cast::<f64>(), t);
}
