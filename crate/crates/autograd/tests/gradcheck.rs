//! Central finite-difference checks of every differentiable op, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uhpnet_autograd::{Graph, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds a scalar from the inputs; checks d(out)/d(input[i]) for every input.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("gradient reaches every input");
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let scale = a.abs().max(fd.abs()).max(1e-3);
            assert!(
                (a - fd).abs() / scale < 1e-5,
                "input {i} element {j}: analytic {a} vs numeric {fd}"
            );
        }
    }
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let y = g.mul_const(x, w).unwrap();
    g.sum_all(y)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[2, 3], 0.5, 2.0);
    let b = random(&mut rng, &[2, 3], 0.5, 2.0);
    check(vec![a, b], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let q = g.div(m, v[0]).unwrap();
        let e = g.exp(q);
        let l = g.ln(e);
        let r = g.sqrt(l);
        let sg = g.sigmoid(r);
        let af = g.affine(sg, -3.0, 1.0);
        let ab = g.abs(af);
        let re = g.relu(ab);
        let lr = g.leaky_relu(re, 0.1);
        weighted_sum(g, lr, 7)
    });
}

#[test]
fn leaky_relu_negative_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[8], -2.0, -0.1);
    check(vec![a], |g, v| {
        let y = g.leaky_relu(v[0], 0.2);
        weighted_sum(g, y, 3)
    });
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    check(vec![a], |g, v| {
        let s = g.sum_per_item(v[0]);
        let sq = g.mul(s, s).unwrap();
        let m = g.mean_all(sq);
        let t = g.sum_all(v[0]);
        g.add(m, t).unwrap()
    });
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
    let w3 = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b3 = random(&mut rng, &[4], -0.5, 0.5);
    let w1 = random(&mut rng, &[2, 4, 1, 1], -0.5, 0.5);
    check(vec![x, w3, b3, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2])).unwrap();
        let y = g.conv2d(y, v[3], None).unwrap();
        weighted_sum(g, y, 5)
    });
}

#[test]
fn single_item_pointwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
    let w = random(&mut rng, &[2, 3, 1, 1], -0.5, 0.5);
    check(vec![x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None).unwrap();
        weighted_sum(g, y, 6)
    });
}

#[test]
fn resampling_and_channel_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let a = random(&mut rng, &[2, 1, 2, 2], 0.1, 0.9);
    let z = random(&mut rng, &[2, 2, 1, 1], -1.0, 1.0);
    check(vec![x, a, z], |g, v| {
        let p = g.avg_pool2(v[0]).unwrap();
        let gated = g.mul_channel_broadcast(p, v[1]).unwrap();
        let zb = g.broadcast_spatial(v[2], 2, 2).unwrap();
        let c = g.concat(&[gated, zb]).unwrap();
        let s = g.slice_channels(c, 1, 3).unwrap();
        let u = g.upsample(s, 2).unwrap();
        weighted_sum(g, u, 8)
    });
}

#[test]
fn binary_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = random(&mut rng, &[1, 1, 3, 3], -4.0, 4.0);
    let y = Tensor::new(
        &[1, 1, 3, 3],
        (0..9).map(|i| (i % 2) as f64).collect(),
    )
    .unwrap();
    check(vec![z], move |g, v| g.bce_with_logits(v[0], y.clone()).unwrap());
}

#[test]
fn bce_matches_direct_formula() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::new(&[2], vec![0.3, -1.2]).unwrap());
    let l = g.bce_with_logits(z, Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
    let p = |z: f64| 1.0 / (1.0 + (-z).exp());
    let direct = (-(p(0.3).ln()) - (1.0 - p(-1.2)).ln()) / 2.0;
    assert!((g.value(l).data()[0] - direct).abs() < 1e-12);
}

#[test]
fn shared_parameter_accumulates() {
    let w = Tensor::new(&[1], vec![3.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let a = g.param("w", &w);
    let b = g.param("w", &w);
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    let grads = g.backward(y).unwrap();
    let (name, gw) = grads.params().next().unwrap();
    assert_eq!(name, "w");
    assert_eq!(gw.data(), &[6.0]);
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, b).is_err());
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(g.conv2d(x, w, None).is_err());
}

#[test]
fn group_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    let gamma = random(&mut rng, &[4], 0.5, 1.5);
    let beta = random(&mut rng, &[4], -0.5, 0.5);
    check(vec![x, gamma, beta], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap();
        weighted_sum(g, y, 12)
    });
}

#[test]
fn group_normalization_standardizes_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[2, 6, 4, 4], -3.0, 5.0));
    let gamma = g.constant(Tensor::ones(&[6]));
    let beta = g.constant(Tensor::zeros(&[6]));
    let y = g.group_norm(x, gamma, beta, 3, 1e-8).unwrap();
    for chunk in g.value(y).data().chunks(2 * 16) {
        let m = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / m;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
    assert!(g.group_norm(x, gamma, beta, 4, 1e-5).is_err());
}
