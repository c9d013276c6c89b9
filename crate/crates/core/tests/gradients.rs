mod common;

use irispad::explain::{class_score_from_features, class_score_gradient};
use irispad::model::{build_model, BackboneInit, ModelConfig};
use irispad::nn::{self, BackwardOptions, Dense, Gradients, Layer, LayerKind, Mode, Network, Sgd};
use irispad::preprocess::NetworkInput;
use irispad::Label;
use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::rel_err;

const EPS: f64 = 1e-5;

fn random_input(size: usize, seed: u64) -> NetworkInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NetworkInput {
        tensor: Array3::from_shape_simple_fn((3, size, size), || rng.random_range(-2.0..2.0)),
        normalization_tag: String::new(),
    }
}

/// Central differences of the class score with respect to probed entries of
/// a layer's feature maps; returns (analytic, numeric) pairs.
fn probe(layer: &str, target: Label, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let cfg = ModelConfig::reduced(64, 16, 32);
    let model = build_model::<f64>(&cfg, &BackboneInit::Random, seed).unwrap();
    let input = random_input(64, seed + 1);
    let (act, grad) = class_score_gradient(&model, &input, target, layer).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let (c, h, w) = act.dim();
    (0..n)
        .map(|_| {
            // probe active units; a dead unit sits on the rectifier kink
            let idx = loop {
                let i = (rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w));
                if act[i] > 1e-3 {
                    break i;
                }
            };
            let mut plus = act.clone();
            plus[idx] += EPS;
            let mut minus = act.clone();
            minus[idx] -= EPS;
            let numeric = (class_score_from_features(&model, &plus, target, layer).unwrap()
                - class_score_from_features(&model, &minus, target, layer).unwrap())
                / (2.0 * EPS);
            (grad[idx], numeric)
        })
        .collect()
}

#[test]
fn class_score_gradient_matches_central_differences() {
    let mut pairs = probe("conv5_3", Label::PostMortem, 30, 3);
    pairs.extend(probe("conv4_2", Label::Live, 30, 5));
    pairs.extend(probe("conv3_3", Label::PostMortem, 20, 9));
    assert!(pairs.len() >= 50);
    let nonzero = pairs.iter().filter(|(a, _)| *a != 0.0).count();
    assert!(nonzero >= 25, "only {nonzero} nonzero gradients probed");
    for (a, n) in &pairs {
        assert!(rel_err(*a, *n) <= 1e-3, "analytic {a} vs numeric {n}");
    }
}

/// 6 → 5 (rectified) → 2: 47 parameters.
fn toy_tail(seed: u64) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = |o: usize, i: usize, relu: bool, rng: &mut ChaCha8Rng| LayerKind::Dense(Dense {
        weight: nn::gaussian((o, i), 0.5, rng),
        bias: Array1::from_shape_simple_fn(o, || rng.random_range(-0.1..0.1)),
        relu,
    });
    Network {
        layers: vec![
            Layer { name: "fc_a".into(), kind: dense(5, 6, true, &mut rng) },
            Layer { name: "fc_b".into(), kind: dense(2, 5, false, &mut rng) },
        ],
    }
}

fn loss(net: &Network<f64>, x: &Array4<f64>, t: &[usize]) -> f64 {
    nn::cross_entropy(net.logits(x).view(), t).0
}

fn params(net: &Network<f64>) -> Vec<f64> {
    net.layers
        .iter()
        .filter_map(|l| l.params())
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect()
}

fn set_param(net: &mut Network<f64>, mut k: usize, v: f64) {
    for l in &mut net.layers {
        if let Some((w, b)) = l.params_mut() {
            if k < w.len() {
                *w.iter_mut().nth(k).unwrap() = v;
                return;
            }
            k -= w.len();
            if k < b.len() {
                b[k] = v;
                return;
            }
            k -= b.len();
        }
    }
    panic!("parameter index out of range");
}

fn numeric_grad(net: &Network<f64>, x: &Array4<f64>, t: &[usize]) -> Vec<f64> {
    let theta = params(net);
    (0..theta.len())
        .map(|k| {
            let mut n = net.clone();
            set_param(&mut n, k, theta[k] + EPS);
            let up = loss(&n, x, t);
            set_param(&mut n, k, theta[k] - EPS);
            (up - loss(&n, x, t)) / (2.0 * EPS)
        })
        .collect()
}

fn analytic_grads(net: &Network<f64>, x: &Array4<f64>, t: &[usize]) -> Gradients<f64> {
    let trace = net.forward(x.clone(), Mode::<ChaCha8Rng>::Eval);
    let (_, g) = nn::cross_entropy(trace.logits().view(), t);
    let (n, k) = g.dim();
    let mut grads = Gradients::zeros_like(net);
    let opts = BackwardOptions { need_input_grad: false, ..Default::default() };
    net.backward(&trace, g.into_shape_with_order((n, k, 1, 1)).unwrap(), &opts, Some(&mut grads));
    grads
}

#[test]
fn momentum_steps_match_the_analytic_update() {
    let (lr, m) = (0.05, 0.9);
    let mut net = toy_tail(1);
    assert!(net.num_params() <= 100);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array4::from_shape_simple_fn((8, 6, 1, 1), || rng.random_range(-1.0..1.0));
    let t: Vec<usize> = (0..8).map(|i| i % 2).collect();

    let mut sgd = Sgd::new(&net, lr, m);
    let mut velocity = vec![0.0; net.num_params()];
    for _ in 0..3 {
        let before = params(&net);
        let oracle = numeric_grad(&net, &x, &t);
        for (v, g) in velocity.iter_mut().zip(&oracle) {
            *v = m * *v + g;
        }
        let grads = analytic_grads(&net, &x, &t);
        sgd.step(&mut net, &grads);
        for ((after, b), v) in params(&net).iter().zip(&before).zip(&velocity) {
            let expected = b - lr * v;
            assert!((after - expected).abs() <= 1e-6, "{after} vs {expected}");
        }
    }
}
