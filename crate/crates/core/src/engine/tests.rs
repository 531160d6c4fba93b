use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::gradcheck::check_gradients;
use super::init::xavier_uniform;
use super::*;
use crate::seed;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seed::rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_linear_passes_input_through() {
    let mut store = ParamStore::new();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = store.add("w", ParamGroup::Head, eye).unwrap();
    let b = store.add("b", ParamGroup::Head, Tensor::zeros(&[3])).unwrap();
    let x = random(&[4, 3], 1);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (wi, bi) = (g.param(&store, w), g.param(&store, b));
    let y = g.linear(xi, wi, bi).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn unit_kernel_convolution_is_identity() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::Representer, Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let x = random(&[2, 1, 5, 4], 2);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let wi = g.param(&store, w);
    let y = g.conv2d(xi, wi, None, (1, 1), (0, 0, 0, 0), 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_matches_direct_summation() {
    // grouped, strided, padded: compare against a naive loop
    let x = random(&[2, 4, 6, 3], 3);
    let wt = random(&[6, 2, 3, 2], 4);
    let bias = random(&[6], 5);
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::Representer, wt.clone()).unwrap();
    let b = store.add("b", ParamGroup::Representer, bias.clone()).unwrap();
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (wi, bi) = (g.param(&store, w), g.param(&store, b));
    let (stride, pad) = ((2, 1), (1, 2, 0, 1));
    let y = g.conv2d(xi, wi, Some(bi), stride, pad, 2).unwrap();
    let shape = g.shape(y).to_vec();
    assert_eq!(shape, vec![2, 6, 4, 3]);
    let at = |n: usize, c: usize, h: isize, w: isize| -> f64 {
        if h < 0 || w < 0 || h >= 6 || w >= 3 {
            0.0
        } else {
            x.data()[((n * 4 + c) * 6 + h as usize) * 3 + w as usize]
        }
    };
    for n in 0..2 {
        for co in 0..6 {
            let grp = co / 3;
            for oh in 0..4 {
                for ow in 0..3 {
                    let mut acc = bias.data()[co];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..2 {
                                let h = (oh * 2 + ki) as isize - 1;
                                let w = (ow + kj) as isize;
                                acc += wt.data()[((co * 2 + ci) * 3 + ki) * 2 + kj] * at(n, grp * 2 + ci, h, w);
                            }
                        }
                    }
                    let got = g.value(y).data()[((n * 6 + co) * 4 + oh) * 3 + ow];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn grad_of_dot_product_is_the_input() {
    let mut store = ParamStore::new();
    let w = store.add("w", ParamGroup::Head, random(&[1, 5], 6)).unwrap();
    let b = store.add("b", ParamGroup::Head, Tensor::zeros(&[1])).unwrap();
    let unused = store.add("unused", ParamGroup::Head, random(&[2, 2], 7)).unwrap();
    let x = random(&[1, 5], 8);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (wi, bi) = (g.param(&store, w), g.param(&store, b));
    let _ = g.param(&store, unused);
    let y = g.linear(xi, wi, bi).unwrap();
    let l = g.sum(y);
    g.backward(l, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), x.data());
    assert!(store.get(unused).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_contract_errors() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input(random(&[2, 2], 9));
    assert!(matches!(g.backward(x, &mut store), Err(crate::Error::Graph(_))));
    let empty: Graph<f64> = Graph::new();
    assert!(matches!(empty.backward(x, &mut store), Err(crate::Error::Graph(_))));
}

#[test]
fn log_without_floor_rejects_non_positive_input() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.input(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap());
    assert!(g.log_floor(x, 0.0).is_err());
    let y = g.log_floor(x, 1e-6).unwrap();
    assert!(g.value(y).is_finite());
}

#[test]
fn eval_batch_norm_is_affine() {
    let mut store = ParamStore::new();
    let gamma = store.add("g", ParamGroup::Representer, random(&[3], 10)).unwrap();
    let beta = store.add("b", ParamGroup::Representer, random(&[3], 11)).unwrap();
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let (gi, bi) = (g.param(&store, gamma), g.param(&store, beta));
        let y = g.batch_norm_eval(xi, gi, bi, &rm, &rv, 1e-5).unwrap();
        g.value(y).clone()
    };
    let (x1, x2) = (random(&[2, 3, 2, 2], 12), random(&[2, 3, 2, 2], 13));
    let a = 0.3;
    let mix = Tensor::from_vec(x1.shape(), x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + (1.0 - a) * q).collect())
        .unwrap();
    let (y1, y2, ym) = (eval(&x1), eval(&x2), eval(&mix));
    for i in 0..ym.len() {
        assert!((ym.data()[i] - (a * y1.data()[i] + (1.0 - a) * y2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn batch_stats_match_population_moments() {
    let mut store = ParamStore::new();
    let gamma = store.add("g", ParamGroup::Representer, Tensor::full(&[2], 1.0)).unwrap();
    let beta = store.add("b", ParamGroup::Representer, Tensor::zeros(&[2])).unwrap();
    let x = random(&[3, 2, 4, 1], 14);
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (gi, bi) = (g.param(&store, gamma), g.param(&store, beta));
    let (y, stats) = g.batch_norm_train(xi, gi, bi, 1e-5).unwrap();
    assert_eq!(stats.count, 12);
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|n| x.data()[(n * 2 + ch) * 4..][..4].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 12.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0;
        assert!((stats.mean[ch] - mean).abs() < 1e-12);
        assert!((stats.var[ch] - var).abs() < 1e-12);
        let out: f64 = (0..3).flat_map(|n| g.value(y).data()[(n * 2 + ch) * 4..][..4].to_vec()).sum();
        assert!(out.abs() < 1e-10);
    }
}

#[test]
fn weighted_ce_reduces_to_plain_ce_with_unit_weights() {
    let scores = random(&[4, 3], 15);
    let labels = [0usize, 2, 1, 2];
    let mut g = Graph::new();
    let s = g.input(scores.clone());
    let l = g.weighted_cross_entropy(s, &labels, &[1.0, 1.0, 1.0]).unwrap();
    let mut plain = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &scores.data()[i * 3..][..3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        plain -= (row[y].exp() / z).ln();
    }
    assert!((g.value(l).data()[0] - plain / 4.0).abs() < 1e-12);
}

/// Composite network that touches every layer type; checked in f64.
fn composite(g: &mut Graph<f64>, s: &ParamStore<f64>, train_bn: bool) -> crate::Result<NodeId> {
    let id = |n: &str| s.by_name(n).unwrap();
    let x = g.input(random(&[3, 2, 9, 3], 100));
    let w1 = g.param(s, id("w1"));
    let b1 = g.param(s, id("b1"));
    let c1 = g.conv2d(x, w1, Some(b1), (1, 1), (1, 1, 0, 0), 2)?;
    let (gm, bt) = (g.param(s, id("gamma")), g.param(s, id("beta")));
    let bn = if train_bn {
        g.batch_norm_train(c1, gm, bt, 1e-5)?.0
    } else {
        g.batch_norm_eval(c1, gm, bt, &[0.1, -0.1, 0.2, 0.0], &[0.9, 1.1, 0.7, 1.3], 1e-5)?
    };
    let e = g.elu(bn);
    // branch a: square, average pool, log
    let sq = g.square(e);
    let ap = g.avg_pool(sq, (3, 1), (2, 1))?;
    let lg = g.log_floor(ap, 1e-6)?;
    // branch b: spatial conv and max pool
    let w2 = g.param(s, id("w2"));
    let c2 = g.conv2d(e, w2, None, (1, 1), (0, 0, 0, 0), 1)?;
    let mp = g.max_pool(c2, (3, 1), (2, 1))?;
    let w3 = g.param(s, id("w3"));
    let mp3 = g.conv2d(mp, w3, None, (1, 1), (0, 0, 0, 0), 1)?;
    let lg1 = g.max_pool(lg, (1, 3), (1, 1))?;
    let cat = g.concat_channels(&[lg1, mp3])?;
    let d = g.dropout(cat, 0.3, &mut seed::rng(5))?;
    let f = g.flatten(d)?;
    let (wh, bh) = (g.param(s, id("wh")), g.param(s, id("bh")));
    let out = g.linear(f, wh, bh)?;
    g.weighted_cross_entropy(out, &[0, 1, 1], &[1.5, 0.75])
}

fn composite_store() -> ParamStore<f64> {
    let mut rng = seed::rng(77);
    let mut s = ParamStore::new();
    s.add("w1", ParamGroup::Representer, xavier_uniform(&[4, 1, 3, 1], &mut rng).unwrap()).unwrap();
    s.add("b1", ParamGroup::Representer, random(&[4], 20)).unwrap();
    s.add("gamma", ParamGroup::Representer, Tensor::from_vec(&[4], vec![1.2, 0.8, 1.0, 0.9]).unwrap()).unwrap();
    s.add("beta", ParamGroup::Representer, random(&[4], 21)).unwrap();
    s.add("w2", ParamGroup::Representer, xavier_uniform(&[5, 4, 1, 3], &mut rng).unwrap()).unwrap();
    s.add("w3", ParamGroup::Representer, xavier_uniform(&[2, 5, 1, 1], &mut rng).unwrap()).unwrap();
    // lg1: [3, 4, 4, 1]; mp3: [3, 2, 4, 1] -> 6 * 4 = 24 features
    s.add("wh", ParamGroup::Head, xavier_uniform(&[2, 24], &mut rng).unwrap()).unwrap();
    s.add("bh", ParamGroup::Head, random(&[2], 22)).unwrap();
    s
}

#[test]
fn every_layer_type_passes_finite_differences() {
    for train_bn in [true, false] {
        let mut s = composite_store();
        let report = check_gradients(&mut s, |g, s| composite(g, s, train_bn), 1e-4, 12, 1).unwrap();
        assert!(report.checked > 50);
        assert!(report.passed(1e-4), "train_bn={train_bn}: {report:?}");
    }
}

#[test]
fn linear_objective_is_exact_under_finite_differences() {
    let mut s = ParamStore::new();
    s.add("w", ParamGroup::Head, random(&[3, 4], 30)).unwrap();
    s.add("b", ParamGroup::Head, random(&[3], 31)).unwrap();
    let report = check_gradients(
        &mut s,
        |g, s| {
            let x = g.input(random(&[5, 4], 32));
            let (w, b) = (g.param(s, s.by_name("w").unwrap()), g.param(s, s.by_name("b").unwrap()));
            let y = g.linear(x, w, b)?;
            Ok(g.sum(y))
        },
        1e-4,
        20,
        2,
    )
    .unwrap();
    assert!(report.passed(1e-9), "{report:?}");
}

#[test]
fn dropout_probability_is_validated() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.input(random(&[4], 40));
    assert!(g.dropout(x, 1.0, &mut seed::rng(0)).is_err());
    let y = g.dropout(x, 0.0, &mut seed::rng(0)).unwrap();
    assert_eq!(g.value(y), g.value(x));
}
