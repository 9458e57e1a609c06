use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn inputs(pairs: &[(&str, Tensor)]) -> Tensors {
    pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

#[test]
fn add_zero_is_identity() {
    let mut g = Graph::new();
    let x = g.input("x", false);
    let zero = g.scalar(0.0);
    let y = g.add(x, zero);
    g.mark_output("y", y);
    let out = g.evaluate(&inputs(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
    assert_eq!(out["y"].data(), &[1.0, 2.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.scalar(0.0);
    let y = g.sigmoid(x);
    g.forward().unwrap();
    assert_eq!(g.value(y).unwrap().item(), 0.5);
}

#[test]
fn matmul_by_hand() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let c = g.matmul(a, b);
    g.forward().unwrap();
    let v = g.value(c).unwrap();
    assert_eq!(v.shape(), &[2, 1]);
    assert_eq!(v.data(), &[3.0, 7.0]);
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let c = g.matmul(a, b);
    let err = g.forward().unwrap_err();
    match err {
        crate::Error::Shape { node, op, detail } => {
            assert_eq!(node, c.index());
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn derivative_of_square() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let y = g.mul(x, x);
    g.bind("x", Tensor::scalar(3.0)).unwrap();
    g.forward().unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads["x"].item(), 6.0);
}

#[test]
fn derivative_of_sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let y = g.sigmoid(x);
    g.bind("x", Tensor::scalar(0.0)).unwrap();
    g.forward().unwrap();
    assert_eq!(g.backward(y).unwrap()["x"].item(), 0.25);
}

#[test]
fn gradient_of_mean() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let y = g.mean(x);
    g.bind("x", Tensor::vector(vec![1.0, -2.0, 3.0, 4.0])).unwrap();
    g.forward().unwrap();
    assert_eq!(g.backward(y).unwrap()["x"].data(), &[0.25; 4]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let y = g.exp(x);
    g.bind("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::NotEvaluated)));
    g.forward().unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::NonScalarOutput { .. })));
}

#[test]
fn frozen_inputs_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let w = g.input("w", false);
    let p = g.mul(x, w);
    let y = g.sum(p);
    g.bind("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    g.bind("w", Tensor::vector(vec![3.0, 4.0])).unwrap();
    g.forward().unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads["x"].data(), &[3.0, 4.0]);
    assert!(!grads.contains_key("w"));
}

#[test]
fn order_statistic_examples() {
    let cases: [(&[f64], usize, f64, usize); 3] = [
        (&[3.0, 1.0, 2.0], 1, 1.0, 1),
        (&[5.0], 1, 5.0, 0),
        (&[2.0, 2.0, 2.0], 2, 2.0, 1),
    ];
    for (values, index, expect, hot) in cases {
        let mut g = Graph::new();
        let x = g.input("x", true);
        let y = g.order_statistic(x, index);
        g.bind("x", Tensor::vector(values.to_vec())).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(y).unwrap().item(), expect);
        let grad = g.backward(y).unwrap().remove("x").unwrap();
        for (k, d) in grad.data().iter().enumerate() {
            assert_eq!(*d, if k == hot { 1.0 } else { 0.0 }, "values {values:?}");
        }
    }
}

#[test]
fn order_statistic_index_range() {
    for bad in [0, 4] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        g.order_statistic(x, bad);
        assert!(matches!(g.forward(), Err(crate::Error::IndexOutOfRange { .. })));
    }
}

#[test]
fn tie_rule_for_first_of_equal_values() {
    // The first order statistic among [2,2,2] routes to position 0.
    let mut g = Graph::new();
    let x = g.input("x", true);
    let y = g.order_statistic(x, 1);
    g.bind("x", Tensor::vector(vec![2.0, 2.0, 2.0])).unwrap();
    g.forward().unwrap();
    assert_eq!(g.backward(y).unwrap()["x"].data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn check_gradient_examples() {
    // quadratic: sum(x * x + 3x)
    let mut g = Graph::new();
    let x = g.input("x", true);
    let sq = g.mul(x, x);
    let lin = g.scale(x, 3.0);
    let s = g.add(sq, lin);
    let y = g.sum(s);
    let err = check_gradient(&mut g, y, &inputs(&[("x", Tensor::vector(vec![0.3, -1.2, 2.0]))]), 1e-5).unwrap();
    assert!(err <= 1e-7, "quadratic err {err}");

    let mut g = Graph::new();
    let x = g.input("x", true);
    let a = g.sigmoid(x);
    let b = g.scale(a, 2.5);
    let c = g.sigmoid(b);
    let y = g.sum(c);
    let err = check_gradient(&mut g, y, &inputs(&[("x", Tensor::vector(vec![0.1, -0.7]))]), 1e-5).unwrap();
    assert!(err <= 1e-6, "sigmoid chain err {err}");

    let mut g = Graph::new();
    let x = g.input("x", true);
    let zero = g.scale(x, 0.0);
    let c = g.add_scalar(zero, 4.0);
    let y = g.sum(c);
    let err = check_gradient(&mut g, y, &inputs(&[("x", Tensor::vector(vec![1.0, 2.0]))]), 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random tensor whose entries stay at least `gap` away from zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let t = rand_tensor(rng, shape, gap, 2.0);
    let signs = rand_tensor(rng, shape, -1.0, 1.0);
    Tensor::new(
        shape.to_vec(),
        t.data().iter().zip(signs.data()).map(|(x, s)| if *s < 0.0 { -x } else { *x }).collect(),
    )
    .unwrap()
}

/// Builds `sum(weights * op(x, w))` so every output coordinate participates.
type Builder = fn(&mut Graph, NodeId, NodeId) -> NodeId;

fn primitive_cases() -> Vec<(&'static str, Builder, Vec<usize>, Vec<usize>)> {
    fn add(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        g.add(x, w)
    }
    fn sub_bcast(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let r = g.select_cols(w, &[0, 1, 2]);
        g.sub(x, r)
    }
    fn mul(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        g.mul(x, w)
    }
    fn div(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        g.div(x, w)
    }
    fn matmul(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let wt = g.transpose(w);
        g.matmul(x, wt)
    }
    fn concat(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let c0 = g.concat(&[x, w], 0);
        let c1 = g.concat(&[x, w], 1);
        let s0 = g.sum(c0);
        let s1 = g.sum(c1);
        let m = g.mul(c1, c1);
        let s2 = g.sum(m);
        let a = g.add(s0, s1);
        g.add(a, s2)
    }
    fn reshape(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let r = g.reshape(x, &[3, 2]);
        let t = g.transpose(r);
        g.mul(t, w)
    }
    fn exp(g: &mut Graph, x: NodeId, _w: NodeId) -> NodeId {
        g.exp(x)
    }
    fn tanh(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let p = g.mul(x, w);
        g.tanh(p)
    }
    fn sigmoid(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let p = g.sub(x, w);
        g.sigmoid(p)
    }
    fn abs(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let a = g.abs(x);
        g.mul(a, w)
    }
    fn leaky(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let a = g.leaky_relu(x, 0.01);
        g.mul(a, w)
    }
    fn sum_mean(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let m = g.mean(x);
        let s = g.sum(w);
        let p = g.mul(m, s);
        let ax0 = g.sum_axis(x, 0);
        let ax1 = g.sum_axis(w, 1);
        let a = g.sum(ax0);
        let b = g.mul(ax1, ax1);
        let b = g.sum(b);
        let pa = g.add(p, a);
        g.add(pa, b)
    }
    fn scalar_bcast(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let s = g.select(w, 4);
        let xs = g.mul(x, s);
        let n = g.neg(xs);
        g.add_scalar(n, 0.5)
    }
    fn tile(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let t = g.tile_rows(x, 1, 3);
        let t2 = g.tile_rows(w, 2, 2);
        let a = g.mul(t, t);
        let b = g.mul(t2, t2);
        let sa = g.sum(a);
        let sb = g.sum(b);
        g.add(sa, sb)
    }
    fn order(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let o = g.order_statistic(x, 2);
        let t = g.tail_mean(w, 2);
        let p = g.mul(o, o);
        let a = g.sum(p);
        let b = g.sum(t);
        g.add(a, b)
    }
    fn l1(g: &mut Graph, x: NodeId, w: NodeId) -> NodeId {
        let n = g.l1_normalize(x, 1.5);
        g.mul(n, w)
    }
    vec![
        ("add", add as Builder, vec![2, 3], vec![2, 3]),
        ("sub_broadcast", sub_bcast, vec![2, 3], vec![1, 3]),
        ("mul", mul, vec![2, 3], vec![2, 3]),
        ("div", div, vec![2, 3], vec![2, 3]),
        ("matmul", matmul, vec![2, 3], vec![4, 3]),
        ("concat", concat, vec![2, 3], vec![2, 3]),
        ("reshape_transpose", reshape, vec![2, 3], vec![2, 3]),
        ("exp", exp, vec![2, 3], vec![2, 3]),
        ("tanh", tanh, vec![2, 3], vec![2, 3]),
        ("sigmoid", sigmoid, vec![2, 3], vec![2, 3]),
        ("abs", abs, vec![2, 3], vec![2, 3]),
        ("leaky_relu", leaky, vec![2, 3], vec![2, 3]),
        ("sum_mean_axis", sum_mean, vec![2, 3], vec![2, 3]),
        ("scalar_broadcast_select", scalar_bcast, vec![2, 3], vec![2, 3]),
        ("tile_rows", tile, vec![2, 3], vec![2, 3]),
        ("order_statistic_tail_mean", order, vec![2, 3], vec![2, 3]),
        ("l1_normalize", l1, vec![2, 3], vec![2, 3]),
    ]
}

pub(crate) fn output_numel(build: Builder, xs: &[usize], ws: &[usize]) -> Vec<usize> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(xs, 0.5));
    let w = g.constant(Tensor::full(ws, 0.3));
    let y = build(&mut g, x, w);
    g.forward().unwrap();
    g.value(y).unwrap().shape().to_vec()
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, build, xs, ws) in primitive_cases() {
        let out_shape = output_numel(build, &xs, &ws);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut g = Graph::new();
            let x = g.input("x", true);
            let w = g.input("w", true);
            let y = build(&mut g, x, w);
            let weights = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
            let wc = g.constant(weights);
            let p = g.mul(y, wc);
            let out = g.sum(p);
            // Stay away from kinks (|x| near 0) and from order-statistic ties.
            let xv = rand_away_from_zero(&mut rng, &xs, 0.05);
            let wv = match name {
                "div" => rand_away_from_zero(&mut rng, &ws, 0.3),
                _ => rand_away_from_zero(&mut rng, &ws, 0.05),
            };
            let err = check_gradient(&mut g, out, &inputs(&[("x", xv), ("w", wv)]), 1e-5).unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "{name}: relative error {worst}");
    }
}

#[test]
fn backward_is_linear_in_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let build = |which: u8| {
        let mut g = Graph::new();
        let x = g.input("x", true);
        let a = g.tanh(x);
        let sa = g.sum(a);
        let e = g.exp(x);
        let se = g.mean(e);
        let out = match which {
            0 => sa,
            1 => se,
            _ => g.add(sa, se),
        };
        g.bind("x", xv.clone()).unwrap();
        g.forward().unwrap();
        g.backward(out).unwrap().remove("x").unwrap()
    };
    let (ga, gb, gs) = (build(0), build(1), build(2));
    for k in 0..gs.numel() {
        assert!((ga.data()[k] + gb.data()[k] - gs.data()[k]).abs() < 1e-14);
    }
}

#[test]
fn reevaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input("x", true);
    let n = g.l1_normalize(x, 1.0);
    let t = g.tanh(n);
    let o = g.tail_mean(t, 2);
    let s = g.sum(o);
    g.bind("x", xv.clone()).unwrap();
    g.forward().unwrap();
    let first = (g.value(s).unwrap().clone(), g.backward(s).unwrap());
    g.bind("x", xv).unwrap();
    g.forward().unwrap();
    let second = (g.value(s).unwrap().clone(), g.backward(s).unwrap());
    assert_eq!(first.0.checksum(), second.0.checksum());
    assert_eq!(first.1["x"].checksum(), second.1["x"].checksum());
}

#[test]
fn l1_normalize_degenerate_row_falls_back() {
    let mut g = Graph::new();
    let x = g.input("x", true);
    let n = g.l1_normalize(x, 1.0);
    let s = g.sum(n);
    g.bind("x", Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, -3.0]]).unwrap()).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(n).unwrap().data(), &[0.5, 0.5, 0.25, -0.75]);
    let grad = g.backward(s).unwrap();
    assert_eq!(&grad["x"].data()[..2], &[0.0, 0.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn order_statistic_backward_is_one_hot(values in prop::collection::vec(-5.0f64..5.0, 1..40), pick in 0usize..40) {
            let k = pick % values.len() + 1;
            let mut g = Graph::new();
            let x = g.input("x", true);
            let y = g.order_statistic(x, k);
            let scaled = g.scale(y, 3.0);
            g.bind("x", Tensor::vector(values.clone())).unwrap();
            g.forward().unwrap();
            let grad = g.backward(scaled).unwrap().remove("x").unwrap();
            let nonzero: Vec<_> = grad.data().iter().filter(|d| **d != 0.0).collect();
            prop_assert_eq!(nonzero.len(), 1);
            prop_assert_eq!(*nonzero[0], 3.0);
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(g.value(y).unwrap().item(), sorted[k - 1]);
        }
    }
}
