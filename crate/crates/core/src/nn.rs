//! Layer builders shared by generators and policies.
//!
//! Every layer works on row batches: activations are `(rows, features)`
//! matrices, weights are `(in, out)` and biases `(1, out)` so that
//! `x W + b` broadcasts over rows.

use rand::Rng;

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::params::{uniform_fan_in, ParamNodes, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.01;

fn affine_init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), uniform_fan_in(rng, fan_in, &[fan_in, fan_out]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

pub fn affine(g: &mut Graph, p: &ParamNodes, name: &str, x: NodeId) -> NodeId {
    let xw = g.matmul(x, p.get(&format!("{name}.w")));
    g.add(xw, p.get(&format!("{name}.b")))
}

/// Layer widths of an `n_layers`-deep MLP: `input -> hidden^(n-1) -> output`.
pub fn mlp_widths(input: usize, hidden: usize, output: usize, n_layers: usize) -> Vec<usize> {
    let mut widths = vec![input];
    widths.extend(std::iter::repeat_n(hidden, n_layers.saturating_sub(1)));
    widths.push(output);
    widths
}

pub fn init_mlp(store: &mut ParamStore, rng: &mut impl Rng, name: &str, widths: &[usize]) {
    for (i, pair) in widths.windows(2).enumerate() {
        affine_init(store, rng, &format!("{name}.{i}"), pair[0], pair[1]);
    }
}

/// Affine layers with leaky ReLU between them, none after the last.
pub fn mlp(g: &mut Graph, p: &ParamNodes, name: &str, n_layers: usize, slope: f64, x: NodeId) -> NodeId {
    let mut h = x;
    for i in 0..n_layers {
        h = affine(g, p, &format!("{name}.{i}"), h);
        if i + 1 < n_layers {
            h = g.leaky_relu(h, slope);
        }
    }
    h
}

pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn init_gates(store: &mut ParamStore, rng: &mut impl Rng, name: &str, gates: &[&str], input: usize, hidden: usize) {
    for gate in gates {
        store.insert(format!("{name}.w_x{gate}"), uniform_fan_in(rng, hidden, &[input, hidden]));
        store.insert(format!("{name}.w_h{gate}"), uniform_fan_in(rng, hidden, &[hidden, hidden]));
        store.insert(format!("{name}.b_x{gate}"), Tensor::zeros(&[1, hidden]));
        store.insert(format!("{name}.b_h{gate}"), Tensor::zeros(&[1, hidden]));
    }
}

/// `x W_x + b_x` and `h W_h + b_h` for one gate.
fn gate_parts(g: &mut Graph, p: &ParamNodes, name: &str, gate: &str, x: NodeId, h: NodeId) -> (NodeId, NodeId) {
    let xw = g.matmul(x, p.get(&format!("{name}.w_x{gate}")));
    let xs = g.add(xw, p.get(&format!("{name}.b_x{gate}")));
    let hw = g.matmul(h, p.get(&format!("{name}.w_h{gate}")));
    let hs = g.add(hw, p.get(&format!("{name}.b_h{gate}")));
    (xs, hs)
}

const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];
const GRU_GATES: [&str; 3] = ["r", "z", "n"];

pub fn init_lstm(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize, layers: usize) {
    for l in 0..layers {
        let d_in = if l == 0 { input } else { hidden };
        init_gates(store, rng, &format!("{name}.{l}"), &LSTM_GATES, d_in, hidden);
    }
}

pub fn init_gru(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize, layers: usize) {
    for l in 0..layers {
        let d_in = if l == 0 { input } else { hidden };
        init_gates(store, rng, &format!("{name}.{l}"), &GRU_GATES, d_in, hidden);
    }
}

pub fn recurrent_param_count(gates: usize, input: usize, hidden: usize, layers: usize) -> usize {
    (0..layers)
        .map(|l| {
            let d_in = if l == 0 { input } else { hidden };
            gates * (d_in * hidden + hidden * hidden + 2 * hidden)
        })
        .sum()
}

/// Stacked LSTM over `xs` (one `(rows, input)` node per step) from zero
/// states; returns the top-layer hidden state at every step.
pub fn lstm(g: &mut Graph, p: &ParamNodes, name: &str, layers: usize, rows: usize, hidden: usize, xs: &[NodeId]) -> Vec<NodeId> {
    let mut seq = xs.to_vec();
    for l in 0..layers {
        let layer = format!("{name}.{l}");
        let mut h = g.constant(Tensor::zeros(&[rows, hidden]));
        let mut c = h;
        let mut out = Vec::with_capacity(seq.len());
        for &x in &seq {
            let mut pre = [h; 4];
            for (k, gate) in LSTM_GATES.iter().enumerate() {
                let (a, b) = gate_parts(g, p, &layer, gate, x, h);
                pre[k] = g.add(a, b);
            }
            let i = g.sigmoid(pre[0]);
            let f = g.sigmoid(pre[1]);
            let cand = g.tanh(pre[2]);
            let o = g.sigmoid(pre[3]);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out.push(h);
        }
        seq = out;
    }
    seq
}

/// Stacked GRU with the usual reset/update gating and zero initial
/// states; returns the top-layer hidden state at every step.
pub fn gru(g: &mut Graph, p: &ParamNodes, name: &str, layers: usize, rows: usize, hidden: usize, xs: &[NodeId]) -> Vec<NodeId> {
    let mut seq = xs.to_vec();
    for l in 0..layers {
        let layer = format!("{name}.{l}");
        let mut h = g.constant(Tensor::zeros(&[rows, hidden]));
        let mut out = Vec::with_capacity(seq.len());
        for &x in &seq {
            let (rx, rh) = gate_parts(g, p, &layer, "r", x, h);
            let r_pre = g.add(rx, rh);
            let r = g.sigmoid(r_pre);
            let (zx, zh) = gate_parts(g, p, &layer, "z", x, h);
            let z_pre = g.add(zx, zh);
            let z = g.sigmoid(z_pre);
            let (nx, nh) = gate_parts(g, p, &layer, "n", x, h);
            let gated = g.mul(r, nh);
            let n_pre = g.add(nx, gated);
            let n = g.tanh(n_pre);
            // h' = n + z * (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            out.push(h);
        }
        seq = out;
    }
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn widths_and_counts() {
        assert_eq!(mlp_widths(8, 4, 90, 2), vec![8, 4, 90]);
        assert_eq!(mlp_widths(8, 4, 90, 1), vec![8, 90]);
        assert_eq!(mlp_param_count(&[8, 4, 90]), 8 * 4 + 4 + 4 * 90 + 90);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_gru(&mut store, &mut rng, "gru", 3, 3, 2);
        assert_eq!(store.numel(), recurrent_param_count(3, 3, 3, 2));
        let mut store = ParamStore::new();
        init_lstm(&mut store, &mut rng, "lstm", 5, 4, 1);
        assert_eq!(store.numel(), 4 * (5 * 4 + 16 + 8));
    }

    #[test]
    fn gru_matches_scalar_recursion() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_gru(&mut store, &mut rng, "gru", 1, 1, 1);
        for (_, t) in store.iter_mut() {
            t.data_mut()[0] += 0.1;
        }
        let w = |n: &str| store.get(&format!("gru.0.{n}")).unwrap().item();
        let xs_val = [0.5, -1.0, 2.0];
        let mut h = 0.0f64;
        let s = crate::diffcore::sigmoid;
        for &x in &xs_val {
            let r = s(w("w_xr") * x + w("b_xr") + w("w_hr") * h + w("b_hr"));
            let z = s(w("w_xz") * x + w("b_xz") + w("w_hz") * h + w("b_hz"));
            let n = (w("w_xn") * x + w("b_xn") + r * (w("w_hn") * h + w("b_hn"))).tanh();
            h = (1.0 - z) * n + z * h;
        }
        let mut g = Graph::new();
        let p = store.declare(&mut g, "", false);
        let xs: Vec<NodeId> = (0..3).map(|t| g.input(&format!("x{t}"), false)).collect();
        let hs = gru(&mut g, &p, "gru", 1, 1, 1, &xs);
        g.mark_output("h", hs[2]);
        let mut inputs: Tensors = store.to_inputs("");
        for (t, x) in xs_val.iter().enumerate() {
            inputs.insert(format!("x{t}"), Tensor::new(vec![1, 1], vec![*x]).unwrap());
        }
        let out = g.evaluate(&inputs).unwrap();
        assert!((out["h"].item() - h).abs() < 1e-14);
    }

    #[test]
    fn lstm_zero_weights_gives_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_lstm(&mut store, &mut rng, "lstm", 2, 3, 2);
        store.set_all(0.0);
        let mut g = Graph::new();
        let p = store.declare(&mut g, "", false);
        let x = g.constant(Tensor::full(&[4, 2], 1.5));
        let hs = lstm(&mut g, &p, "lstm", 2, 4, 3, &[x, x]);
        store.bind(&mut g, "").unwrap();
        g.forward().unwrap();
        // c = 0.5 * 0 + 0.5 * tanh(0) = 0, h = 0.5 * tanh(0) = 0
        assert!(g.value(hs[1]).unwrap().data().iter().all(|v| *v == 0.0));
    }
}
