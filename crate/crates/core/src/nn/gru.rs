//! Multi-layer bidirectional GRU over a fixed-length feature sequence.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::init::uniform_fan_in;
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;

/// One GRU direction: gate weights stored per gate, `(in, hidden)` and
/// `(hidden, hidden)` matrices plus input/hidden biases.
pub struct GruCell {
    w_ir: ParamId,
    w_iz: ParamId,
    w_in: ParamId,
    w_hr: ParamId,
    w_hz: ParamId,
    w_hn: ParamId,
    b_ir: ParamId,
    b_iz: ParamId,
    b_in: ParamId,
    b_hr: ParamId,
    b_hz: ParamId,
    b_hn: ParamId,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = |store: &mut ParamStore, gate: &str, rows: usize| {
            store.add(
                format!("{name}.w_{gate}"),
                uniform_fan_in(&[rows, hidden], hidden, rng),
                ParamKind::Trainable,
            )
        };
        let w_ir = w(store, "ir", input);
        let w_iz = w(store, "iz", input);
        let w_in = w(store, "in", input);
        let w_hr = w(store, "hr", hidden);
        let w_hz = w(store, "hz", hidden);
        let w_hn = w(store, "hn", hidden);
        let mut b = |store: &mut ParamStore, gate: &str| {
            store.add(
                format!("{name}.b_{gate}"),
                uniform_fan_in(&[hidden], hidden, rng),
                ParamKind::Trainable,
            )
        };
        let b_ir = b(store, "ir");
        let b_iz = b(store, "iz");
        let b_in = b(store, "in");
        let b_hr = b(store, "hr");
        let b_hz = b(store, "hz");
        let b_hn = b(store, "hn");
        GruCell {
            w_ir,
            w_iz,
            w_in,
            w_hr,
            w_hz,
            w_hn,
            b_ir,
            b_iz,
            b_in,
            b_hr,
            b_hz,
            b_hn,
            hidden,
        }
    }

    /// Standard GRU step:
    /// r = sig(x Wir + bir + h Whr + bhr)
    /// z = sig(x Wiz + biz + h Whz + bhz)
    /// n = tanh(x Win + bin + r * (h Whn + bhn))
    /// h' = (1 - z) * n + z * h
    fn step(&self, g: &mut Graph, store: &ParamStore, x: NodeId, h: NodeId) -> NodeId {
        let gate = |g: &mut Graph, wx: ParamId, bx: ParamId, wh: ParamId, bh: ParamId, x, h| {
            let wxn = g.param(store, wx);
            let bxn = g.param(store, bx);
            let whn = g.param(store, wh);
            let bhn = g.param(store, bh);
            let xs = g.matmul(x, wxn);
            let xs = g.add_bias(xs, bxn);
            let hs = g.matmul(h, whn);
            let hs = g.add_bias(hs, bhn);
            g.add(xs, hs)
        };
        let r_pre = gate(g, self.w_ir, self.b_ir, self.w_hr, self.b_hr, x, h);
        let r = g.sigmoid(r_pre);
        let z_pre = gate(g, self.w_iz, self.b_iz, self.w_hz, self.b_hz, x, h);
        let z = g.sigmoid(z_pre);

        let win = g.param(store, self.w_in);
        let bin = g.param(store, self.b_in);
        let whn = g.param(store, self.w_hn);
        let bhn = g.param(store, self.b_hn);
        let xn = g.matmul(x, win);
        let xn = g.add_bias(xn, bin);
        let hn = g.matmul(h, whn);
        let hn = g.add_bias(hn, bhn);
        let gated = g.mul(r, hn);
        let n_pre = g.add(xn, gated);
        let n = g.tanh(n_pre);

        let one_minus_z = g.affine(z, -1.0, 1.0);
        let a = g.mul(one_minus_z, n);
        let b = g.mul(z, h);
        g.add(a, b)
    }

    /// Runs the direction over the sequence, returning per-step hidden
    /// states in *sequence order* (index t holds the state after seeing
    /// step t in this direction's processing order).
    fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: &[NodeId],
        reverse: bool,
    ) -> Vec<NodeId> {
        let batch = g.value(xs[0]).dim(0);
        let mut h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut out = vec![h; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            h = self.step(g, store, xs[t], h);
            out[t] = h;
        }
        out
    }
}

pub struct BiGruLayer {
    fwd: GruCell,
    bwd: GruCell,
}

/// Stack of bidirectional GRU layers; each layer consumes the concatenated
/// forward/backward outputs of the previous one.
pub struct BiGruStack {
    layers: Vec<BiGruLayer>,
    pub hidden: usize,
}

impl BiGruStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { input } else { 2 * hidden };
            layers.push(BiGruLayer {
                fwd: GruCell::new(store, &format!("{name}.l{l}.fwd"), in_dim, hidden, rng),
                bwd: GruCell::new(store, &format!("{name}.l{l}.bwd"), in_dim, hidden, rng),
            });
        }
        BiGruStack { layers, hidden }
    }

    /// Per-step outputs of the last layer, each `(batch, 2*hidden)` with the
    /// forward direction first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: &[NodeId]) -> Vec<NodeId> {
        assert!(!xs.is_empty(), "empty GRU input sequence");
        let mut seq: Vec<NodeId> = xs.to_vec();
        for layer in &self.layers {
            let f = layer.fwd.run(g, store, &seq, false);
            let b = layer.bwd.run(g, store, &seq, true);
            seq = f
                .iter()
                .zip(&b)
                .map(|(&fo, &bo)| g.concat(&[fo, bo]))
                .collect();
        }
        seq
    }
}
