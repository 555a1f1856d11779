use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, NodeId};
use super::init::uniform_fan_in;
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[out_ch, in_ch, k, k], fan_in, rng),
            ParamKind::Trainable,
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_fan_in(&[out_ch], fan_in, rng),
                ParamKind::Trainable,
            )
        });
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Widens the first convolution from 3 input channels to `new_channels`.
    /// Channels 0..3 keep their weights; added channels start at zero so an
    /// input whose extra channels are zero reproduces the 3-channel output.
    pub fn widen_input(&mut self, store: &mut ParamStore, new_channels: usize) {
        let old = store.value(self.w).clone();
        let (out_ch, in_ch, k) = (old.dim(0), old.dim(1), old.dim(2));
        let mut data = vec![0.0; out_ch * new_channels * k * k];
        for o in 0..out_ch {
            for c in 0..in_ch {
                for i in 0..k * k {
                    data[(o * new_channels + c) * k * k + i] =
                        old.data()[(o * in_ch + c) * k * k + i];
                }
            }
        }
        store.replace_value(self.w, Tensor::from_vec(&[out_ch, new_channels, k, k], data));
        self.in_ch = new_channels;
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // weights stored (in, out) so forward is a plain matmul
        let w = store.add(
            format!("{name}.weight"),
            uniform_fan_in(&[in_f, out_f], in_f, rng),
            ParamKind::Trainable,
        );
        let b = store.add(
            format!("{name}.bias"),
            uniform_fan_in(&[out_f], in_f, rng),
            ParamKind::Trainable,
        );
        Linear { w, b, in_f, out_f }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub ch: usize,
    /// When set, the layer is a plain per-channel affine `gamma*x + beta`;
    /// used by tests that need the layer linear and batch-independent.
    pub passthrough: bool,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(&[ch]), ParamKind::Trainable);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[ch]), ParamKind::Trainable);
        let run_mean = store.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[ch]),
            ParamKind::Buffer,
        );
        let run_var = store.add(
            format!("{name}.running_var"),
            Tensor::ones(&[ch]),
            ParamKind::Buffer,
        );
        BatchNorm {
            gamma,
            beta,
            run_mean,
            run_var,
            ch,
            passthrough: false,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> NodeId {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if self.passthrough {
            let zeros = vec![0.0; self.ch];
            // variance such that inv_std == 1 exactly
            let ones = vec![1.0 - BN_EPS; self.ch];
            let (y, _) = g.batch_norm(x, gamma, beta, BN_EPS, Some((zeros, ones)));
            return y;
        }
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BN_EPS, None);
                let (mean, var) = stats.expect("batch stats in train mode");
                // running update uses the unbiased variance, matching the
                // usual convention
                let n = (g.value(x).len() / self.ch) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = store.value_mut(self.run_mean);
                for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = store.value_mut(self.run_var);
                for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                y
            }
            Mode::Eval => {
                let mean = store.value(self.run_mean).data().to_vec();
                let var = store.value(self.run_var).data().to_vec();
                let (y, _) = g.batch_norm(x, gamma, beta, BN_EPS, Some((mean, var)));
                y
            }
        }
    }
}

pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p out of range: {p}");
        Dropout { p }
    }

    /// Inverted dropout; identity in eval mode or when no rng is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> NodeId {
        if mode == Mode::Eval || self.p == 0.0 {
            return x;
        }
        let rng = match rng {
            Some(r) => r,
            None => return x,
        };
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let mask_data: Vec<f64> = (0..g.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(g.value(x).shape(), mask_data);
        g.mul_const(x, mask)
    }
}
