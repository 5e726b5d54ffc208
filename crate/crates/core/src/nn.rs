//! Parameter storage and the small set of layers shared by every network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Named learnable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.round_to_f32();
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Uniform `U(-b, b)` with `b = 1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform(shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-bound..bound))
}

/// 3x3 (or kxk) stride-1 convolution with "same" padding `dilation*(k-1)/2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform([cout, cin, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), fan_in_uniform([1, cout, 1, 1], fan_in, rng));
        Conv {
            weight,
            bias,
            kernel,
            dilation,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Same as [`Conv::new`] but with all weights and biases zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([cout, cin, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        Conv {
            weight,
            bias,
            kernel,
            dilation,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.value(x).channels();
        if c != self.in_channels {
            return Err(invalid(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, c
            )));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.dilation, self.padding())
    }
}

/// PReLU with one learnable slope per channel, initialized to 0.25.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Prelu {
            slope: store.add(format!("{name}.slope"), Tensor::full([1, channels, 1, 1], 0.25)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.param(self.slope);
        g.prelu(x, s)
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Cumulative running statistics for every batch-norm layer of a model.
///
/// Training uses batch statistics; the running mean/variance are the plain
/// average of all batch statistics observed so far (no momentum).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnState {
    pub layers: Vec<BnRunning>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
    pub updates: u64,
}

impl BnState {
    fn register(&mut self, name: String, channels: usize) -> usize {
        self.layers.push(BnRunning {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        });
        self.layers.len() - 1
    }

    /// Fold one batch observation into the cumulative average.
    pub fn observe(&mut self, obs: &crate::autograd::BnObservation) {
        let layer = &mut self.layers[obs.layer];
        let k = layer.updates as f64;
        let unbias = if obs.count > 1 {
            obs.count as f64 / (obs.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..layer.mean.len() {
            let m = (layer.mean[c] * k + obs.mean[c]) / (k + 1.0);
            let v = (layer.var[c] * k + obs.var[c] * unbias) / (k + 1.0);
            layer.mean[c] = m as f32 as f64;
            layer.var[c] = v as f32 as f64;
        }
        layer.updates += 1;
    }
}

/// Whether batch-norm layers use batch statistics (training) or the
/// accumulated running statistics (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub layer: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, bn: &mut BnState, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            layer: bn.register(name.to_string(), channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, state: &BnState) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => {
                let l = &state.layers[self.layer];
                Some((l.mean.as_slice(), l.var.as_slice()))
            }
        };
        g.batch_norm(x, gamma, beta, BN_EPS, self.layer, running)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn params_are_stored_at_single_precision() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(0.1));
        assert_eq!(store.get(id).data()[0], 0.1f32 as f64);
        assert_eq!(store.find("p"), Some(id));
    }

    #[test]
    fn conv_init_is_seeded_and_bounded() {
        let mk = || {
            let mut s = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let c = Conv::new(&mut s, "c", 4, 2, 3, 1, &mut rng);
            (s.get(c.weight).clone(), s.get(c.bias).clone())
        };
        let (w1, b1) = mk();
        let (w2, b2) = mk();
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
        let bound = 1.0 / 36f64.sqrt();
        assert!(w1.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn running_stats_are_cumulative_means() {
        let mut store = ParamStore::new();
        let mut state = BnState::default();
        let bn = BatchNorm::new(&mut store, &mut state, "bn", 1);
        for (m, v) in [(1.0, 2.0), (3.0, 4.0)] {
            state.observe(&crate::autograd::BnObservation {
                layer: bn.layer,
                mean: vec![m],
                var: vec![v],
                count: 2,
            });
        }
        assert_eq!(state.layers[0].mean, vec![2.0]);
        // unbiased: 2*2=4 and 4*2=8, averaged
        assert_eq!(state.layers[0].var, vec![6.0]);
    }
}
