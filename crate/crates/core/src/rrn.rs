//! Rain residual network `f`: maps a rainy image to its predicted rain layer
//! through a stack of squeeze-and-excitation residual blocks.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::nn::{Conv, ParamStore, Prelu};
use crate::tensor::Tensor;

/// Channel gate: global average pool, `C -> C/r` bottleneck with ReLU,
/// `C/r -> C` expansion and a sigmoid.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl SeGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        SeGate {
            squeeze: Conv::new(store, &format!("{name}.squeeze"), channels, hidden, 1, 1, rng),
            excite: Conv::new(store, &format!("{name}.excite"), hidden, channels, 1, 1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_channels
    }

    /// The per-channel weights in `(0, 1)`, shaped `[N, C, 1, 1]`.
    pub fn weights(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let h = self.squeeze.forward(g, pooled)?;
        let h = g.relu(h);
        let e = self.excite.forward(g, h)?;
        Ok(g.sigmoid(e))
    }
}

/// `x` scaled per channel by the SE weights computed from `x`.
pub fn se_gate(g: &mut Graph, x: Var, se: &SeGate) -> Result<Var> {
    let c = g.value(x).channels();
    if c != se.channels() {
        return Err(invalid(format!("se_gate: {} channels, gate expects {}", c, se.channels())));
    }
    let w = se.weights(g, x)?;
    g.channel_scale(x, w)
}

#[derive(Clone, Debug)]
pub struct RainResidualBlock {
    pub conv1: Conv,
    pub act: Prelu,
    pub conv2: Conv,
    /// `None` reduces the block to a plain residual block.
    pub se: Option<SeGate>,
}

impl RainResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        se_reduction: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        RainResidualBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, rng),
            act: Prelu::new(store, &format!("{name}.act"), channels),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, rng),
            se: se_reduction.map(|r| SeGate::new(store, &format!("{name}.se"), channels, r, rng)),
        }
    }
}

/// `SE(conv(act(conv(x))) + x)`.
pub fn rain_residual_block(g: &mut Graph, x: Var, block: &RainResidualBlock) -> Result<Var> {
    let h = block.conv1.forward(g, x)?;
    let h = block.act.forward(g, h)?;
    let h = block.conv2.forward(g, h)?;
    let r = g.add(h, x)?;
    match &block.se {
        Some(se) => se_gate(g, r, se),
        None => Ok(r),
    }
}

pub const MIN_INPUT_SIZE: usize = 9;

#[derive(Clone, Debug)]
pub struct RainResidualNet {
    pub encoder: Conv,
    pub encoder_act: Prelu,
    pub blocks: Vec<RainResidualBlock>,
    pub decoder: Conv,
    pub decoder_act: Prelu,
    pub head: Conv,
}

impl RainResidualNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = cfg.channels;
        let se = cfg.se.then_some(cfg.se_reduction);
        let encoder = Conv::new(store, "rrn.encoder", 3, m, 3, 1, rng);
        let encoder_act = Prelu::new(store, "rrn.encoder_act", m);
        let blocks = (0..cfg.rrn_blocks)
            .map(|i| RainResidualBlock::new(store, &format!("rrn.block{i}"), m, se, rng))
            .collect();
        let decoder = Conv::new(store, "rrn.decoder", m, m, 3, 1, rng);
        let decoder_act = Prelu::new(store, "rrn.decoder_act", m);
        let head = if cfg.zero_init_heads {
            Conv::zeros(store, "rrn.head", m, 3, 3, 1)
        } else {
            Conv::new(store, "rrn.head", m, 3, 3, 1, rng)
        };
        RainResidualNet {
            encoder,
            encoder_act,
            blocks,
            decoder,
            decoder_act,
            head,
        }
    }

    /// Predicted rain layer `f(O)`, unclamped, same spatial size as `O`.
    pub fn forward(&self, g: &mut Graph, rainy: Var) -> Result<Var> {
        check_input(g.value(rainy))?;
        let mut h = self.encoder.forward(g, rainy)?;
        h = self.encoder_act.forward(g, h)?;
        for b in &self.blocks {
            h = rain_residual_block(g, h, b)?;
        }
        h = self.decoder.forward(g, h)?;
        h = self.decoder_act.forward(g, h)?;
        self.head.forward(g, h)
    }
}

pub(crate) fn check_input(t: &Tensor) -> Result<()> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(invalid(format!("network input needs 3 channels, got {c}")));
    }
    if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
        return Err(invalid(format!(
            "network input {h}x{w} below minimum {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
        )));
    }
    if !t.is_finite() {
        return Err(invalid("network input contains non-finite values"));
    }
    Ok(())
}

/// `clamp(O - f(O), 0, 1)`.
pub fn derain_preliminary(rainy: &Tensor, rain: &Tensor) -> Result<Tensor> {
    rainy.zip_map(rain, |o, r| (o - r).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
    }

    fn eval(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let v = g.constant(x.clone());
        let y = f(&mut g, v)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn se_weights_in_open_unit_interval() {
        let mut s = ParamStore::new();
        let se = SeGate::new(&mut s, "se", 8, 4, &mut rng());
        let x = rand_tensor([2, 8, 5, 5], 1).map(|v| 50.0 * v);
        let w = eval(&s, &x, |g, v| se.weights(g, v)).unwrap();
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn symmetric_se_gives_equal_gates() {
        let mut s = ParamStore::new();
        let se = SeGate::new(&mut s, "se", 4, 2, &mut rng());
        *s.get_mut(se.squeeze.weight) = Tensor::full([2, 4, 1, 1], 0.3);
        *s.get_mut(se.excite.weight) = Tensor::full([4, 2, 1, 1], -0.7);
        *s.get_mut(se.squeeze.bias) = Tensor::full([1, 2, 1, 1], 0.1);
        *s.get_mut(se.excite.bias) = Tensor::full([1, 4, 1, 1], 0.2);
        let plane = rand_tensor([1, 1, 3, 3], 2);
        let x = Tensor::from_fn([1, 4, 3, 3], |_, _, y, xx| plane.at(0, 0, y, xx));
        let w = eval(&s, &x, |g, v| se.weights(g, v)).unwrap();
        assert!(w.data().iter().all(|&v| v == w.data()[0]));
    }

    #[test]
    fn se_gate_hand_evaluation() {
        // 1x4x2x2 input, C/r = 2
        let mut s = ParamStore::new();
        let se = SeGate::new(&mut s, "se", 4, 2, &mut rng());
        let w1 = [0.5, -0.25, 0.1, 0.0, -0.3, 0.2, 0.4, 0.6];
        let b1 = [0.05, -0.1];
        let w2 = [1.0, -1.0, 0.5, 0.5, -0.2, 0.3, 0.0, 2.0];
        let b2 = [0.0, 0.1, -0.1, 0.2];
        *s.get_mut(se.squeeze.weight) = Tensor::from_vec([2, 4, 1, 1], w1.to_vec()).unwrap();
        *s.get_mut(se.squeeze.bias) = Tensor::from_vec([1, 2, 1, 1], b1.to_vec()).unwrap();
        *s.get_mut(se.excite.weight) = Tensor::from_vec([4, 2, 1, 1], w2.to_vec()).unwrap();
        *s.get_mut(se.excite.bias) = Tensor::from_vec([1, 4, 1, 1], b2.to_vec()).unwrap();
        let xs: Vec<f64> = (0..16).map(|i| (i as f64 - 7.0) * 0.3).collect();
        let x = Tensor::from_vec([1, 4, 2, 2], xs.clone()).unwrap();
        let out = eval(&s, &x, |g, v| se_gate(g, v, &se)).unwrap();

        let pool: Vec<f64> = (0..4).map(|c| xs[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0).collect();
        let hidden: Vec<f64> = (0..2)
            .map(|j| (b1[j] + (0..4).map(|c| w1[j * 4 + c] * pool[c]).sum::<f64>()).max(0.0))
            .collect();
        for c in 0..4 {
            let z = b2[c] + w2[c * 2] * hidden[0] + w2[c * 2 + 1] * hidden[1];
            let gate = 1.0 / (1.0 + (-z).exp());
            for i in 0..4 {
                assert!((out.data()[c * 4 + i] - gate * xs[c * 4 + i]).abs() < 1e-12);
            }
        }
        let bad = Tensor::zeros([1, 3, 2, 2]);
        assert!(eval(&s, &bad, |g, v| se_gate(g, v, &se)).is_err());
    }

    #[test]
    fn zero_block_halves_input() {
        let mut s = ParamStore::new();
        let b = RainResidualBlock::new(&mut s, "b", 4, Some(2), &mut rng());
        for id in s.ids().collect::<Vec<_>>() {
            if !s.name(id).ends_with("slope") {
                let shape = s.get(id).shape();
                *s.get_mut(id) = Tensor::zeros(shape);
            }
        }
        let x = rand_tensor([1, 4, 16, 16], 3);
        let y = eval(&s, &x, |g, v| rain_residual_block(g, v, &b)).unwrap();
        assert_eq!(y.shape(), [1, 4, 16, 16]);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn block_without_se_is_plain_residual() {
        let mut s = ParamStore::new();
        let b = RainResidualBlock::new(&mut s, "b", 3, None, &mut rng());
        let x = rand_tensor([1, 3, 6, 6], 4);
        let y = eval(&s, &x, |g, v| rain_residual_block(g, v, &b)).unwrap();
        let direct = eval(&s, &x, |g, v| {
            let h = b.conv1.forward(g, v)?;
            let h = b.act.forward(g, h)?;
            b.conv2.forward(g, h)
        })
        .unwrap();
        let expect = direct.zip_map(&x, |a, b| a + b).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn forward_shapes_and_zero_head() {
        let cfg = ModelConfig {
            channels: 4,
            rrn_blocks: 2,
            se_reduction: 2,
            ..Default::default()
        };
        let mut s = ParamStore::new();
        let net = RainResidualNet::new(&mut s, &cfg, &mut rng());
        for (h, w) in [(17, 23), (16, 16), (9, 9)] {
            let x = rand_tensor([2, 3, h, w], 5).map(|v| v.abs());
            let y = eval(&s, &x, |g, v| net.forward(g, v)).unwrap();
            assert_eq!(y.shape(), [2, 3, h, w]);
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
        let small = Tensor::zeros([1, 3, 8, 12]);
        assert!(eval(&s, &small, |g, v| net.forward(g, v)).is_err());
        let nan = Tensor::full([1, 3, 9, 9], f64::NAN);
        assert!(eval(&s, &nan, |g, v| net.forward(g, v)).is_err());
    }

    #[test]
    fn preliminary_derain_examples() {
        let o = rand_tensor([1, 3, 4, 4], 6).map(|v| v.abs());
        let zero = Tensor::zeros(o.shape());
        assert_eq!(derain_preliminary(&o, &zero).unwrap(), o);
        assert!(derain_preliminary(&o, &o).unwrap().data().iter().all(|&v| v == 0.0));
        let r = rand_tensor([1, 3, 4, 4], 7);
        let d = derain_preliminary(&o, &r).unwrap();
        for i in 0..o.len() {
            assert_eq!(d.data()[i], (o.data()[i] - r.data()[i]).clamp(0.0, 1.0));
        }
    }
}
