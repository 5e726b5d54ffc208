//! Detail repair network `g`: predicts the signed detail residual added back
//! after rain subtraction, built from structure detail context aggregation
//! blocks (SDCAB). Also hosts the receptive-field calculator and its
//! impulse-response oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{BlockKind, ModelConfig};
use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, BnState, Conv, Mode, ParamStore, Prelu};
use crate::rrn::check_input;
use crate::tensor::Tensor;

/// Dilated convolution concatenation layer: parallel 3x3 convs at each
/// dilation (M -> M each), concatenated and fused by a 1x1 conv (kM -> M).
#[derive(Clone, Debug)]
pub struct Dccl {
    pub branches: Vec<Conv>,
    pub fuse: Conv,
}

impl Dccl {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dilations: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let branches = dilations
            .iter()
            .map(|&d| Conv::new(store, &format!("{name}.d{d}"), channels, channels, 3, d, rng))
            .collect::<Vec<_>>();
        let fuse = Conv::new(store, &format!("{name}.fuse"), channels * branches.len(), channels, 1, 1, rng);
        Dccl { branches, fuse }
    }
}

pub fn dccl(g: &mut Graph, x: Var, layer: &Dccl) -> Result<Var> {
    let outs = layer
        .branches
        .iter()
        .map(|b| b.forward(g, x))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat(&outs)?;
    layer.fuse.forward(g, cat)
}

/// `x + BN2(DCCL2(PReLU(BN1(DCCL1(x)))))`.
#[derive(Clone, Debug)]
pub struct Sdcab {
    pub dccl1: Dccl,
    pub bn1: BatchNorm,
    pub act: Prelu,
    pub dccl2: Dccl,
    pub bn2: BatchNorm,
}

impl Sdcab {
    pub fn new(
        store: &mut ParamStore,
        bn: &mut BnState,
        name: &str,
        channels: usize,
        dilations: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Sdcab {
            dccl1: Dccl::new(store, &format!("{name}.dccl1"), channels, dilations, rng),
            bn1: BatchNorm::new(store, bn, &format!("{name}.bn1"), channels),
            act: Prelu::new(store, &format!("{name}.act"), channels),
            dccl2: Dccl::new(store, &format!("{name}.dccl2"), channels, dilations, rng),
            bn2: BatchNorm::new(store, bn, &format!("{name}.bn2"), channels),
        }
    }
}

pub fn sdcab(g: &mut Graph, x: Var, block: &Sdcab, mode: Mode, bn: &BnState) -> Result<Var> {
    let h = dccl(g, x, &block.dccl1)?;
    let h = block.bn1.forward(g, h, mode, bn)?;
    let h = block.act.forward(g, h)?;
    let h = dccl(g, h, &block.dccl2)?;
    let h = block.bn2.forward(g, h, mode, bn)?;
    g.add(x, h)
}

#[derive(Clone, Debug)]
pub enum DetailBlock {
    Direct {
        conv1: Conv,
        act1: Prelu,
        conv2: Conv,
        act2: Prelu,
    },
    Residual {
        conv1: Conv,
        act: Prelu,
        conv2: Conv,
    },
    Sdcab(Sdcab),
}

impl DetailBlock {
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode, bn: &BnState) -> Result<Var> {
        match self {
            DetailBlock::Direct {
                conv1,
                act1,
                conv2,
                act2,
            } => {
                let h = conv1.forward(g, x)?;
                let h = act1.forward(g, h)?;
                let h = conv2.forward(g, h)?;
                act2.forward(g, h)
            }
            DetailBlock::Residual { conv1, act, conv2 } => {
                let h = conv1.forward(g, x)?;
                let h = act.forward(g, h)?;
                let h = conv2.forward(g, h)?;
                g.add(x, h)
            }
            DetailBlock::Sdcab(b) => sdcab(g, x, b, mode, bn),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetailRepairNet {
    pub encoder: Conv,
    pub encoder_act: Prelu,
    pub blocks: Vec<DetailBlock>,
    pub decoder: Conv,
    pub decoder_act: Prelu,
    pub head: Conv,
}

impl DetailRepairNet {
    /// `None` when the configuration disables the detail branch.
    pub fn new(store: &mut ParamStore, bn: &mut BnState, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Option<Self> {
        if cfg.drn_block == BlockKind::None {
            return None;
        }
        let m = cfg.channels;
        let encoder = Conv::new(store, "drn.encoder", 3, m, 3, 1, rng);
        let encoder_act = Prelu::new(store, "drn.encoder_act", m);
        let blocks = (0..cfg.drn_blocks)
            .map(|i| {
                let name = format!("drn.block{i}");
                match cfg.drn_block {
                    BlockKind::Direct => DetailBlock::Direct {
                        conv1: Conv::new(store, &format!("{name}.conv1"), m, m, 3, 1, rng),
                        act1: Prelu::new(store, &format!("{name}.act1"), m),
                        conv2: Conv::new(store, &format!("{name}.conv2"), m, m, 3, 1, rng),
                        act2: Prelu::new(store, &format!("{name}.act2"), m),
                    },
                    BlockKind::Residual => DetailBlock::Residual {
                        conv1: Conv::new(store, &format!("{name}.conv1"), m, m, 3, 1, rng),
                        act: Prelu::new(store, &format!("{name}.act"), m),
                        conv2: Conv::new(store, &format!("{name}.conv2"), m, m, 3, 1, rng),
                    },
                    BlockKind::Sdcab => {
                        DetailBlock::Sdcab(Sdcab::new(store, bn, &name, m, &cfg.dilations, rng))
                    }
                    BlockKind::None => unreachable!(),
                }
            })
            .collect();
        let decoder = Conv::new(store, "drn.decoder", m, m, 3, 1, rng);
        let decoder_act = Prelu::new(store, "drn.decoder_act", m);
        let head = if cfg.zero_init_heads {
            Conv::zeros(store, "drn.head", m, 3, 3, 1)
        } else {
            Conv::new(store, "drn.head", m, 3, 3, 1, rng)
        };
        Some(DetailRepairNet {
            encoder,
            encoder_act,
            blocks,
            decoder,
            decoder_act,
            head,
        })
    }

    /// Number of layers: encoder, blocks, decoder, head.
    pub fn depth(&self) -> usize {
        self.blocks.len() + 2
    }

    /// Detail residual `g(O)`, signed, same spatial size as `O`.
    pub fn forward(&self, g: &mut Graph, rainy: Var, mode: Mode, bn: &BnState) -> Result<Var> {
        self.forward_to_depth(g, rainy, self.depth(), mode, bn)
    }

    /// Output of layer `depth`: 0 is the encoder, `1..=blocks` the blocks,
    /// then the decoder and the head.
    pub fn forward_to_depth(&self, g: &mut Graph, rainy: Var, depth: usize, mode: Mode, bn: &BnState) -> Result<Var> {
        if depth > self.depth() {
            return Err(invalid(format!("depth {depth} exceeds network depth {}", self.depth())));
        }
        check_input(g.value(rainy))?;
        let mut h = self.encoder.forward(g, rainy)?;
        h = self.encoder_act.forward(g, h)?;
        for b in self.blocks.iter().take(depth) {
            h = b.forward(g, h, mode, bn)?;
        }
        if depth > self.blocks.len() {
            h = self.decoder.forward(g, h)?;
            h = self.decoder_act.forward(g, h)?;
        }
        if depth > self.blocks.len() + 1 {
            h = self.head.forward(g, h)?;
        }
        Ok(h)
    }
}

/// How each detail block widens the receptive field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfLayout {
    /// Two dilated-concatenation stages per block; the widest branch of each
    /// stage adds `2 * max(dilation)`.
    Sdcab,
    /// One 3x3 conv at `max(dilation)` per block (the layer table layout).
    SingleConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfSpec {
    pub blocks: usize,
    pub dilations: Vec<usize>,
    pub layout: RfLayout,
}

impl RfSpec {
    pub fn sdcab(blocks: usize, dilations: &[usize]) -> Self {
        RfSpec {
            blocks,
            dilations: dilations.to_vec(),
            layout: RfLayout::Sdcab,
        }
    }

    /// 16 blocks with a single dilation-7 conv each.
    pub fn layer_table() -> Self {
        RfSpec {
            blocks: 16,
            dilations: vec![7],
            layout: RfLayout::SingleConv,
        }
    }

    fn max_dilation(&self) -> Result<usize> {
        match self.dilations.iter().max() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(invalid("dilation set must be non-empty and positive")),
        }
    }

    /// Side of the square input region that influences one output pixel of
    /// layer `depth`.
    pub fn receptive_field(&self, depth: usize) -> Result<usize> {
        let dmax = self.max_dilation()?;
        if depth > self.blocks + 2 {
            return Err(invalid(format!(
                "depth {depth} beyond the {} layers of the network",
                self.blocks + 3
            )));
        }
        let stages = match self.layout {
            RfLayout::Sdcab => 2,
            RfLayout::SingleConv => 1,
        };
        let blocks = depth.min(self.blocks);
        let tail = depth - blocks;
        Ok(3 + blocks * stages * 2 * dmax + 2 * tail)
    }

    /// Ground truth for [`RfSpec::receptive_field`]: push a centered delta
    /// through the first `depth` layers of an all-ones network without
    /// batch normalization and measure the nonzero bounding box.
    pub fn impulse_footprint(&self, depth: usize) -> Result<usize> {
        self.max_dilation()?;
        if depth > self.blocks + 2 {
            return Err(invalid(format!("depth {depth} beyond network")));
        }
        // Dilated lattices can stop short of the border while still being
        // clipped by it, so also require the extent to survive a doubling.
        let mut side = 33;
        let mut prev = self.footprint_at(depth, side)?;
        loop {
            side = 2 * side + 1;
            let next = self.footprint_at(depth, side)?;
            if !prev.1 && !next.1 && prev.0 == next.0 {
                return Ok(next.0);
            }
            prev = next;
        }
    }

    fn footprint_at(&self, depth: usize, side: usize) -> Result<(usize, bool)> {
        let center = side / 2;
        let impulse = Tensor::from_fn([1, 3, side, side], |_, _, y, x| {
            if y == center && x == center {
                1.0
            } else {
                0.0
            }
        });
        let out = match self.layout {
            RfLayout::Sdcab => {
                let cfg = ModelConfig {
                    channels: 1,
                    drn_blocks: self.blocks,
                    drn_block: BlockKind::Sdcab,
                    dilations: self.dilations.clone(),
                    ..Default::default()
                };
                let mut store = ParamStore::new();
                let mut bn = BnState::default();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let net = DetailRepairNet::new(&mut store, &mut bn, &cfg, &mut rng).expect("sdcab net");
                set_all_ones(&mut store);
                let mut g = Graph::new(&store);
                let x = g.constant(impulse);
                // Eval mode with fresh statistics (mean 0, var 1) is a
                // positive rescale, i.e. normalization disabled.
                let y = net.forward_to_depth(&mut g, x, depth, Mode::Eval, &bn)?;
                g.value(y).clone()
            }
            RfLayout::SingleConv => {
                let dmax = self.max_dilation()?;
                let mut store = ParamStore::new();
                let mut layers = vec![Conv::zeros(&mut store, "l0", 3, 1, 3, 1)];
                for i in 0..self.blocks {
                    layers.push(Conv::zeros(&mut store, &format!("b{i}"), 1, 1, 3, dmax));
                }
                layers.push(Conv::zeros(&mut store, "dec", 1, 1, 3, 1));
                layers.push(Conv::zeros(&mut store, "head", 1, 1, 3, 1));
                set_all_ones(&mut store);
                let mut g = Graph::new(&store);
                let mut h = g.constant(impulse);
                for l in layers.iter().take(depth + 1) {
                    h = l.forward(&mut g, h)?;
                }
                g.value(h).clone()
            }
        };
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for c in 0..out.channels() {
            for y in 0..side {
                for x in 0..side {
                    if out.at(0, c, y, x) != 0.0 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
        }
        if y0 == usize::MAX {
            return Err(invalid("impulse response vanished"));
        }
        let border = y0 == 0 || x0 == 0 || y1 == side - 1 || x1 == side - 1;
        Ok(((y1 - y0 + 1).max(x1 - x0 + 1), border))
    }
}

fn set_all_ones(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape();
        let v = if name.ends_with(".bias") || name.ends_with(".beta") {
            0.0
        } else {
            1.0
        };
        *store.get_mut(id) = Tensor::full(shape, v);
    }
}

/// Receptive field of layer `depth` of the default 16-block SDCAB network
/// with the given dilation set.
pub fn receptive_field(depth: usize, dilations: &[usize]) -> Result<usize> {
    RfSpec::sdcab(16, dilations).receptive_field(depth)
}
