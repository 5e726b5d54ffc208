//! Dual contrastive regularization: a frozen VGG-style perceptual encoder, a
//! FIFO memory bank of predicted rain layers, negative augmentation, and the
//! supervised / unsupervised ratio losses.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::config::{ContrastiveConfig, EncoderConfig};
use crate::data::RainField;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const WEIGHTS_MAGIC: &[u8; 8] = b"SDRDVGG1";

/// Where the encoder weights came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderRef {
    Seed(u64),
    /// SHA-256 of the weight file.
    File([u8; 32]),
}

/// Frozen convolutional feature extractor: stages of 3x3 conv + ReLU, each
/// closed by a 2x2 max pool; taps are the outputs of selected pools.
#[derive(Clone, Debug)]
pub struct PerceptualEncoder {
    /// `(weight, bias)` per conv, stage by stage.
    stages: Vec<Vec<(Tensor, Tensor)>>,
    taps: Vec<usize>,
    normalize: Option<(Vec<f64>, Vec<f64>)>,
    reference: EncoderRef,
}

impl PerceptualEncoder {
    /// Seeded initialization, or the weight file when `cfg.weights` is set.
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        match &cfg.weights {
            Some(path) => Self::load(cfg, path),
            None => Ok(Self::seeded(cfg)?),
        }
    }

    pub fn seeded(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cin = 3;
        let mut stages = Vec::new();
        for (&n, &width) in cfg.stage_convs.iter().zip(&cfg.stage_widths) {
            let mut convs = Vec::new();
            for _ in 0..n {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn([width, cin, 3, 3], |_, _, _, _| {
                    rng.random_range(-bound..bound) as f32 as f64
                });
                convs.push((w, Tensor::zeros([1, width, 1, 1])));
                cin = width;
            }
            stages.push(convs);
        }
        Ok(PerceptualEncoder {
            stages,
            taps: cfg.taps.clone(),
            normalize: normalization(cfg),
            reference: EncoderRef::Seed(cfg.seed),
        })
    }

    /// Read a weight file laid out as `SDRDVGG1`, a u32 record count, then
    /// per record a u32 rank, u32 dims and a little-endian f32 payload;
    /// records alternate weight and bias for each conv in order.
    pub fn load(cfg: &EncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        let bytes = std::fs::read(path.as_ref())?;
        let hash: [u8; 32] = Sha256::digest(&bytes).into();
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not an encoder weight file".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let expected: usize = cfg.stage_convs.iter().sum::<usize>() * 2;
        if count != expected {
            return Err(Error::Format(format!(
                "weight file has {count} records, layout needs {expected}"
            )));
        }
        let mut cin = 3;
        let mut stages = Vec::new();
        for (&n, &width) in cfg.stage_convs.iter().zip(&cfg.stage_widths) {
            let mut convs = Vec::new();
            for _ in 0..n {
                let w = read_record(&mut r, &[width, cin, 3, 3])?;
                let b = read_record(&mut r, &[width])?;
                let w = Tensor::from_vec([width, cin, 3, 3], w)?;
                let b = Tensor::from_vec([1, width, 1, 1], b)?;
                convs.push((w, b));
                cin = width;
            }
            stages.push(convs);
        }
        Ok(PerceptualEncoder {
            stages,
            taps: cfg.taps.clone(),
            normalize: normalization(cfg),
            reference: EncoderRef::File(hash),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        let convs: Vec<&(Tensor, Tensor)> = self.stages.iter().flatten().collect();
        out.extend_from_slice(&(convs.len() as u32 * 2).to_le_bytes());
        for (w, b) in convs {
            write_record(&mut out, &w.shape(), w.data());
            write_record(&mut out, &[b.channels()], b.data());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn reference(&self) -> EncoderRef {
        self.reference
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// Smallest input side that survives every pooling stage.
    pub fn min_input_size(&self) -> usize {
        1 << self.taps.last().copied().unwrap_or(0)
    }

    /// Tap activations for the images in `x`. Gradients flow to `x`; the
    /// encoder weights are constants.
    pub fn features<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        if let Some((scale, shift)) = &self.normalize {
            h = g.channel_affine(h, scale, shift)?;
        }
        let last = *self.taps.last().expect("validated taps");
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, convs) in self.stages.iter().take(last).enumerate() {
            for (w, b) in convs {
                let w = g.constant_ref(w);
                let b = g.constant_ref(b);
                h = g.conv2d(h, w, Some(b), 1, 1)?;
                h = g.relu(h);
            }
            h = g.max_pool2(h)?;
            if self.taps.contains(&(i + 1)) {
                out.push(h);
            }
        }
        Ok(out)
    }

    /// Tap activations as plain tensors.
    pub fn feature_values(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::detached();
        let v = g.constant(x.clone());
        let taps = self.features(&mut g, v)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }
}

fn normalization(cfg: &EncoderConfig) -> Option<(Vec<f64>, Vec<f64>)> {
    let (mean, std) = (cfg.normalize_mean?, cfg.normalize_std?);
    Some((
        std.iter().map(|s| 1.0 / s).collect(),
        mean.iter().zip(&std).map(|(m, s)| -m / s).collect(),
    ))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("weight file truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_record(r: &mut &[u8], dims: &[usize]) -> Result<Vec<f64>> {
    let rank = read_u32(r)? as usize;
    let found = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if found != dims {
        return Err(Error::Format(format!("record shape {found:?}, expected {dims:?}")));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 4];
    for _ in 0..n {
        read_exact(r, &mut b)?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Ok(data)
}

fn write_record(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Synthetic,
    Real,
}

/// Bounded FIFO of predicted rain layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<(RainField, Origin)>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &(RainField, Origin)> {
        self.entries.iter()
    }

    pub fn push(&mut self, field: RainField, origin: Origin) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((field, origin));
    }

    /// `m` draws, uniform with replacement, over entries matching `filter`.
    pub fn sample(&self, m: usize, filter: Option<Origin>, seed: u64) -> Result<Vec<RainField>> {
        let pool: Vec<&RainField> = self
            .entries
            .iter()
            .filter(|(_, o)| filter.is_none_or(|f| f == *o))
            .map(|(r, _)| r)
            .collect();
        if pool.is_empty() {
            return Err(Error::EmptyBank(match filter {
                Some(o) => format!("no {o:?} entries"),
                None => "bank is empty".into(),
            }));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..m).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect())
    }
}

/// The `m - 1` rain batches added to the anchor, or `None` when the bank
/// has no matching entry. Layer `k` of batch element `n` is draw `k * N + n`
/// of `bank.sample((m - 1) * N, filter, seed)`.
fn rain_batches(
    anchor: &Tensor,
    original: &Tensor,
    bank: &MemoryBank,
    m: usize,
    filter: Option<Origin>,
    seed: u64,
) -> Result<Option<Vec<Tensor>>> {
    if m == 0 {
        return Err(invalid("need at least one negative"));
    }
    if anchor.shape() != original.shape() {
        return Err(invalid("anchor and rainy batch differ in shape"));
    }
    let [n, _, h, w] = anchor.shape();
    let draws = match bank.sample((m - 1) * n, filter, seed) {
        Ok(d) => d,
        Err(Error::EmptyBank(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut out = Vec::with_capacity(m - 1);
    for k in 0..m - 1 {
        let mut t = Tensor::zeros(anchor.shape());
        for b in 0..n {
            let r = draws[k * n + b].fit_to(h, w);
            t.item_mut(b).copy_from_slice(r.data());
        }
        out.push(t);
    }
    Ok(Some(out))
}

/// Negatives for a batch of anchors: `m - 1` augmented images
/// `clamp(anchor + R_k)` with bank-sampled rain layers, then the original
/// rainy batch. With no matching entries every negative is the original
/// rainy batch.
pub fn augment_negatives(
    anchor: &Tensor,
    original: &Tensor,
    bank: &MemoryBank,
    m: usize,
    filter: Option<Origin>,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let Some(rains) = rain_batches(anchor, original, bank, m, filter, seed)? else {
        return Ok(vec![original.clone(); m]);
    };
    let mut out = Vec::with_capacity(m);
    for r in rains {
        out.push(anchor.zip_map(&r, |a, r| (a + r).clamp(0.0, 1.0))?);
    }
    out.push(original.clone());
    Ok(out)
}

/// [`augment_negatives`] on the graph: the augmented negatives are functions
/// of the anchor and carry its gradient; the rain layers and the original
/// rainy batch are constants.
pub fn augment_negatives_graph(
    g: &mut Graph<'_>,
    anchor: Var,
    original: &Tensor,
    bank: &MemoryBank,
    m: usize,
    filter: Option<Origin>,
    seed: u64,
) -> Result<Vec<Var>> {
    let rains = rain_batches(g.value(anchor), original, bank, m, filter, seed)?;
    let mut out = Vec::with_capacity(m);
    match rains {
        None => {
            let o = g.constant(original.clone());
            out.resize(m, o);
        }
        Some(rains) => {
            for r in rains {
                let r = g.constant(r);
                let sum = g.add(anchor, r)?;
                out.push(g.clamp(sum, 0.0, 1.0));
            }
            out.push(g.constant(original.clone()));
        }
    }
    Ok(out)
}

/// Maps a clean image toward the appearance of a reference image.
pub trait DomainTransform {
    fn apply(&self, content: &Tensor, style: &Tensor) -> Result<Tensor>;
}

/// Per-channel mean / standard deviation matching, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStatsTransform {
    pub eps: f64,
}

impl Default for ChannelStatsTransform {
    fn default() -> Self {
        ChannelStatsTransform { eps: 1e-6 }
    }
}

impl DomainTransform for ChannelStatsTransform {
    fn apply(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        Ok(match_statistics(content, style, self.eps)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// `σ_s (x - μ_c) / max(σ_c, eps) + μ_s` per batch element and channel,
/// with population standard deviations; no clamping.
pub fn match_statistics(content: &Tensor, style: &Tensor, eps: f64) -> Result<Tensor> {
    if content.shape()[..2] != style.shape()[..2] {
        return Err(invalid("domain transform needs matching batch and channels"));
    }
    let mut out = content.clone();
    let cp = content.height() * content.width();
    let sp = style.height() * style.width();
    for (o, s) in out.data_mut().chunks_mut(cp).zip(style.data().chunks(sp)) {
        let (mc, sc) = mean_std(o);
        let (ms, ss) = mean_std(s);
        if (mc, sc) == (ms, ss) {
            continue;
        }
        let k = ss / sc.max(eps);
        o.iter_mut().for_each(|v| *v = k * (*v - mc) + ms);
    }
    Ok(out)
}

pub fn domain_transform(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    ChannelStatsTransform::default().apply(content, style)
}

pub(crate) fn mean_std(p: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `sum_k sum_i w_i |φ_i(P) - φ_i(A)|² / (|φ_i(N_k) - φ_i(A)|² + eps)`,
/// averaged over the batch. Only the anchor receives gradients.
pub fn contrastive_loss<'a>(
    g: &mut Graph<'a>,
    anchor: Var,
    positive: &Tensor,
    negatives: &[Tensor],
    encoder: &'a PerceptualEncoder,
    weights: &[f64],
    eps: f64,
) -> Result<Var> {
    let negatives: Vec<Var> = negatives.iter().map(|q| g.constant(q.clone())).collect();
    contrastive_loss_graph(g, anchor, positive, &negatives, encoder, weights, eps)
}

/// [`contrastive_loss`] with negatives on the graph; gradients reach the
/// anchor and every negative that depends on parameters.
pub fn contrastive_loss_graph<'a>(
    g: &mut Graph<'a>,
    anchor: Var,
    positive: &Tensor,
    negatives: &[Var],
    encoder: &'a PerceptualEncoder,
    weights: &[f64],
    eps: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(invalid("contrastive loss needs at least one negative"));
    }
    if weights.len() != encoder.num_taps() {
        return Err(invalid(format!(
            "{} tap weights for {} taps",
            weights.len(),
            encoder.num_taps()
        )));
    }
    let fa = encoder.features(g, anchor)?;
    let fp = encoder.feature_values(positive)?;
    let mut fq: Vec<Vec<Var>> = vec![Vec::with_capacity(negatives.len()); fa.len()];
    let mut seen: Vec<(Var, Vec<Var>)> = Vec::new();
    for &q in negatives {
        let taps = match seen.iter().find(|(v, _)| *v == q) {
            Some((_, t)) => t.clone(),
            None => {
                let t = encoder.features(g, q)?;
                seen.push((q, t.clone()));
                t
            }
        };
        for (i, t) in taps.into_iter().enumerate() {
            fq[i].push(t);
        }
    }
    let mut terms = Vec::with_capacity(fa.len());
    for (i, ((a, p), q)) in fa.into_iter().zip(fp).zip(fq).enumerate() {
        terms.push((g.ratio_loss(a, p, &q, weights[i], eps)?, 1.0));
    }
    g.lincomb(&terms)
}

pub fn contrastive_loss_value(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[Tensor],
    encoder: &PerceptualEncoder,
    weights: &[f64],
    eps: f64,
) -> Result<f64> {
    let mut g = Graph::detached();
    let a = g.constant(anchor.clone());
    let l = contrastive_loss(&mut g, a, positive, negatives, encoder, weights, eps)?;
    Ok(g.value(l).item(0)[0])
}

/// Anchor `I_s`, positive `B_s`, negatives augmented from any bank entry.
/// Gradients reach the anchor directly and through the augmented negatives.
#[allow(clippy::too_many_arguments)]
pub fn supervised_dual_loss<'a>(
    g: &mut Graph<'a>,
    derained: Var,
    clean: &Tensor,
    rainy: &Tensor,
    bank: &MemoryBank,
    encoder: &'a PerceptualEncoder,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<Var> {
    let negatives = augment_negatives_graph(g, derained, rainy, bank, cfg.negatives, None, seed)?;
    contrastive_loss_graph(g, derained, clean, &negatives, encoder, &cfg.weights, cfg.eps)
}

/// Anchor `I_r`, positive the pseudo-clean image restyled toward `I_r` (a
/// constant target), negatives augmented from real-world bank entries only.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_dual_loss<'a>(
    g: &mut Graph<'a>,
    derained: Var,
    pseudo_clean: &Tensor,
    rainy: &Tensor,
    bank: &MemoryBank,
    encoder: &'a PerceptualEncoder,
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<Var> {
    let style = g.value(derained).map(|v| v.clamp(0.0, 1.0));
    let positive = domain_transform(pseudo_clean, &style)?;
    let negatives = augment_negatives_graph(g, derained, rainy, bank, cfg.negatives, Some(Origin::Real), seed)?;
    contrastive_loss_graph(g, derained, &positive, &negatives, encoder, &cfg.weights, cfg.eps)
}
