//! Fixtures and naive reference implementations shared by the integration
//! tests. The oracles here are written directly from the definitions with
//! plain loops and never call into the library's compute kernels.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semidrd::config::{EncoderConfig, TrainConfig};
use semidrd::data::{
    composite, synthesize_background, synthesize_streaks, Image, LabeledBatch, LabeledSample, RainField,
    StreakParams,
};
use semidrd::model::DerainModel;
use semidrd::nn::ParamStore;
use semidrd::tensor::Tensor;

pub fn rand_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.random_range(lo..hi))
}

/// Two channels, one block per branch, random heads: about 670 parameters.
pub fn micro_grad_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.channels = 2;
    cfg.model.rrn_blocks = 1;
    cfg.model.drn_blocks = 1;
    cfg.model.se_reduction = 1;
    cfg.model.zero_init_heads = false;
    cfg.model.init_seed = 3;
    cfg.contrastive.encoder = EncoderConfig::tiny(5);
    cfg.contrastive.bank_capacity = 8;
    cfg.batch_size = 2;
    cfg
}

/// A labeled batch of `n` random `size x size` pairs with sparse rain, and
/// its `(O, B, R)` tensors.
pub fn grad_batch(size: usize, n: usize, seed: u64) -> (LabeledBatch, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<LabeledSample> = (0..n)
        .map(|_| {
            let clean = Image::from_fn(size, size, |_, _, _| rng.random_range(0.05..0.8)).unwrap();
            let rain: Vec<f64> = (0..3 * size * size)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(0.1..0.5)
                    } else {
                        0.0
                    }
                })
                .collect();
            let rain = RainField::new(size, size, rain).unwrap();
            LabeledSample::synthesize(clean, &rain).unwrap()
        })
        .collect();
    let batch = LabeledBatch { samples };
    let (o, b, r) = (batch.rainy().unwrap(), batch.clean().unwrap(), batch.streaks().unwrap());
    (batch, o, b, r)
}

/// Eight 64x64 synthetic pairs plus four "real" rainy images whose streaks
/// come from a different angle and intensity range.
pub fn smoke_data() -> (Vec<LabeledSample>, Vec<Image>) {
    let labeled = (0..8u64)
        .map(|i| {
            let clean = synthesize_background(64, 64, i).unwrap();
            let params = StreakParams {
                angle: -10.0 + 4.0 * i as f64,
                seed: 100 + i,
                ..Default::default()
            };
            LabeledSample::synthesize(clean, &synthesize_streaks(64, 64, &params).unwrap()).unwrap()
        })
        .collect();
    let unlabeled = (0..4u64)
        .map(|i| {
            let clean = synthesize_background(64, 64, 300 + i).unwrap();
            let params = StreakParams {
                angle: 25.0,
                length: 12.0,
                density: 0.08,
                intensity: 0.8,
                seed: 400 + i,
            };
            composite(&clean, &synthesize_streaks(64, 64, &params).unwrap()).unwrap()
        })
        .collect();
    (labeled, unlabeled)
}

/// Micro model (16 channels, 4 blocks per branch) on 32x32 patches.
pub fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig::micro();
    cfg.seed = 7;
    cfg.batch_size = 4;
    cfg.patch_size = 32;
    cfg.contrastive.bank_capacity = 32;
    cfg
}

pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

// ------------------------------------------------------------ naive layers

/// Plain NCHW array.
#[derive(Clone)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr {
            n,
            c,
            h,
            w,
            v: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let [n, c, h, w] = t.shape();
        Arr {
            n,
            c,
            h,
            w,
            v: t.data().to_vec(),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn add(&self, o: &Arr) -> Arr {
        let mut r = self.clone();
        for (a, b) in r.v.iter_mut().zip(&o.v) {
            *a += b;
        }
        r
    }
}

/// Zero-padded "same" convolution, stride 1; `w` is `[co][ci][k][k]`.
pub fn conv(x: &Arr, w: &Tensor, b: &Tensor, dil: usize) -> Arr {
    let [co, ci, k, _] = w.shape();
    assert_eq!(ci, x.c);
    let pad = (dil * (k - 1) / 2) as isize;
    let mut out = Arr::zeros(x.n, co, x.h, x.w);
    for n in 0..x.n {
        for o in 0..co {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = b.data()[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + (ky * dil) as isize - pad;
                                let sx = xx as isize + (kx * dil) as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(n, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    *out.at_mut(n, o, y, xx) = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    let mut r = x.clone();
    r.v.iter_mut().for_each(|v| *v = v.max(0.0));
    r
}

pub fn maxpool2(x: &Arr) -> Arr {
    let mut out = Arr::zeros(x.n, x.c, x.h / 2, x.w / 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h / 2 {
                for xx in 0..x.w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x.at(n, c, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    *out.at_mut(n, c, y, xx) = m;
                }
            }
        }
    }
    out
}

/// The model's layers evaluated from its parameters, looked up by name.
pub struct NaiveModel<'a> {
    store: &'a ParamStore,
    dilations: Vec<usize>,
}

impl<'a> NaiveModel<'a> {
    pub fn new(model: &'a DerainModel) -> Self {
        NaiveModel {
            store: &model.store,
            dilations: model.cfg.dilations.clone(),
        }
    }

    fn p(&self, name: &str) -> &Tensor {
        self.store.get(self.store.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn conv(&self, x: &Arr, name: &str, dil: usize) -> Arr {
        conv(x, self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")), dil)
    }

    fn prelu(&self, x: &Arr, name: &str) -> Arr {
        let a = self.p(&format!("{name}.slope"));
        let mut r = x.clone();
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = r.at_mut(n, c, y, xx);
                        if *v < 0.0 {
                            *v *= a.data()[c];
                        }
                    }
                }
            }
        }
        r
    }

    /// Training-mode batch norm: biased batch variance, eps 1e-5.
    fn bn(&self, x: &Arr, name: &str) -> Arr {
        let (g, b) = (self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")));
        let mut r = x.clone();
        let count = (x.n * x.h * x.w) as f64;
        for c in 0..x.c {
            let mut vals = Vec::new();
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        vals.push(x.at(n, c, y, xx));
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = r.at_mut(n, c, y, xx);
                        *v = g.data()[c] * (*v - mean) / (var + 1e-5).sqrt() + b.data()[c];
                    }
                }
            }
        }
        r
    }

    fn se(&self, x: &Arr, name: &str) -> Arr {
        let sq_w = self.p(&format!("{name}.squeeze.weight"));
        let sq_b = self.p(&format!("{name}.squeeze.bias"));
        let ex_w = self.p(&format!("{name}.excite.weight"));
        let ex_b = self.p(&format!("{name}.excite.bias"));
        let hidden = sq_w.shape()[0];
        let mut r = x.clone();
        for n in 0..x.n {
            let pooled: Vec<f64> = (0..x.c)
                .map(|c| {
                    let mut s = 0.0;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            s += x.at(n, c, y, xx);
                        }
                    }
                    s / (x.h * x.w) as f64
                })
                .collect();
            let z: Vec<f64> = (0..hidden)
                .map(|j| (sq_b.data()[j] + (0..x.c).map(|c| sq_w.at(j, c, 0, 0) * pooled[c]).sum::<f64>()).max(0.0))
                .collect();
            for c in 0..x.c {
                let e = ex_b.data()[c] + (0..hidden).map(|j| ex_w.at(c, j, 0, 0) * z[j]).sum::<f64>();
                let gate = 1.0 / (1.0 + (-e).exp());
                for y in 0..x.h {
                    for xx in 0..x.w {
                        *r.at_mut(n, c, y, xx) *= gate;
                    }
                }
            }
        }
        r
    }

    fn dccl(&self, x: &Arr, name: &str) -> Arr {
        let outs: Vec<Arr> = self.dilations.iter().map(|d| self.conv(x, &format!("{name}.d{d}"), *d)).collect();
        let mut cat = Arr::zeros(x.n, x.c * outs.len(), x.h, x.w);
        for n in 0..x.n {
            for (k, o) in outs.iter().enumerate() {
                for c in 0..o.c {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            *cat.at_mut(n, k * o.c + c, y, xx) = o.at(n, c, y, xx);
                        }
                    }
                }
            }
        }
        self.conv(&cat, &format!("{name}.fuse"), 1)
    }

    fn blocks(&self, prefix: &str) -> usize {
        (0..).take_while(|i| self.store.find(&format!("{prefix}.block{i}.conv1.weight")).is_some()
            || self.store.find(&format!("{prefix}.block{i}.bn1.gamma")).is_some())
            .count()
    }

    /// `f(O)` with SE-gated residual blocks.
    pub fn rrn(&self, o: &Tensor) -> Vec<f64> {
        let mut h = self.prelu(&self.conv(&Arr::from_tensor(o), "rrn.encoder", 1), "rrn.encoder_act");
        for i in 0..self.blocks("rrn") {
            let name = format!("rrn.block{i}");
            let t = self.conv(&h, &format!("{name}.conv1"), 1);
            let t = self.prelu(&t, &format!("{name}.act"));
            let t = self.conv(&t, &format!("{name}.conv2"), 1);
            h = self.se(&t.add(&h), &format!("{name}.se"));
        }
        let h = self.prelu(&self.conv(&h, "rrn.decoder", 1), "rrn.decoder_act");
        self.conv(&h, "rrn.head", 1).v
    }

    /// `g(O)` with SDCAB blocks in training mode.
    pub fn drn(&self, o: &Tensor) -> Vec<f64> {
        let mut h = self.prelu(&self.conv(&Arr::from_tensor(o), "drn.encoder", 1), "drn.encoder_act");
        for i in 0..self.blocks("drn") {
            let name = format!("drn.block{i}");
            let t = self.dccl(&h, &format!("{name}.dccl1"));
            let t = self.bn(&t, &format!("{name}.bn1"));
            let t = self.prelu(&t, &format!("{name}.act"));
            let t = self.dccl(&t, &format!("{name}.dccl2"));
            let t = self.bn(&t, &format!("{name}.bn2"));
            h = h.add(&t);
        }
        let h = self.prelu(&self.conv(&h, "drn.decoder", 1), "drn.decoder_act");
        self.conv(&h, "drn.head", 1).v
    }
}

// ------------------------------------------------------------ encoder

/// Encoder rebuilt from its saved weight file.
pub struct NaiveEncoder {
    stages: Vec<Vec<(Tensor, Tensor)>>,
    taps: Vec<usize>,
}

impl NaiveEncoder {
    pub fn read(path: &Path, cfg: &EncoderConfig) -> Self {
        let bytes = std::fs::read(path).unwrap();
        assert_eq!(&bytes[..8], b"SDRDVGG1");
        let mut pos = 8;
        let u32_at = |pos: &mut usize| {
            let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            v as usize
        };
        let count = u32_at(&mut pos);
        let mut records = Vec::new();
        for _ in 0..count {
            let rank = u32_at(&mut pos);
            let dims: Vec<usize> = (0..rank).map(|_| u32_at(&mut pos)).collect();
            let len: usize = dims.iter().product();
            let vals: Vec<f64> = (0..len)
                .map(|i| f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()) as f64)
                .collect();
            pos += 4 * len;
            records.push((dims, vals));
        }
        assert_eq!(pos, bytes.len());
        let mut it = records.into_iter();
        let stages = cfg
            .stage_convs
            .iter()
            .map(|&k| {
                (0..k)
                    .map(|_| {
                        let (wd, wv) = it.next().unwrap();
                        let (_, bv) = it.next().unwrap();
                        let w = Tensor::from_vec([wd[0], wd[1], wd[2], wd[3]], wv).unwrap();
                        let b = Tensor::from_vec([1, bv.len(), 1, 1], bv).unwrap();
                        (w, b)
                    })
                    .collect()
            })
            .collect();
        NaiveEncoder {
            stages,
            taps: cfg.taps.clone(),
        }
    }

    /// Flattened tap activations of batch element `n`.
    fn features(&self, x: &Tensor, n: usize) -> Vec<Vec<f64>> {
        let mut h = Arr::from_tensor(&x.select(n));
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (w, b) in stage {
                h = relu(&conv(&h, w, b, 1));
            }
            h = maxpool2(&h);
            if self.taps.contains(&(i + 1)) {
                out.push(h.v.clone());
            }
        }
        out
    }

    /// Batch mean of `sum_k sum_i w_i |P_i - A_i|^2 / (|N_ki - A_i|^2 + eps)`.
    pub fn contrastive(&self, a: &Tensor, p: &Tensor, negs: &[Tensor], w: &[f64], eps: f64) -> f64 {
        let d2 = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        let mut total = 0.0;
        for n in 0..a.batch() {
            let fa = self.features(a, n);
            let fp = self.features(p, n);
            for q in negs {
                let fq = self.features(q, n);
                for i in 0..fa.len() {
                    total += w[i] * d2(&fp[i], &fa[i]) / (d2(&fq[i], &fa[i]) + eps);
                }
            }
        }
        total / a.batch() as f64
    }
}

// ------------------------------------------------------------ metrics

pub fn naive_psnr(x: &Tensor, y: &Tensor) -> f64 {
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Sliding 11x11 Gaussian (sigma 1.5) windows over every valid position,
/// with the 2-D weights normalized directly.
pub fn naive_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut win = [[0.0; 11]; 11];
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().flatten().sum();
    win.iter_mut().flatten().for_each(|v| *v /= s);
    let [n, c, h, w] = x.shape();
    let mut planes = 0.0;
    for b in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0.0;
            for top in 0..=h - 11 {
                for left in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let (u, v) = (x.at(b, ch, top + i, left + j), y.at(b, ch, top + i, left + j));
                            let k = win[i][j];
                            mx += k * u;
                            my += k * v;
                            sxx += k * u * u;
                            syy += k * v * v;
                            sxy += k * u * v;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1.0;
                }
            }
            planes += acc / count;
        }
    }
    planes / (n * c) as f64
}
