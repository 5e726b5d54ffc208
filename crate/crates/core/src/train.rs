//! Loss assembly and the alternating semi-supervised training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::contrastive::{
    supervised_dual_loss, unsupervised_dual_loss, MemoryBank, Origin, PerceptualEncoder,
};
use crate::data::{make_batches, Batch, BatchOptions, Image, LabeledBatch, LabeledSample, RainField, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::model::DerainModel;
use crate::nn::Mode;
use crate::optim::{lr_at, Adam};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Supervised,
    Unsupervised,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Supervised => "sup",
            Phase::Unsupervised => "unsup",
        }
    }
}

/// Per-step loss breakdown. Terms not computed in this step are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub lr: f64,
    /// `sup + lambda_unsup * unsup`, missing terms counted as zero.
    pub total: f64,
    pub sup: Option<f64>,
    pub unsup: Option<f64>,
    pub l_d: Option<f64>,
    pub l_r: Option<f64>,
    pub dual_sup: Option<f64>,
    pub dual_unsup: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,phase,lr,l_total,l_sup,l_unsup,l_d,l_r,l_dual_sup,l_dual_unsup";

impl LossReport {
    /// CSV row matching [`LOSS_CSV_HEADER`]; floats round-trip exactly.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.phase.as_str(),
            self.lr,
            self.total,
            opt(self.sup),
            opt(self.unsup),
            opt(self.l_d),
            opt(self.l_r),
            opt(self.dual_sup),
            opt(self.dual_unsup)
        )
    }
}

/// Append-only loss log.
pub struct LossLog {
    out: BufWriter<File>,
}

impl LossLog {
    /// Create (truncating) and write the header.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{LOSS_CSV_HEADER}")?;
        out.flush()?;
        Ok(LossLog { out })
    }

    /// Append to an existing log, writing the header only if it is new.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut out = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        if fresh {
            writeln!(out, "{LOSS_CSV_HEADER}")?;
        }
        out.flush()?;
        Ok(LossLog { out })
    }

    pub fn write(&mut self, r: &LossReport) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Graph nodes and values of a supervised loss evaluation.
pub struct SupervisedTerms {
    pub loss: Var,
    pub rain: Var,
    pub l_d: f64,
    pub l_r: f64,
    pub dual: Option<f64>,
}

/// `L_d + lambda_r L_r + lambda_dual L_dual`, with `L_d = |O - f(O) + g(O) - B|`
/// and `L_r = |f(O) - R|` as means over all elements. The dual term is
/// skipped when its weight is zero.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a DerainModel,
    encoder: &'a PerceptualEncoder,
    bank: &MemoryBank,
    batch: &LabeledBatch,
    cfg: &TrainConfig,
    mode: Mode,
    seed: u64,
) -> Result<SupervisedTerms> {
    let rainy = batch.rainy()?;
    let clean = batch.clean()?;
    let o = g.constant(rainy.clone());
    let br = model.forward(g, o, mode)?;
    let b = g.constant(clean.clone());
    let dd = g.sub(br.derained, b)?;
    let l_d = g.mean_abs(dd);
    let r = g.constant(batch.streaks()?);
    let dr = g.sub(br.rain, r)?;
    let l_r = g.mean_abs(dr);
    let mut terms = vec![(l_d, 1.0), (l_r, cfg.loss.lambda_r)];
    let mut dual = None;
    if cfg.loss.lambda_dual > 0.0 {
        let l = supervised_dual_loss(g, br.derained, &clean, &rainy, bank, encoder, &cfg.contrastive, seed)?;
        dual = Some(scalar(g, l));
        terms.push((l, cfg.loss.lambda_dual));
    }
    let loss = g.lincomb(&terms)?;
    Ok(SupervisedTerms {
        loss,
        rain: br.rain,
        l_d: scalar(g, l_d),
        l_r: scalar(g, l_r),
        dual,
    })
}

pub struct UnsupervisedTerms {
    pub loss: Var,
    pub rain: Var,
}

/// Unsupervised contrastive loss on `I_r = O_r - f(O_r) + g(O_r)`.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a DerainModel,
    encoder: &'a PerceptualEncoder,
    bank: &MemoryBank,
    batch: &UnlabeledBatch,
    cfg: &TrainConfig,
    mode: Mode,
    seed: u64,
) -> Result<UnsupervisedTerms> {
    let rainy = batch.rainy()?;
    let pseudo = batch.pseudo_clean()?;
    let o = g.constant(rainy.clone());
    let br = model.forward(g, o, mode)?;
    let loss = unsupervised_dual_loss(g, br.derained, &pseudo, &rainy, bank, encoder, &cfg.contrastive, seed)?;
    Ok(UnsupervisedTerms { loss, rain: br.rain })
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Stream-splitting hash for per-step and per-epoch seeds.
pub(crate) fn mix(seed: u64, stream: u64, n: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(n.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hooks called by the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _report: &LossReport) -> Result<ControlFlow<()>> {
        Ok(ControlFlow::Continue(()))
    }

    fn on_epoch(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl TrainObserver for Vec<LossReport> {
    fn on_step(&mut self, report: &LossReport) -> Result<ControlFlow<()>> {
        self.push(report.clone());
        Ok(ControlFlow::Continue(()))
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: DerainModel,
    encoder: PerceptualEncoder,
    bank: MemoryBank,
    adam: Adam,
    epoch: u64,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DerainModel::new(&cfg.model)?;
        let encoder = PerceptualEncoder::new(&cfg.contrastive.encoder)?;
        let adam = Adam::new(&cfg.optim, &model.store);
        Ok(Trainer {
            bank: MemoryBank::new(cfg.contrastive.bank_capacity),
            cfg,
            model,
            encoder,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.config.clone();
        cfg.validate()?;
        let model = ck.model()?;
        let encoder = PerceptualEncoder::new(&cfg.contrastive.encoder)?;
        if encoder.reference() != ck.encoder {
            return Err(Error::Config("encoder weights differ from the checkpoint's".into()));
        }
        let mut adam = Adam::new(&cfg.optim, &model.store);
        let shapes_ok = adam.m.len() == ck.adam_m.len()
            && ck.adam_m.iter().zip(&ck.adam_v).zip(&adam.m).all(|((m, v), z)| {
                m.shape() == z.shape() && v.shape() == z.shape()
            });
        if !shapes_ok {
            return Err(Error::Format("optimizer state does not fit the model".into()));
        }
        adam.t = ck.adam_t;
        adam.m = ck.adam_m.clone();
        adam.v = ck.adam_v.clone();
        let mut bank = MemoryBank::new(cfg.contrastive.bank_capacity);
        for (r, o) in ck.bank.iter().flatten() {
            bank.push(r.clone(), *o);
        }
        Ok(Trainer {
            cfg,
            model,
            encoder,
            bank,
            adam,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Change the total epoch budget (e.g. to extend a resumed run).
    pub fn set_epochs(&mut self, epochs: u64) {
        self.cfg.epochs = epochs;
    }

    pub fn model(&self) -> &DerainModel {
        &self.model
    }

    pub fn encoder(&self) -> &PerceptualEncoder {
        &self.encoder
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            encoder: self.encoder.reference(),
            params: self
                .model
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            bn: self.model.bn.layers.clone(),
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            bank: self
                .cfg
                .checkpoint
                .include_bank
                .then(|| self.bank.entries().cloned().collect()),
        }
    }

    /// One optimizer step on `batch`. Unlabeled batches with a zero
    /// unsupervised weight are evaluated and logged but leave the model
    /// untouched.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let lr = lr_at(self.epoch, &self.cfg.optim);
        let seed = mix(self.cfg.seed, 1, self.step);
        let lambda_unsup = self.cfg.lambda_unsup();
        let mut report = LossReport {
            step: self.step,
            epoch: self.epoch,
            phase: if batch.is_labeled() {
                Phase::Supervised
            } else {
                Phase::Unsupervised
            },
            lr,
            total: 0.0,
            sup: None,
            unsup: None,
            l_d: None,
            l_r: None,
            dual_sup: None,
            dual_unsup: None,
        };
        let (grads, observations, rain, origin) = {
            let mut g = Graph::new(&self.model.store);
            let (objective, rain, origin, update) = match batch {
                Batch::Labeled(b) => {
                    let t = supervised_loss(
                        &mut g,
                        &self.model,
                        &self.encoder,
                        &self.bank,
                        b,
                        &self.cfg,
                        Mode::Train,
                        seed,
                    )?;
                    let sup = scalar(&g, t.loss);
                    report.sup = Some(sup);
                    report.l_d = Some(t.l_d);
                    report.l_r = Some(t.l_r);
                    report.dual_sup = t.dual;
                    (t.loss, t.rain, Origin::Synthetic, true)
                }
                Batch::Unlabeled(b) => {
                    let t = unsupervised_loss(
                        &mut g,
                        &self.model,
                        &self.encoder,
                        &self.bank,
                        b,
                        &self.cfg,
                        Mode::Train,
                        seed,
                    )?;
                    let unsup = scalar(&g, t.loss);
                    report.unsup = Some(unsup);
                    report.dual_unsup = Some(unsup);
                    let objective = g.scale(t.loss, lambda_unsup);
                    (objective, t.rain, Origin::Real, lambda_unsup > 0.0)
                }
            };
            report.total = report.sup.unwrap_or(0.0) + lambda_unsup * report.unsup.unwrap_or(0.0);
            if !report.total.is_finite() {
                return Err(self.diverged(format!("non-finite loss in {} step", report.phase.as_str())));
            }
            let grads = update.then(|| g.backward(objective).params(&g, &self.model.store));
            let observations = if update {
                g.bn_observations().to_vec()
            } else {
                Vec::new()
            };
            (grads, observations, g.value(rain).clone(), origin)
        };
        if let Some(grads) = grads {
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(self.diverged("non-finite gradient".into()));
            }
            self.adam.step(&mut self.model.store, &grads, lr);
            for o in &observations {
                self.model.bn.observe(o);
            }
        }
        self.push_rain(&rain, origin)?;
        self.step += 1;
        Ok(report)
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Divergence {
            step: self.step,
            detail,
            last_good: None,
        }
    }

    fn push_rain(&mut self, rain: &Tensor, origin: Origin) -> Result<()> {
        for n in 0..rain.batch() {
            self.bank.push(RainField::from_prediction(rain, n)?, origin);
        }
        Ok(())
    }

    /// Run one epoch. Returns `Break` when the observer asked to stop.
    pub fn run_epoch(
        &mut self,
        labeled: &[LabeledSample],
        unlabeled: &[Image],
        observer: &mut dyn TrainObserver,
    ) -> Result<ControlFlow<()>> {
        let opts = BatchOptions {
            batch_size: self.cfg.batch_size,
            patch: self.cfg.patch(),
            seed: mix(self.cfg.seed, 2, self.epoch),
            semi_supervised: !self.cfg.supervised_only,
        };
        for batch in make_batches(labeled, unlabeled, opts)? {
            let report = self.train_step(&batch?)?;
            if observer.on_step(&report)?.is_break() {
                return Ok(ControlFlow::Break(()));
            }
        }
        self.epoch += 1;
        observer.on_epoch(&self.checkpoint())?;
        Ok(ControlFlow::Continue(()))
    }

    /// Train until the configured epoch count (or until the observer stops
    /// the run). On divergence the error carries the last end-of-epoch
    /// checkpoint.
    pub fn fit(
        &mut self,
        labeled: &[LabeledSample],
        unlabeled: &[Image],
        observer: &mut dyn TrainObserver,
    ) -> Result<Checkpoint> {
        let mut last_good = self.checkpoint();
        while self.epoch < self.cfg.epochs {
            match self.run_epoch(labeled, unlabeled, observer) {
                Ok(ControlFlow::Continue(())) => last_good = self.checkpoint(),
                Ok(ControlFlow::Break(())) => break,
                Err(Error::Divergence { step, detail, .. }) => {
                    return Err(Error::Divergence {
                        step,
                        detail,
                        last_good: Some(Box::new(last_good)),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.checkpoint())
    }
}

pub fn train(
    cfg: TrainConfig,
    labeled: &[LabeledSample],
    unlabeled: &[Image],
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    Trainer::new(cfg)?.fit(labeled, unlabeled, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::config::EncoderConfig;
    use crate::data::{synthesize_background, synthesize_streaks, StreakParams, UnlabeledSample};

    pub(crate) fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.channels = 4;
        cfg.model.se_reduction = 2;
        cfg.model.rrn_blocks = 1;
        cfg.model.drn_blocks = 1;
        cfg.contrastive.encoder = EncoderConfig::tiny(0);
        cfg.contrastive.bank_capacity = 8;
        cfg.batch_size = 2;
        cfg.patch_size = 16;
        cfg.epochs = 2;
        cfg
    }

    fn data(n: usize, seed: u64) -> (Vec<LabeledSample>, Vec<Image>) {
        let labeled = (0..n as u64)
            .map(|i| {
                let clean = synthesize_background(20, 20, seed + i).unwrap();
                let rain = synthesize_streaks(
                    20,
                    20,
                    &StreakParams {
                        seed: seed + 100 + i,
                        ..Default::default()
                    },
                )
                .unwrap();
                LabeledSample::synthesize(clean, &rain).unwrap()
            })
            .collect();
        let unlabeled = (0..n as u64)
            .map(|i| synthesize_background(20, 20, seed + 200 + i).unwrap())
            .collect();
        (labeled, unlabeled)
    }

    #[test]
    fn loss_csv_round_trips_floats() {
        let r = LossReport {
            step: 3,
            epoch: 1,
            phase: Phase::Supervised,
            lr: 2e-4,
            total: 0.1 + 0.2,
            sup: Some(0.1 + 0.2),
            unsup: None,
            l_d: Some(1.0 / 3.0),
            l_r: Some(0.0),
            dual_sup: None,
            dual_unsup: None,
        };
        let row = r.csv_row();
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), LOSS_CSV_HEADER.split(',').count());
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(cols[6], "");
    }

    #[test]
    fn total_decomposition_and_determinism() {
        let (l, u) = data(3, 1);
        let mut cfg = tiny_cfg();
        cfg.loss.lambda_unsup = 0.7;
        let mut a = Vec::new();
        train(cfg.clone(), &l, &u, &mut a).unwrap();
        let mut b = Vec::new();
        train(cfg.clone(), &l, &u, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for r in &a {
            assert_eq!(r.total, r.sup.unwrap_or(0.0) + 0.7 * r.unsup.unwrap_or(0.0));
            assert!(r.total.is_finite());
        }
        assert_eq!(a[0].phase, Phase::Supervised);
        assert_eq!(a[1].phase, Phase::Unsupervised);
    }

    #[test]
    fn unlabeled_step_without_weight_changes_nothing() {
        let (l, u) = data(2, 2);
        let mut cfg = tiny_cfg();
        cfg.loss.lambda_unsup = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        t.train_step(&Batch::Labeled(LabeledBatch { samples: l.clone() })).unwrap();
        let before = (t.model.store.clone(), t.model.bn.clone(), t.adam.clone());
        let batch = UnlabeledBatch {
            samples: u
                .iter()
                .map(|r| UnlabeledSample {
                    rainy: r.clone(),
                    pseudo_clean: l[0].clean.clone(),
                })
                .collect(),
        };
        let r = t.train_step(&Batch::Unlabeled(batch)).unwrap();
        assert!(r.unsup.unwrap().is_finite());
        assert_eq!(r.total, 0.0);
        assert_eq!(before, (t.model.store.clone(), t.model.bn.clone(), t.adam.clone()));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (l, u) = data(2, 3);
        let mut cfg = tiny_cfg();
        cfg.checkpoint.include_bank = true;
        let mut full = Vec::new();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let _ = t.run_epoch(&l, &u, &mut full).unwrap();
        let ck = t.checkpoint();
        let _ = t.run_epoch(&l, &u, &mut full).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        save_checkpoint(&ck, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded, ck);
        let x = l[0].rainy.to_tensor();
        assert_eq!(loaded.model().unwrap().derain(&x).unwrap(), ck.model().unwrap().derain(&x).unwrap());

        let mut resumed = Vec::new();
        let mut t2 = Trainer::from_checkpoint(&loaded).unwrap();
        let _ = t2.run_epoch(&l, &u, &mut resumed).unwrap();
        assert_eq!(resumed[..], full[full.len() - resumed.len()..]);
    }

    #[test]
    fn checkpoint_errors() {
        let cfg = tiny_cfg();
        let ck = Trainer::new(cfg).unwrap().checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err().kind(), "format");
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(Checkpoint::from_bytes(&v2).unwrap_err().kind(), "version");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad).unwrap_err().kind(), "format");
        assert!(ck.bank.is_none());
    }

    #[test]
    fn divergence_keeps_last_checkpoint() {
        let (l, u) = data(2, 4);
        let mut cfg = tiny_cfg();
        cfg.supervised_only = true;
        cfg.optim.lr = 1e300;
        cfg.epochs = 50;
        let err = train(cfg, &l, &u, &mut ()).unwrap_err();
        match err {
            Error::Divergence { last_good, .. } => assert!(last_good.is_some()),
            e => panic!("unexpected {e}"),
        }
    }
}
