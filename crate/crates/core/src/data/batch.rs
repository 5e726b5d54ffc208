use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{composite, residual_streaks, stack_fields, stack_images, Image, RainField};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Paired synthetic sample `(O_s, B_s, R̂ = O_s - B_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub rainy: Image,
    pub clean: Image,
    pub streaks: RainField,
}

impl LabeledSample {
    /// Build from a known background and rain layer.
    pub fn synthesize(clean: Image, rain: &RainField) -> Result<Self> {
        let rainy = composite(&clean, rain)?;
        let streaks = residual_streaks(&rainy, &clean)?;
        Ok(LabeledSample {
            rainy,
            clean,
            streaks,
        })
    }

    /// Build from a loaded `(rainy, clean)` pair.
    pub fn from_pair(rainy: Image, clean: Image) -> Result<Self> {
        let streaks = residual_streaks(&rainy, &clean)?;
        Ok(LabeledSample {
            rainy,
            clean,
            streaks,
        })
    }

    fn crop(&self, top: usize, left: usize, size: usize) -> Result<LabeledSample> {
        Ok(LabeledSample {
            rainy: self.rainy.crop(top, left, size)?,
            clean: self.clean.crop(top, left, size)?,
            streaks: self.streaks.crop(top, left, size)?,
        })
    }
}

/// Unpaired rainy image with a pseudo ground truth taken from the labeled
/// clean pool.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub rainy: Image,
    pub pseudo_clean: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub samples: Vec<LabeledSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub samples: Vec<UnlabeledSample>,
}

impl LabeledBatch {
    pub fn rainy(&self) -> Result<Tensor> {
        stack_images(self.samples.iter().map(|s| &s.rainy))
    }

    pub fn clean(&self) -> Result<Tensor> {
        stack_images(self.samples.iter().map(|s| &s.clean))
    }

    pub fn streaks(&self) -> Result<Tensor> {
        stack_fields(self.samples.iter().map(|s| &s.streaks))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl UnlabeledBatch {
    pub fn rainy(&self) -> Result<Tensor> {
        stack_images(self.samples.iter().map(|s| &s.rainy))
    }

    pub fn pseudo_clean(&self) -> Result<Tensor> {
        stack_images(self.samples.iter().map(|s| &s.pseudo_clean))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Labeled(LabeledBatch),
    Unlabeled(UnlabeledBatch),
}

impl Batch {
    pub fn is_labeled(&self) -> bool {
        matches!(self, Batch::Labeled(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Square patch side; `None` feeds whole images (which must then share
    /// one size).
    pub patch: Option<usize>,
    pub seed: u64,
    pub semi_supervised: bool,
}

/// One epoch of batches: labeled batches in shuffled order, each followed by
/// an unlabeled batch when semi-supervised mode is on (strict L/U
/// alternation, labeled first). The unlabeled pool is cycled if it yields
/// fewer batches than the labeled pool.
pub struct BatchStream<'a> {
    labeled: &'a [LabeledSample],
    unlabeled: &'a [Image],
    opts: BatchOptions,
    rng: ChaCha8Rng,
    labeled_chunks: Vec<Vec<usize>>,
    unlabeled_chunks: Vec<Vec<usize>>,
    next_labeled: usize,
    pending_unlabeled: bool,
}

pub fn make_batches<'a>(
    labeled: &'a [LabeledSample],
    unlabeled: &'a [Image],
    opts: BatchOptions,
) -> Result<BatchStream<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if labeled.is_empty() {
        return Err(Error::Config("labeled pool is empty".into()));
    }
    if opts.semi_supervised && unlabeled.is_empty() {
        return Err(Error::Config(
            "semi-supervised mode needs at least one unlabeled image".into(),
        ));
    }
    let check = |h: usize, w: usize, what: &str| -> Result<()> {
        if let Some(p) = opts.patch {
            if p == 0 || h < p || w < p {
                return Err(Error::Config(format!(
                    "{what} image {h}x{w} smaller than patch {p}"
                )));
            }
        }
        Ok(())
    };
    for s in labeled {
        check(s.rainy.height(), s.rainy.width(), "labeled")?;
    }
    for u in unlabeled {
        check(u.height(), u.width(), "unlabeled")?;
    }
    if opts.patch.is_none() {
        let size = (labeled[0].rainy.height(), labeled[0].rainy.width());
        let same = labeled
            .iter()
            .map(|s| (s.rainy.height(), s.rainy.width()))
            .chain(unlabeled.iter().map(|u| (u.height(), u.width())))
            .all(|s| s == size);
        if !same {
            return Err(Error::Config(
                "whole-image batches need equally sized images; set a patch size".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let chunks = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.chunks(opts.batch_size).map(|c| c.to_vec()).collect()
    };
    let labeled_chunks = chunks(labeled.len(), &mut rng);
    let unlabeled_chunks = if opts.semi_supervised {
        chunks(unlabeled.len(), &mut rng)
    } else {
        Vec::new()
    };
    Ok(BatchStream {
        labeled,
        unlabeled,
        opts,
        rng,
        labeled_chunks,
        unlabeled_chunks,
        next_labeled: 0,
        pending_unlabeled: false,
    })
}

impl BatchStream<'_> {
    /// Number of batches this epoch will emit.
    pub fn total(&self) -> usize {
        let l = self.labeled_chunks.len();
        if self.opts.semi_supervised {
            2 * l
        } else {
            l
        }
    }

    fn window(&mut self, h: usize, w: usize) -> (usize, usize, usize) {
        match self.opts.patch {
            Some(p) => (
                self.rng.random_range(0..=h - p),
                self.rng.random_range(0..=w - p),
                p,
            ),
            None => (0, 0, h.min(w)),
        }
    }

    fn labeled_batch(&mut self, chunk: &[usize]) -> Result<LabeledBatch> {
        let mut samples = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &self.labeled[i];
            let (h, w) = (s.rainy.height(), s.rainy.width());
            if self.opts.patch.is_none() {
                samples.push(s.clone());
                continue;
            }
            let (t, l, p) = self.window(h, w);
            samples.push(s.crop(t, l, p)?);
        }
        Ok(LabeledBatch { samples })
    }

    fn unlabeled_batch(&mut self, chunk: &[usize]) -> Result<UnlabeledBatch> {
        let mut samples = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let rainy = &self.unlabeled[i];
            let j = self.rng.random_range(0..self.labeled.len());
            let clean = &self.labeled[j].clean;
            let sample = if self.opts.patch.is_none() {
                UnlabeledSample {
                    rainy: rainy.clone(),
                    pseudo_clean: clean.clone(),
                }
            } else {
                let (t, l, p) = self.window(rainy.height(), rainy.width());
                let rainy = rainy.crop(t, l, p)?;
                let (t, l, p) = self.window(clean.height(), clean.width());
                UnlabeledSample {
                    rainy,
                    pseudo_clean: clean.crop(t, l, p)?,
                }
            };
            samples.push(sample);
        }
        Ok(UnlabeledBatch { samples })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending_unlabeled {
            self.pending_unlabeled = false;
            let k = (self.next_labeled - 1) % self.unlabeled_chunks.len();
            let chunk = self.unlabeled_chunks[k].clone();
            return Some(self.unlabeled_batch(&chunk).map(Batch::Unlabeled));
        }
        if self.next_labeled >= self.labeled_chunks.len() {
            return None;
        }
        let chunk = self.labeled_chunks[self.next_labeled].clone();
        self.next_labeled += 1;
        self.pending_unlabeled = self.opts.semi_supervised;
        Some(self.labeled_batch(&chunk).map(Batch::Labeled))
    }
}
