//! The two-branch deraining model: `I = O - f(O) + g(O)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::drn::DetailRepairNet;
use crate::error::Result;
use crate::nn::{BnState, Mode, ParamStore};
use crate::rrn::RainResidualNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DerainModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub bn: BnState,
    pub rrn: RainResidualNet,
    pub drn: Option<DetailRepairNet>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    /// `f(O)`.
    pub rain: Var,
    /// `g(O)`, absent when the detail branch is disabled.
    pub detail: Option<Var>,
    /// `O - f(O) + g(O)`, unclamped.
    pub derained: Var,
}

impl DerainModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let mut bn = BnState::default();
        let rrn = RainResidualNet::new(&mut store, cfg, &mut rng);
        let drn = DetailRepairNet::new(&mut store, &mut bn, cfg, &mut rng);
        Ok(DerainModel {
            cfg: cfg.clone(),
            store,
            bn,
            rrn,
            drn,
        })
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, rainy: Var, mode: Mode) -> Result<Branches> {
        let rain = self.rrn.forward(g, rainy)?;
        let prelim = g.sub(rainy, rain)?;
        let (detail, derained) = match &self.drn {
            Some(drn) => {
                let d = drn.forward(g, rainy, mode, &self.bn)?;
                (Some(d), g.add(prelim, d)?)
            }
            None => (None, prelim),
        };
        Ok(Branches {
            rain,
            detail,
            derained,
        })
    }

    /// `clamp(O - f(O) + g(O), 0, 1)` with inference-mode batch norm.
    pub fn derain(&self, rainy: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let o = g.constant(rainy.clone());
        let b = self.forward(&mut g, o, Mode::Eval)?;
        Ok(g.value(b.derained).map(|v| v.clamp(0.0, 1.0)))
    }

    /// `(f(O), g(O))` in inference mode; `g` is zero when disabled.
    pub fn predict(&self, rainy: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.store);
        let o = g.constant(rainy.clone());
        let b = self.forward(&mut g, o, Mode::Eval)?;
        let detail = match b.detail {
            Some(d) => g.value(d).clone(),
            None => Tensor::zeros(rainy.shape()),
        };
        Ok((g.value(b.rain).clone(), detail))
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BlockKind;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 4,
            rrn_blocks: 1,
            drn_blocks: 1,
            se_reduction: 2,
            ..Default::default()
        }
    }

    #[test]
    fn identity_at_init() {
        let model = DerainModel::new(&small()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn([2, 3, 11, 13], |_, _, _, _| r.random_range(0.0..1.0));
        assert_eq!(model.derain(&x).unwrap(), x);
    }

    #[test]
    fn detail_branch_can_be_disabled() {
        let cfg = ModelConfig {
            drn_block: BlockKind::None,
            ..small()
        };
        let model = DerainModel::new(&cfg).unwrap();
        assert!(model.drn.is_none());
        let x = Tensor::full([1, 3, 9, 9], 0.3);
        let (_, d) = model.predict(&x).unwrap();
        assert_eq!(d, Tensor::zeros(x.shape()));
    }

    #[test]
    fn init_is_seeded() {
        let a = DerainModel::new(&small()).unwrap();
        let b = DerainModel::new(&small()).unwrap();
        assert_eq!(a.store.entries(), b.store.entries());
        let c = DerainModel::new(&ModelConfig {
            init_seed: 1,
            ..small()
        })
        .unwrap();
        assert_ne!(a.store.entries(), c.store.entries());
    }
}
