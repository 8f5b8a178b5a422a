//! The complete interpolation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::mean_spacing;
use crate::losses::LossInputs;
use crate::params::{ParamBuilder, ParamStore, Session};
use crate::pyramid::{points_of, PyramidNet, PyramidState};
use crate::refine::{Fused, Fusion, FusionWeights, RefineNet};
use crate::tensor::{Real, Var};

#[derive(Debug, Clone)]
pub struct FastPci {
    cfg: ModelConfig,
    pub pyramid: PyramidNet,
    pub refine: Option<RefineNet>,
    pub fusion: Fusion,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: PyramidState,
    /// `pc0 + t SF01` at full resolution.
    pub forward: Var,
    /// `pc1 + (1 - t) SF10` at full resolution.
    pub backward: Var,
    /// Forward estimate after refinement (equal to `forward` when disabled).
    pub refined: Var,
    pub fused: Fused,
    /// Per-level union of the forward and backward estimates, finest first.
    pub levels: Vec<Var>,
}

/// Plain-value copy of a [`ModelOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationOutput {
    pub forward: PointCloud,
    pub backward: PointCloud,
    pub refined: PointCloud,
    pub final_cloud: PointCloud,
    pub levels: Vec<PointCloud>,
}

impl ModelOutput {
    pub fn loss_inputs(&self) -> LossInputs {
        LossInputs {
            final_cloud: self.fused.points,
            forward: self.forward,
            backward: self.backward,
            levels: self.levels.clone(),
        }
    }

    pub fn to_clouds<T: Real>(&self, s: &Session<'_, T>) -> Result<InterpolationOutput> {
        let pc = |v: Var| PointCloud::new(points_of(s, v));
        Ok(InterpolationOutput {
            forward: pc(self.forward)?,
            backward: pc(self.backward)?,
            refined: pc(self.refined)?,
            final_cloud: pc(self.fused.points)?,
            levels: self.levels.iter().map(|&v| pc(v)).collect::<Result<_>>()?,
        })
    }
}

impl FastPci {
    /// Builds the network and registers its parameters in `store`, drawing
    /// initial values from `seed`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(store, &mut rng, "");
        let pyramid = PyramidNet::new(&mut pb, cfg)?;
        let refine = if cfg.flags.refine_net {
            Some(RefineNet::new(&mut pb, &cfg.refine, cfg.channels[0])?)
        } else {
            None
        };
        let fusion = Fusion::new(&mut pb, cfg.fusion_k, cfg.fusion_hidden)?;
        Ok(FastPci {
            cfg: cfg.clone(),
            pyramid,
            refine,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Interpolates the frame at `t`. `fusion_seed` fixes the anchor sampling.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        pc0: &PointCloud,
        pc1: &PointCloud,
        t: f64,
        fusion_seed: u64,
        weights: FusionWeights,
    ) -> Result<ModelOutput> {
        if pc0.len() != self.cfg.points || pc1.len() != self.cfg.points {
            return Err(Error::Argument(format!(
                "model expects {} points per frame, got {} and {}",
                self.cfg.points,
                pc0.len(),
                pc1.len()
            )));
        }
        let pyramid = self.pyramid.forward(s, pc0, pc1, t)?;
        let finest = &pyramid.levels[0];
        let (forward, backward) = (finest.forward, finest.backward);
        let refined = match &self.refine {
            Some(net) => {
                let f0 = s.g.slice_rows(finest.features, 0, finest.len())?;
                net.forward(s, forward, f0)?
            }
            None => forward,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(fusion_seed);
        let spacing = mean_spacing(&pc0.points)?;
        let fused = self.fusion.forward(s, refined, backward, t, spacing, &mut rng, weights)?;
        let levels = pyramid
            .levels
            .iter()
            .map(|l| s.g.concat_rows(&[l.forward, l.backward]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ModelOutput {
            pyramid,
            forward,
            backward,
            refined,
            fused,
            levels,
        })
    }

    /// Inference-only convenience wrapper.
    pub fn interpolate<T: Real>(&self, store: &ParamStore<T>, pc0: &PointCloud, pc1: &PointCloud, t: f64, fusion_seed: u64) -> Result<InterpolationOutput> {
        let mut s = Session::inference(store);
        let out = self.forward(&mut s, pc0, pc1, t, fusion_seed, FusionWeights::Learned)?;
        out.to_clouds(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{pyramid_gt, total_loss, LossWeights};
    use crate::params::param_grad_check;
    use rand::Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).unwrap()
    }

    #[test]
    fn output_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig::tiny(64);
        let mut store = ParamStore::<f32>::new();
        let m = FastPci::new(&mut store, &cfg, 3).unwrap();
        let (a, b) = (cloud(&mut rng, 64), cloud(&mut rng, 64));
        let out = m.interpolate(&store, &a, &b, 0.25, 0).unwrap();
        assert_eq!(out.final_cloud.len(), 64);
        assert_eq!(out.levels.iter().map(|l| l.len()).collect::<Vec<_>>(), vec![128, 32, 4]);
        assert!(m.interpolate(&store, &a, &cloud(&mut rng, 32), 0.25, 0).is_err());
    }

    #[test]
    fn refine_flag_skips_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = ModelConfig::tiny(32);
        cfg.flags.refine_net = false;
        let mut store = ParamStore::<f64>::new();
        let m = FastPci::new(&mut store, &cfg, 3).unwrap();
        assert!(store.iter().all(|p| !p.name.starts_with("refine")));
        let (a, b) = (cloud(&mut rng, 32), cloud(&mut rng, 32));
        let out = m.interpolate(&store, &a, &b, 0.5, 0).unwrap();
        assert_eq!(out.refined, out.forward);
    }

    #[test]
    fn total_loss_gradient_wrt_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig::tiny(32);
        let mut store = ParamStore::<f64>::new();
        let m = FastPci::new(&mut store, &cfg, 5).unwrap();
        let (a, b, gt) = (cloud(&mut rng, 32), cloud(&mut rng, 32), cloud(&mut rng, 32));
        let lg = pyramid_gt(&gt, &cfg.level_sizes()).unwrap();
        let err = param_grad_check(&store, 1e-6, |s| {
            let out = m.forward(s, &a, &b, 0.5, 7, FusionWeights::Learned)?;
            Ok(total_loss(&mut s.g, &out.loss_inputs(), &gt, &lg, &LossWeights::default())?.total)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
