//! Training objective.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::metrics::chamfer_graph;
use crate::pyramid::downsample_indices;
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Forward estimate against the ground truth.
    pub cd1: bool,
    /// Backward estimate against the ground truth.
    pub cd2: bool,
    /// Per-level multiscale term.
    pub ms: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha0: 0.05,
            alpha1: 0.1,
            alpha2: 0.2,
            cd1: true,
            cd2: true,
            ms: true,
        }
    }
}

impl LossWeights {
    pub fn alphas(&self) -> [f64; 3] {
        [self.alpha0, self.alpha1, self.alpha2]
    }

    /// Rejects negative or non-finite weights; warns about values outside the
    /// range known to train well.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.alphas().into_iter().enumerate() {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Config(format!("loss.alpha{i} = {a} must be a nonnegative number")));
            }
            if !(0.025..=0.25).contains(&a) {
                log::warn!("loss.alpha{i} = {a} is outside [0.025, 0.25]");
            }
        }
        Ok(())
    }
}

/// FPS subsets of `gt` (start index 0) at each requested size.
pub fn pyramid_gt(gt: &PointCloud, sizes: &[usize]) -> Result<Vec<PointCloud>> {
    sizes
        .iter()
        .map(|&m| {
            if m == 0 || m > gt.len() {
                return Err(Error::Argument(format!(
                    "level size {m} not in 1..={}",
                    gt.len()
                )));
            }
            let div = gt.len() / m;
            let idx = if gt.len().is_multiple_of(m) {
                downsample_indices(&gt.points, div)?
            } else {
                crate::kernels::fps(&gt.points, m, 0)?
            };
            Ok(gt.select(&idx))
        })
        .collect()
}

/// Predictions entering the objective, as `N x 3` tensors.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub final_cloud: Var,
    pub forward: Var,
    pub backward: Var,
    /// Finest to coarsest.
    pub levels: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub intp: f64,
    pub cd1: f64,
    pub cd2: f64,
    pub ms: f64,
}

/// `CD(final) + CD(forward) + CD(backward) + sum_l alpha_l CD(level_l, gt_l)`,
/// with disabled terms left out. `level_gt` is typically [`pyramid_gt`].
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    inputs: &LossInputs,
    gt: &PointCloud,
    level_gt: &[PointCloud],
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let gt_v = g.constant_f64(&[gt.len(), 3], &gt.flat())?;
    let intp = chamfer_graph(g, inputs.final_cloud, gt_v)?;
    let mut terms = vec![intp];
    let mut out = LossTerms {
        total: intp,
        intp: g.scalar(intp).as_f64(),
        cd1: 0.0,
        cd2: 0.0,
        ms: 0.0,
    };
    if w.cd1 {
        let v = chamfer_graph(g, inputs.forward, gt_v)?;
        out.cd1 = g.scalar(v).as_f64();
        terms.push(v);
    }
    if w.cd2 {
        let v = chamfer_graph(g, inputs.backward, gt_v)?;
        out.cd2 = g.scalar(v).as_f64();
        terms.push(v);
    }
    if w.ms {
        if inputs.levels.is_empty() || inputs.levels.len() != level_gt.len() || level_gt.len() > 3 {
            return Err(Error::Contract(format!(
                "multiscale loss needs one prediction per ground-truth level, got {} predictions for {} levels",
                inputs.levels.len(),
                level_gt.len()
            )));
        }
        let mut ms = Vec::new();
        for ((&pred, lgt), alpha) in inputs.levels.iter().zip(level_gt).zip(w.alphas()) {
            let lv = g.constant_f64(&[lgt.len(), 3], &lgt.flat())?;
            let cd = chamfer_graph(g, pred, lv)?;
            ms.push(g.scale(cd, alpha)?);
        }
        let ms = g.concat_rows(&ms)?;
        let ms = g.reduce_sum(ms)?;
        out.ms = g.scalar(ms).as_f64();
        terms.push(ms);
    }
    if terms.len() > 1 {
        let all = g.concat_rows(&terms)?;
        out.total = g.reduce_sum(all)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use crate::metrics::chamfer;
    use crate::tensor::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)]).collect()).unwrap()
    }

    fn inputs(g: &mut Graph<f64>, fin: &PointCloud, f: &PointCloud, b: &PointCloud, levels: &[PointCloud]) -> LossInputs {
        let mut v = |pc: &PointCloud| g.constant_f64(&[pc.len(), 3], &pc.flat()).unwrap();
        LossInputs {
            final_cloud: v(fin),
            forward: v(f),
            backward: v(b),
            levels: levels.iter().map(v).collect(),
        }
    }

    #[test]
    fn pyramid_gt_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = cloud(&mut rng, 1024, 1.0);
        let levels = pyramid_gt(&gt, &[1024, 256, 32]).unwrap();
        assert_eq!(levels.iter().map(|l| l.len()).collect::<Vec<_>>(), vec![1024, 256, 32]);
        assert_eq!(levels[0], gt);
        for l in &levels {
            assert!(l.points.iter().all(|p| gt.points.contains(p)));
        }
        assert!(pyramid_gt(&gt, &[2048]).is_err());
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut rng, 64, 1.0);
        let lg = pyramid_gt(&gt, &[64, 16, 2]).unwrap();
        let mut g = Graph::new();
        let inp = inputs(&mut g, &gt, &gt, &gt, &lg);
        let t = total_loss(&mut g, &inp, &gt, &lg, &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(t.total), 0.0);
    }

    #[test]
    fn unit_offset_multiscale_term() {
        // Points 10 apart, so every nearest neighbor of the shifted cloud is
        // its own translate.
        let grid: Vec<Point> = (0..32).map(|i| [10.0 * (i % 4) as f64, 10.0 * (i / 4 % 4) as f64, 10.0 * (i / 16) as f64]).collect();
        let gt = PointCloud::new(grid).unwrap();
        let lg = pyramid_gt(&gt, &[32, 8, 1]).unwrap();
        let shifted: Vec<PointCloud> = lg
            .iter()
            .map(|l| PointCloud::new(l.points.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect()).unwrap())
            .collect();
        let oracle: f64 = shifted.iter().zip(&lg).zip([0.05, 0.1, 0.2]).map(|((a, b), w)| w * chamfer(&a.points, &b.points).unwrap()).sum();
        let mut g = Graph::new();
        let inp = inputs(&mut g, &gt, &gt, &gt, &shifted);
        let t = total_loss(&mut g, &inp, &gt, &lg, &LossWeights::default()).unwrap();
        assert!((t.ms - 0.7).abs() < 1e-12);
        assert!((oracle - 0.7).abs() < 1e-12);
        assert!((g.scalar(t.total) - 0.7).abs() < 1e-12);

        let doubled = LossWeights {
            alpha0: 0.1,
            alpha1: 0.2,
            alpha2: 0.4,
            ..LossWeights::default()
        };
        let t2 = total_loss(&mut g, &inp, &gt, &lg, &doubled).unwrap();
        assert!((t2.ms - 2.0 * t.ms).abs() < 1e-12);
    }

    #[test]
    fn flags_mask_terms_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = cloud(&mut rng, 32, 1.0);
        let (f, b, fin) = (cloud(&mut rng, 32, 1.0), cloud(&mut rng, 32, 1.0), cloud(&mut rng, 32, 1.0));
        let lg = pyramid_gt(&gt, &[32, 8, 1]).unwrap();
        let preds: Vec<PointCloud> = [64, 16, 2].iter().map(|&n| cloud(&mut rng, n, 1.0)).collect();
        let mut g = Graph::new();
        let inp = inputs(&mut g, &fin, &f, &b, &preds);
        let none = LossWeights {
            cd1: false,
            cd2: false,
            ms: false,
            ..LossWeights::default()
        };
        let base = total_loss(&mut g, &inp, &gt, &lg, &none).unwrap();
        assert_eq!(g.scalar(base.total), chamfer(&fin.points, &gt.points).unwrap());
        assert_eq!((base.cd1, base.cd2, base.ms), (0.0, 0.0, 0.0));
        let mut prev = g.scalar(base.total);
        for w in [
            LossWeights { cd1: true, ..none },
            LossWeights { cd1: true, cd2: true, ..none },
            LossWeights::default(),
        ] {
            let t = total_loss(&mut g, &inp, &gt, &lg, &w).unwrap();
            assert!(g.scalar(t.total) >= prev);
            prev = g.scalar(t.total);
        }
        let missing = LossInputs { levels: vec![], ..inp.clone() };
        assert!(matches!(total_loss(&mut g, &missing, &gt, &lg, &LossWeights::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_gradient_wrt_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = cloud(&mut rng, 16, 1.0);
        let lg = pyramid_gt(&gt, &[16, 4, 1]).unwrap();
        let vals: Vec<Vec<f64>> = [16, 16, 16, 32, 8, 2].iter().map(|&n| cloud(&mut rng, n, 1.0).flat()).collect();
        let shapes: Vec<[usize; 2]> = [16, 16, 16, 32, 8, 2].iter().map(|&n| [n, 3]).collect();
        let ins: Vec<(&[usize], &[f64])> = shapes.iter().zip(&vals).map(|(s, v)| (&s[..], &v[..])).collect();
        let err = grad_check_many(&ins, 1e-6, |g, v| {
            let inp = LossInputs {
                final_cloud: v[0],
                forward: v[1],
                backward: v[2],
                levels: v[3..].to_vec(),
            };
            Ok::<_, Error>(total_loss(g, &inp, &gt, &lg, &LossWeights::default())?.total)
        })
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn total_is_nonnegative_and_alpha_scaling_is_exact(
                seed in any::<u64>(),
                c in 0.1f64..4.0,
                cd1: bool,
                cd2: bool,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gt = cloud(&mut rng, 32, 1.0);
                let lg = pyramid_gt(&gt, &[32, 8, 1]).unwrap();
                let (f, b, fin) = (cloud(&mut rng, 32, 1.0), cloud(&mut rng, 32, 1.0), cloud(&mut rng, 32, 1.0));
                let preds: Vec<PointCloud> = [64, 16, 2].iter().map(|&n| cloud(&mut rng, n, 1.0)).collect();
                let mut g = Graph::new();
                let inp = inputs(&mut g, &fin, &f, &b, &preds);
                let w = LossWeights { cd1, cd2, ..LossWeights::default() };
                let t = total_loss(&mut g, &inp, &gt, &lg, &w).unwrap();
                prop_assert!(g.scalar(t.total) >= 0.0);
                let scaled = LossWeights { alpha0: c * w.alpha0, alpha1: c * w.alpha1, alpha2: c * w.alpha2, ..w };
                let t2 = total_loss(&mut g, &inp, &gt, &lg, &scaled).unwrap();
                prop_assert!((t2.ms - c * t.ms).abs() <= 1e-12 * (1.0 + t.ms));
            }
        }
    }
}
