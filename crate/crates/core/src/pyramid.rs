//! Three-level pyramid that estimates scene flow in both directions.
//!
//! Like the transformer block, every tensor here stacks the two frames:
//! the first half of the rows belongs to frame 0 (direction `0 -> 1`) and
//! the second half to frame 1 (direction `1 -> 0`).

use crate::cloud::{Point, PointCloud, SceneFlow};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::{fps, idw_weights, knn};
use crate::msformer::MsBlock;
use crate::nn::{Activation, Linear, Mlp, LEAKY_SLOPE};
use crate::params::{ParamBuilder, Session};
use crate::tensor::{Real, Var};
use crate::Direction;

pub(crate) const LEAKY: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

pub(crate) fn constant_points<T: Real>(s: &mut Session<'_, T>, pts: &[Point]) -> Result<Var> {
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    Ok(s.g.constant_f64(&[pts.len(), 3], &flat)?)
}

pub(crate) fn points_of<T: Real>(s: &Session<'_, T>, v: Var) -> Vec<Point> {
    s.g.value(v)
        .chunks(3)
        .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
        .collect()
}

/// Per-point MLP over raw coordinates (stage 1, no downsampling).
#[derive(Debug, Clone)]
pub struct Encoder {
    mlp: Mlp,
}

impl Encoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Encoder {
            mlp: Mlp::new(pb, "encoder", &[3, channels, channels, channels], LEAKY, false)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, pc: &[Point]) -> Result<Var> {
        let x = constant_points(s, pc)?;
        self.mlp.forward(s, x)
    }
}

/// Set-abstraction downsampling: gather features around each selected
/// point, append relative coordinates, per-point MLP, max-pool.
#[derive(Debug, Clone)]
pub struct Downsample {
    mlp: Mlp,
    k: usize,
}

impl Downsample {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Downsample {
            mlp: Mlp::new(pb, name, &[c_in + 3, c_out, c_out], LEAKY, true)?,
            k,
        })
    }

    /// `frames[f] = (fine cloud, selected indices)`; `features` stacks the
    /// frames' fine features. Returns stacked features of the selections.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, frames: &[(&[Point], &[usize])], features: Var) -> Result<Var> {
        let k = frames.iter().fold(self.k, |k, f| k.min(f.0.len()));
        let mut rows = Vec::new();
        let mut rel = Vec::new();
        let mut offset = 0;
        for &(fine, sel) in frames {
            let centers: Vec<Point> = sel.iter().map(|&i| fine[i]).collect();
            let nn = knn(&centers, fine, k)?;
            for (q, c) in centers.iter().enumerate() {
                for &j in nn.row(q) {
                    rows.push(offset + j);
                    rel.extend((0..3).map(|d| fine[j][d] - c[d]));
                }
            }
            offset += fine.len();
        }
        let grouped = s.g.gather_rows(features, &rows)?;
        let rel = s.g.constant_f64(&[rows.len(), 3], &rel)?;
        let x = s.g.concat_cols(&[grouped, rel])?;
        let y = self.mlp.forward(s, x)?;
        Ok(s.g.max_pool_groups(y, k)?)
    }
}

/// FPS selection of `floor(L / divisor)` points from `pc`, starting at
/// index 0. Keeping every point returns the identity order.
pub fn downsample_indices(pc: &[Point], divisor: usize) -> Result<Vec<usize>> {
    let m = pc.len().checked_div(divisor).unwrap_or(0);
    if m == 0 {
        return Err(Error::Argument(format!(
            "divisor {divisor} leaves no points from {}",
            pc.len()
        )));
    }
    if m == pc.len() {
        return Ok((0..m).collect());
    }
    fps(pc, m, 0)
}

/// Learned matching cost between a warped source cloud and a target cloud.
///
/// For every source point `i` and each of its `k` nearest target points `j`
/// the MLP sees `[F_tgt[j] - F_src[i], tgt[j] - warped[i], |tgt[j] - warped[i]|]`;
/// the result is max-pooled over `j`.
pub fn cost_volume<T: Real>(
    s: &mut Session<'_, T>,
    mlp: &Mlp,
    warped: Var,
    target: &[Point],
    f_src: Var,
    f_tgt: Var,
    k: usize,
) -> Result<Var> {
    if k == 0 || k > target.len() {
        return Err(Error::Argument(format!(
            "cost volume needs 1 <= k <= {} target points, got k = {k}",
            target.len()
        )));
    }
    let n = s.g.rows(warped);
    if s.g.rows(f_src) != n || s.g.rows(f_tgt) != target.len() {
        return Err(Error::Argument(format!(
            "feature rows {} / {} do not match clouds of {n} / {} points",
            s.g.rows(f_src),
            s.g.rows(f_tgt),
            target.len()
        )));
    }
    let src = points_of(s, warped);
    let nn = knn(&src, target, k)?;
    let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let tgt = constant_points(s, target)?;
    let tgt_n = s.g.gather_rows(tgt, &nn.indices)?;
    let src_r = s.g.gather_rows(warped, &repeat)?;
    let rel = s.g.sub(tgt_n, src_r)?;
    let dist = s.g.l2norm_rows(rel)?;
    let ft = s.g.gather_rows(f_tgt, &nn.indices)?;
    let fs = s.g.gather_rows(f_src, &repeat)?;
    let fdiff = s.g.sub(ft, fs)?;
    let x = s.g.concat_cols(&[fdiff, rel, dist])?;
    let y = mlp.forward(s, x)?;
    Ok(s.g.max_pool_groups(y, k)?)
}

/// Per-point MLP over the concatenated level inputs followed by a bias-free
/// flow head.
#[derive(Debug, Clone)]
pub struct Predictor {
    mlp: Mlp,
    head: Linear,
}

impl Predictor {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c_in: usize, width: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Predictor {
            mlp: Mlp::new(&mut pb, "mlp", &[c_in, width, width, width], LEAKY, true)?,
            head: Linear::scaled(&mut pb, "flow", width, 3, false, 0.1)?,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Returns `(motion features, flow)`; inputs are concatenated channelwise.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, inputs: &[Var]) -> Result<(Var, Var)> {
        let rows = s.g.rows(inputs[0]);
        if let Some(bad) = inputs.iter().find(|&&v| s.g.rows(v) != rows) {
            return Err(Error::Argument(format!(
                "predictor inputs are not row-aligned: {} vs {}",
                rows,
                s.g.rows(*bad)
            )));
        }
        let x = s.g.concat_cols(inputs)?;
        let feats = self.mlp.forward(s, x)?;
        let flow = self.head.forward(s, feats)?;
        Ok((feats, flow))
    }

    pub fn motion_features<T: Real>(&self, s: &mut Session<'_, T>, inputs: &[Var]) -> Result<Var> {
        let x = s.g.concat_cols(inputs)?;
        self.mlp.forward(s, x)
    }
}

/// Residual correction of motion features conditioned on structure features.
#[derive(Debug, Clone)]
pub struct MotionCompensation {
    structure: Mlp,
    motion: Linear,
    offset: Mlp,
}

impl MotionCompensation {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, structure_dim: usize, width: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(MotionCompensation {
            structure: Mlp::new(&mut pb, "structure", &[structure_dim, width, width, width], LEAKY, false)?,
            motion: Linear::new(&mut pb, "motion", width, width, true)?,
            offset: Mlp::new(&mut pb, "offset", &[2 * width, width, width], LEAKY, false)?,
        })
    }

    /// Parameters of the offset head's output layer.
    pub fn offset_output(&self) -> &Linear {
        self.offset.layers.last().expect("offset head has two layers")
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, m: Var, st: Var) -> Result<Var> {
        if s.g.rows(m) != s.g.rows(st) {
            return Err(Error::Argument(format!(
                "motion rows {} do not match structure rows {}",
                s.g.rows(m),
                s.g.rows(st)
            )));
        }
        let gate = self.structure.forward(s, st)?;
        let gate = s.g.sigmoid(gate)?;
        let mm = self.motion.forward(s, m)?;
        let mm = s.g.leaky_relu(mm, LEAKY_SLOPE)?;
        let x = s.g.concat_cols(&[gate, mm])?;
        let off = self.offset.forward(s, x)?;
        Ok(s.g.add(m, off)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    block: MsBlock,
    down: Option<Downsample>,
    cost: Mlp,
    predictor: Predictor,
    compensation: Option<MotionCompensation>,
}

/// One level of a forward pass.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub pc0: PointCloud,
    pub pc1: PointCloud,
    /// Stacked features after the transformer block.
    pub features: Var,
    pub attention: [Var; 2],
    /// Stacked `[M01; M10]`.
    pub motion: Var,
    /// Stacked `[S01; S10]`.
    pub structure: Var,
    /// Stacked predictor motion features after compensation.
    pub motion_features: Var,
    /// Stacked `[SF01; SF10]`.
    pub flow: Var,
    /// `pc0 + t SF01`.
    pub forward: Var,
    /// `pc1 + (1 - t) SF10`.
    pub backward: Var,
}

impl PyramidLevel {
    pub fn len(&self) -> usize {
        self.pc0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pc0.is_empty()
    }

    /// Flow values for one direction.
    pub fn scene_flow<T: Real>(&self, s: &Session<'_, T>, dir: Direction) -> SceneFlow {
        let all = points_of(s, self.flow);
        let half = match dir {
            Direction::Forward => &all[..self.len()],
            Direction::Backward => &all[self.len()..],
        };
        SceneFlow {
            vectors: half.to_vec(),
            direction: dir,
        }
    }
}

/// Levels from finest (index 0) to coarsest.
#[derive(Debug, Clone)]
pub struct PyramidState {
    pub t: f64,
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone)]
pub struct PyramidNet {
    cfg: ModelConfig,
    encoder: Encoder,
    levels: Vec<Level>,
}

impl PyramidNet {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.scope("pyramid");
        let encoder = Encoder::new(&mut pb, cfg.channels[0])?;
        let p = cfg.predictor_channels;
        let mut levels = Vec::new();
        for l in 0..3 {
            let c = cfg.channels[l];
            let mut lb = pb.scope(&format!("level{}", l + 1));
            let down = if l > 0 {
                Some(Downsample::new(&mut lb, "down", cfg.channels[l - 1], c, cfg.knn_k)?)
            } else {
                None
            };
            let block = MsBlock::new(&mut lb, "block", c, cfg.attn_dim, cfg.flags.structure_branch)?;
            let cost = Mlp::new(&mut lb, "cost", &[c + 4, cfg.cost_channels, cfg.cost_channels], LEAKY, true)?;
            let mut c_in = c + cfg.cost_channels;
            if l > 0 {
                c_in += cfg.attn_dim + block.structure_dim();
            }
            if l < 2 {
                c_in += 3 + p;
            }
            let predictor = Predictor::new(&mut lb, "predictor", c_in, p)?;
            let compensation = if cfg.flags.motion_compensation {
                Some(MotionCompensation::new(&mut lb, "compensation", block.structure_dim(), p)?)
            } else {
                None
            };
            levels.push(Level {
                block,
                down,
                cost,
                predictor,
                compensation,
            });
        }
        Ok(PyramidNet {
            cfg: cfg.clone(),
            encoder,
            levels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn compensation(&self, level: usize) -> Option<&MotionCompensation> {
        self.levels[level].compensation.as_ref()
    }

    pub fn predictor(&self, level: usize) -> &Predictor {
        &self.levels[level].predictor
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, pc0: &PointCloud, pc1: &PointCloud, t: f64) -> Result<PyramidState> {
        if pc0.len() != pc1.len() {
            return Err(Error::Argument(format!(
                "frames differ in size: {} vs {}",
                pc0.len(),
                pc1.len()
            )));
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Argument(format!("t = {t} outside (0, 1)")));
        }
        let cfg = &self.cfg;
        let mode = cfg.flags.attention_mode;

        // Encoder path, fine to coarse.
        let mut clouds: Vec<[PointCloud; 2]> = vec![[pc0.clone(), pc1.clone()]];
        let stacked: Vec<Point> = pc0.points.iter().chain(&pc1.points).copied().collect();
        let mut features = self.encoder.forward(s, &stacked)?;
        let mut blocks = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            if let Some(down) = &level.down {
                let prev = &clouds[l - 1];
                let m = pc0.len() / cfg.divisors[l];
                if m == 0 {
                    return Err(Error::Argument(format!(
                        "{} points leave no points at divisor {}",
                        pc0.len(),
                        cfg.divisors[l]
                    )));
                }
                let sel0 = fps(&prev[0].points, m, 0)?;
                let sel1 = fps(&prev[1].points, m, 0)?;
                features = down.forward(s, &[(&prev[0].points, &sel0), (&prev[1].points, &sel1)], features)?;
                let next = [prev[0].select(&sel0), prev[1].select(&sel1)];
                clouds.push(next);
            }
            let out = level.block.forward(s, features, mode)?;
            features = out.features;
            blocks.push(out);
        }

        // Flow estimation, coarse to fine.
        let p = cfg.predictor_channels;
        let mut levels: Vec<Option<PyramidLevel>> = vec![None; 3];
        let mut prior: Option<(Var, Var)> = None;
        for l in (0..3).rev() {
            let level = &self.levels[l];
            let [c0, c1] = &clouds[l];
            let n = c0.len();
            let out = &blocks[l];
            let motion = s.g.concat_rows(&out.motion)?;
            let structure = s.g.concat_rows(&out.structure)?;

            let src: Vec<Point> = c0.points.iter().chain(&c1.points).copied().collect();
            let src_v = constant_points(s, &src)?;
            let (prior_flow, prior_feats) = match prior {
                Some((flow, feats)) => {
                    let coarse = &clouds[l + 1];
                    let up_flow = upsample_stacked(s, [&coarse[0].points, &coarse[1].points], [&c0.points, &c1.points], flow, cfg.upsample_k)?;
                    let up_feats = upsample_stacked(s, [&coarse[0].points, &coarse[1].points], [&c0.points, &c1.points], feats, cfg.upsample_k)?;
                    (Some(up_flow), Some(up_feats))
                }
                None => (None, None),
            };
            let warped = match prior_flow {
                Some(f) => s.g.add(src_v, f)?,
                None => src_v,
            };
            let k = cfg.knn_k.min(n);
            let mut costs = Vec::new();
            for dir in 0..2 {
                let w = s.g.slice_rows(warped, dir * n, n)?;
                let fs = s.g.slice_rows(out.features, dir * n, n)?;
                let ft = s.g.slice_rows(out.features, (1 - dir) * n, n)?;
                let target = &clouds[l][1 - dir].points;
                costs.push(cost_volume(s, &level.cost, w, target, fs, ft, k)?);
            }
            let cost = s.g.concat_rows(&costs)?;

            let mut inputs = vec![out.features, cost];
            if l > 0 {
                inputs.push(motion);
                inputs.push(structure);
            }
            if let (Some(f), Some(m)) = (prior_flow, prior_feats) {
                inputs.push(f);
                inputs.push(m);
            }
            let mut feats = level.predictor.motion_features(s, &inputs)?;
            if let Some(comp) = &level.compensation {
                feats = comp.forward(s, feats, structure)?;
            }
            debug_assert_eq!(s.g.cols(feats), p);
            let delta = level.predictor.head.forward(s, feats)?;
            let flow = match prior_flow {
                Some(f) => s.g.add(f, delta)?,
                None => delta,
            };

            let f01 = s.g.slice_rows(flow, 0, n)?;
            let f10 = s.g.slice_rows(flow, n, n)?;
            let p0 = constant_points(s, &c0.points)?;
            let p1 = constant_points(s, &c1.points)?;
            let s01 = s.g.scale(f01, t)?;
            let s10 = s.g.scale(f10, 1.0 - t)?;
            let forward = s.g.add(p0, s01)?;
            let backward = s.g.add(p1, s10)?;
            levels[l] = Some(PyramidLevel {
                pc0: c0.clone(),
                pc1: c1.clone(),
                features: out.features,
                attention: out.attention,
                motion,
                structure,
                motion_features: feats,
                flow,
                forward,
                backward,
            });
            prior = Some((flow, feats));
        }
        Ok(PyramidState {
            t,
            levels: levels.into_iter().map(|l| l.expect("every level computed")).collect(),
        })
    }
}

/// Inverse-distance interpolation of stacked coarse rows onto stacked fine
/// points, frame by frame.
pub fn upsample_stacked<T: Real>(s: &mut Session<'_, T>, coarse: [&[Point]; 2], fine: [&[Point]; 2], values: Var, k: usize) -> Result<Var> {
    let mut idx = Vec::new();
    let mut w = Vec::new();
    let k = k.min(coarse[0].len()).min(coarse[1].len());
    let mut offset = 0;
    for f in 0..2 {
        let (i, wf, _) = idw_weights(coarse[f], fine[f], k)?;
        idx.extend(i.into_iter().map(|j| j + offset));
        w.extend(wf);
        offset += coarse[f].len();
    }
    Ok(s.g.weighted_gather(values, &idx, &w, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use crate::params::{param_grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).unwrap()
    }

    fn net(cfg: &ModelConfig) -> (ParamStore<f64>, PyramidNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, "");
        let n = PyramidNet::new(&mut pb, cfg).unwrap();
        (store, n)
    }

    #[test]
    fn zero_encoder_gives_zero_features_and_is_pointwise() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&mut ParamBuilder::new(&mut store, &mut rng, ""), 4).unwrap();
        let pc = cloud(&mut rng, 6).points;
        let mut s = Session::inference(&store);
        let f = enc.forward(&mut s, &pc).unwrap();
        let mut rev = pc.clone();
        rev.reverse();
        let fr = enc.forward(&mut s, &rev).unwrap();
        let (a, b) = (s.g.value(f).to_vec(), s.g.value(fr).to_vec());
        for i in 0..6 {
            assert_eq!(&a[i * 4..i * 4 + 4], &b[(5 - i) * 4..(5 - i) * 4 + 4]);
        }
        let ids: Vec<_> = (0..store.len()).map(|i| store.id(&store.iter().nth(i).unwrap().name).unwrap()).collect();
        zero_params(&mut store, &ids);
        let mut s = Session::inference(&store);
        let f = enc.forward(&mut s, &pc).unwrap();
        assert!(s.g.value(f).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encoder_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(&mut ParamBuilder::new(&mut store, &mut rng, ""), 3).unwrap();
        let pc = cloud(&mut rng, 5).points;
        let err = param_grad_check(&store, 1e-6, |s| {
            let f = enc.forward(s, &pc)?;
            let sq = s.g.square(f)?;
            Ok(s.g.reduce_sum(sq)?)
        })
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn downsample_indices_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pc = cloud(&mut rng, 64).points;
        assert_eq!(downsample_indices(&pc, 1).unwrap(), (0..64).collect::<Vec<_>>());
        assert_eq!(downsample_indices(&pc, 4).unwrap().len(), 16);
        assert!(downsample_indices(&pc, 65).is_err());
        let big = cloud(&mut rng, 8192).points;
        assert_eq!(downsample_indices(&big, 4).unwrap().len(), 2048);
        assert_eq!(downsample_indices(&big, 32).unwrap().len(), 256);
    }

    fn run_mlp(store: &ParamStore<f64>, mlp: &Mlp, row: &[f64]) -> Vec<f64> {
        let mut s = Session::inference(store);
        let x = s.g.constant(&[1, row.len()], row.to_vec()).unwrap();
        let y = mlp.forward(&mut s, x).unwrap();
        s.g.value(y).to_vec()
    }

    #[test]
    fn cost_volume_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let c = 3;
        let mlp = Mlp::new(&mut ParamBuilder::new(&mut store, &mut rng.clone(), ""), "cost", &[c + 4, 5, 5], LEAKY, true).unwrap();
        let (src, tgt) = (cloud(&mut rng, 9).points, cloud(&mut rng, 11).points);
        let fs: Vec<f64> = (0..9 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ft: Vec<f64> = (0..11 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 4;
        let mut s = Session::inference(&store);
        let w = constant_points(&mut s, &src).unwrap();
        let fsv = s.g.constant(&[9, c], fs.clone()).unwrap();
        let ftv = s.g.constant(&[11, c], ft.clone()).unwrap();
        let cv = cost_volume(&mut s, &mlp, w, &tgt, fsv, ftv, k).unwrap();
        let got = s.g.value(cv).to_vec();
        for i in 0..9 {
            let mut order: Vec<usize> = (0..11).collect();
            order.sort_by(|&a, &b| crate::cloud::dist2(&src[i], &tgt[a]).total_cmp(&crate::cloud::dist2(&src[i], &tgt[b])));
            let mut best = [f64::NEG_INFINITY; 5];
            for &j in &order[..k] {
                let mut row: Vec<f64> = (0..c).map(|ch| ft[j * c + ch] - fs[i * c + ch]).collect();
                let rel: Vec<f64> = (0..3).map(|d| tgt[j][d] - src[i][d]).collect();
                row.extend(&rel);
                row.push(rel.iter().map(|x| x * x).sum::<f64>().sqrt());
                for (b, y) in best.iter_mut().zip(run_mlp(&store, &mlp, &row)) {
                    *b = b.max(y);
                }
            }
            for ch in 0..5 {
                assert!((got[i * 5 + ch] - best[ch]).abs() < 1e-6);
            }
        }
        assert!(cost_volume(&mut s, &mlp, w, &tgt, fsv, ftv, 12).is_err());
    }

    #[test]
    fn cost_volume_self_neighbor_inputs_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pc = cloud(&mut rng, 6).points;
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut ParamBuilder::new(&mut store, &mut rng, ""), "cost", &[6, 2], LEAKY, false).unwrap();
        let mut s = Session::inference(&store);
        let w = constant_points(&mut s, &pc).unwrap();
        let f = s.g.constant(&[6, 2], vec![0.5; 12]).unwrap();
        // With k = 1 the only neighbor is the point itself, so the MLP sees zeros
        // and returns its bias.
        let cv = cost_volume(&mut s, &mlp, w, &pc, f, f, 1).unwrap();
        let bias = store.get(mlp.layers[0].b.unwrap()).values.clone();
        for row in s.g.value(cv).chunks(2) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn predictor_zero_head_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let pred = Predictor::new(&mut ParamBuilder::new(&mut store, &mut rng, ""), "pred", 5, 4).unwrap();
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = param_grad_check(&store, 1e-6, |s| {
            let a = s.g.constant(&[4, 2], x[..8].to_vec())?;
            let b = s.g.constant(&[4, 3], x[8..].to_vec())?;
            let (_, flow) = pred.forward(s, &[a, b])?;
            let sq = s.g.square(flow)?;
            Ok(s.g.reduce_sum(sq)?)
        })
        .unwrap();
        assert!(err <= 1e-5, "{err}");
        zero_params(&mut store, &[pred.head().w]);
        let mut s = Session::inference(&store);
        let z = s.g.zeros(&[4, 5]).unwrap();
        let (_, flow) = pred.forward(&mut s, &[z]).unwrap();
        assert!(s.g.value(flow).iter().all(|&v| v == 0.0));
        let short = s.g.zeros(&[3, 1]).unwrap();
        assert!(pred.forward(&mut s, &[z, short]).is_err());
    }

    #[test]
    fn compensation_residual_identity_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let mc = MotionCompensation::new(&mut ParamBuilder::new(&mut store, &mut rng, ""), "mc", 3, 4).unwrap();
        let m: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let st: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = param_grad_check(&store, 1e-6, |s| {
            let a = s.g.constant(&[5, 4], m.clone())?;
            let b = s.g.constant(&[5, 3], st.clone())?;
            let y = mc.forward(s, a, b)?;
            let sq = s.g.square(y)?;
            Ok(s.g.reduce_sum(sq)?)
        })
        .unwrap();
        assert!(err <= 1e-5, "{err}");
        let out = mc.offset_output().clone();
        zero_params(&mut store, &[out.w, out.b.unwrap()]);
        let mut s = Session::inference(&store);
        let a = s.g.constant(&[5, 4], m.clone()).unwrap();
        let b = s.g.constant(&[5, 3], st.clone()).unwrap();
        let y = mc.forward(&mut s, a, b).unwrap();
        assert_eq!(s.g.value(y), &m[..]);
    }

    #[test]
    fn level_sizes_and_row_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::tiny(64);
        let (store, net) = net(&cfg);
        let (a, b) = (cloud(&mut rng, 64), cloud(&mut rng, 64));
        let mut s = Session::inference(&store);
        let st = net.forward(&mut s, &a, &b, 0.5).unwrap();
        let sizes: Vec<usize> = st.levels.iter().map(|l| l.len()).collect();
        assert_eq!(sizes, vec![64, 16, 2]);
        for l in &st.levels {
            for v in [l.features, l.motion, l.structure, l.motion_features, l.flow] {
                assert_eq!(s.g.rows(v), 2 * l.len());
            }
            assert_eq!(s.g.rows(l.forward), l.len());
            assert_eq!(s.g.rows(l.backward), l.len());
            assert_eq!(s.g.rows(l.attention[0]), l.len());
            assert_eq!(s.g.cols(l.attention[0]), l.len());
        }
        assert!(net.forward(&mut s, &a, &b, 1.0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_flow_and_selected_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = ModelConfig::tiny(32);
        let (mut store, net) = net(&cfg);
        let ids: Vec<_> = store.iter().map(|p| p.name.clone()).collect::<Vec<_>>().iter().map(|n| store.id(n).unwrap()).collect();
        zero_params(&mut store, &ids);
        let (a, b) = (cloud(&mut rng, 32), cloud(&mut rng, 32));
        let mut s = Session::inference(&store);
        let st = net.forward(&mut s, &a, &b, 0.3).unwrap();
        for l in &st.levels {
            assert!(s.g.value(l.flow).iter().all(|&v| v == 0.0));
            assert_eq!(points_of(&s, l.forward), l.pc0.points);
            assert_eq!(points_of(&s, l.backward), l.pc1.points);
        }
        let sel = fps(&a.points, 8, 0).unwrap();
        assert_eq!(st.levels[1].pc0.points, a.select(&sel).points);
    }

    #[test]
    fn structure_flag_shrinks_model_and_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig::tiny(32);
        let mut off = cfg.clone();
        off.flags.structure_branch = false;
        let (full, n_full) = net(&cfg);
        let (small, n_small) = net(&off);
        assert!(small.num_scalars() < full.num_scalars());
        let (a, b) = (cloud(&mut rng, 32), cloud(&mut rng, 32));
        let mut s = Session::inference(&small);
        n_small.forward(&mut s, &a, &b, 0.5).unwrap();
        let run = || {
            let mut s = Session::inference(&full);
            let st = n_full.forward(&mut s, &a, &b, 0.5).unwrap();
            st.levels.iter().map(|l| s.g.value(l.flow).to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_pyramid_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = ModelConfig::tiny(32);
        let (store, net) = net(&cfg);
        let (a, b) = (cloud(&mut rng, 32), cloud(&mut rng, 32));
        let err = param_grad_check(&store, 1e-6, |s| {
            let st = net.forward(s, &a, &b, 0.4)?;
            let mut terms = Vec::new();
            for l in &st.levels {
                let sq = s.g.square(l.forward)?;
                terms.push(s.g.reduce_mean(sq)?);
                let sq = s.g.square(l.backward)?;
                terms.push(s.g.reduce_mean(sq)?);
            }
            let all = s.g.concat_rows(&terms)?;
            Ok(s.g.reduce_sum(all)?)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
