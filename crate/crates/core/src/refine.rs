//! Refinement of the forward estimate and fusion with the backward estimate.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::cloud::Point;
use crate::config::RefineConfig;
use crate::error::{Error, Result};
use crate::kernels::{fps, knn};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{ParamBuilder, Session};
use crate::pyramid::{constant_points, points_of, upsample_stacked, Downsample, LEAKY};
use crate::tensor::{Real, Var};

/// Vector attention over a k-neighborhood with subtraction relation and a
/// learned positional encoding.
#[derive(Debug, Clone)]
pub struct PointTransformer {
    q: Linear,
    k: Linear,
    v: Linear,
    pos: Mlp,
    gamma: Mlp,
    out: Linear,
    neighbors: usize,
}

impl PointTransformer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, neighbors: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(PointTransformer {
            q: Linear::new(&mut pb, "q", c, c, false)?,
            k: Linear::new(&mut pb, "k", c, c, false)?,
            v: Linear::new(&mut pb, "v", c, c, false)?,
            pos: Mlp::new(&mut pb, "pos", &[3, c, c], Activation::Relu, false)?,
            gamma: Mlp::new(&mut pb, "gamma", &[c, c, c], Activation::Relu, false)?,
            out: Linear::new(&mut pb, "out", c, c, true)?,
            neighbors,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, pts: &[Point]) -> Result<Var> {
        let n = pts.len();
        let k = self.neighbors.min(n);
        let nn = knn(pts, pts, k)?;
        let repeat: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let rel: Vec<f64> = repeat
            .iter()
            .zip(&nn.indices)
            .flat_map(|(&i, &j)| (0..3).map(move |d| pts[i][d] - pts[j][d]))
            .collect();
        let rel = s.g.constant_f64(&[n * k, 3], &rel)?;
        let delta = self.pos.forward(s, rel)?;
        let q = self.q.forward(s, x)?;
        let kk = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let qi = s.g.gather_rows(q, &repeat)?;
        let kj = s.g.gather_rows(kk, &nn.indices)?;
        let vj = s.g.gather_rows(v, &nn.indices)?;
        let rel_qk = s.g.sub(qi, kj)?;
        let logits = s.g.add(rel_qk, delta)?;
        let logits = self.gamma.forward(s, logits)?;
        let w = s.g.softmax_groups(logits, k)?;
        let vals = s.g.add(vj, delta)?;
        let weighted = s.g.mul(w, vals)?;
        let y = s.g.sum_groups(weighted, k)?;
        let y = self.out.forward(s, y)?;
        Ok(s.g.add(x, y)?)
    }
}

/// Three-resolution U-Net that predicts per-point offsets for a cloud.
#[derive(Debug, Clone)]
pub struct RefineNet {
    cfg: RefineConfig,
    input: Mlp,
    down: Vec<Downsample>,
    up: Vec<Mlp>,
    attn: Vec<PointTransformer>,
    head: Linear,
}

impl RefineNet {
    /// `c_in` is the width of the per-point features passed to [`RefineNet::forward`].
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &RefineConfig, c_in: usize) -> Result<Self> {
        let mut pb = pb.scope("refine");
        let c = &cfg.channels;
        Ok(RefineNet {
            cfg: cfg.clone(),
            input: Mlp::new(&mut pb, "input", &[c_in + 3, c[0], c[0]], LEAKY, true)?,
            down: vec![
                Downsample::new(&mut pb, "down1", c[0], c[1], cfg.pool_k)?,
                Downsample::new(&mut pb, "down2", c[1], c[2], cfg.pool_k)?,
            ],
            up: vec![
                Mlp::new(&mut pb, "up1", &[c[2] + c[1], c[1], c[1]], LEAKY, true)?,
                Mlp::new(&mut pb, "up0", &[c[1] + c[0], c[0], c[0]], LEAKY, true)?,
            ],
            attn: vec![
                PointTransformer::new(&mut pb, "attn_down1", c[1], cfg.attn_k)?,
                PointTransformer::new(&mut pb, "attn_down2", c[2], cfg.attn_k)?,
                PointTransformer::new(&mut pb, "attn_up1", c[1], cfg.attn_k)?,
                PointTransformer::new(&mut pb, "attn_up0", c[0], cfg.attn_k)?,
            ],
            head: Linear::scaled(&mut pb, "head", c[0], 3, true, 0.1)?,
        })
    }

    /// Output layer of the residual head.
    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// `estimate + offsets`, where the offsets come from the U-Net over
    /// `[estimate, features]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, estimate: Var, features: Var) -> Result<Var> {
        if s.g.cols(estimate) != 3 || s.g.rows(features) != s.g.rows(estimate) {
            return Err(Error::Argument(format!(
                "refine expects N x 3 points and N feature rows, got {:?} and {:?}",
                s.g.shape(estimate),
                s.g.shape(features)
            )));
        }
        let p0 = points_of(s, estimate);
        let m1 = (p0.len() / self.cfg.divisor).max(1);
        let sel1 = fps(&p0, m1, 0)?;
        let p1: Vec<Point> = sel1.iter().map(|&i| p0[i]).collect();
        let m2 = (p1.len() / self.cfg.divisor).max(1);
        let sel2 = fps(&p1, m2, 0)?;
        let p2: Vec<Point> = sel2.iter().map(|&i| p1[i]).collect();

        let x = s.g.concat_cols(&[estimate, features])?;
        let x0 = self.input.forward(s, x)?;
        let x1 = self.down[0].forward(s, &[(&p0, &sel1)], x0)?;
        let x1 = self.attn[0].forward(s, x1, &p1)?;
        let x2 = self.down[1].forward(s, &[(&p1, &sel2)], x1)?;
        let x2 = self.attn[1].forward(s, x2, &p2)?;

        let u1 = self.upsample(s, &p2, &p1, x2)?;
        let u1 = s.g.concat_cols(&[u1, x1])?;
        let u1 = self.up[0].forward(s, u1)?;
        let u1 = self.attn[2].forward(s, u1, &p1)?;
        let u0 = self.upsample(s, &p1, &p0, u1)?;
        let u0 = s.g.concat_cols(&[u0, x0])?;
        let u0 = self.up[1].forward(s, u0)?;
        let u0 = self.attn[3].forward(s, u0, &p0)?;
        let offsets = self.head.forward(s, u0)?;
        Ok(s.g.add(estimate, offsets)?)
    }

    fn upsample<T: Real>(&self, s: &mut Session<'_, T>, coarse: &[Point], fine: &[Point], x: Var) -> Result<Var> {
        // single frame: pass the same cloud for both slots and keep the first half
        let n = fine.len();
        let both = s.g.concat_rows(&[x, x])?;
        let up = upsample_stacked(s, [coarse, coarse], [fine, fine], both, 3)?;
        Ok(s.g.slice_rows(up, 0, n)?)
    }
}

/// How fusion weights neighbor candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionWeights {
    Learned,
    /// All weight on the nearest candidate.
    Nearest,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    mlp: Mlp,
    k: usize,
}

/// Result of [`Fusion::forward`].
#[derive(Debug, Clone)]
pub struct Fused {
    pub points: Var,
    /// `L*k x 1` softmax weights, grouped per anchor.
    pub weights: Var,
    /// Rows of `[fwd; bwd]` used as neighbors, `k` per anchor.
    pub neighbors: Vec<usize>,
    /// Anchor rows of `[fwd; bwd]`.
    pub anchors: Vec<usize>,
    pub k: usize,
}

impl Fusion {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, k: usize, hidden: usize) -> Result<Self> {
        Ok(Fusion {
            mlp: Mlp::new(pb, "fusion", &[5, hidden, 1], LEAKY, false)?,
            k,
        })
    }

    /// Number of anchors taken from the forward estimate.
    pub fn forward_share(l: usize, t: f64) -> usize {
        (((1.0 - t) * l as f64).round() as usize).min(l)
    }

    /// Samples `L` anchors (`round((1 - t) L)` from `fwd`, the rest from
    /// `bwd`, at complementary indices of one random permutation) and
    /// replaces each by a convex combination of its `k` nearest points in
    /// `fwd ∪ bwd`. Offsets fed to the weight MLP are divided by `spacing`,
    /// the typical point distance of the inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        fwd: Var,
        bwd: Var,
        t: f64,
        spacing: f64,
        rng: &mut ChaCha8Rng,
        mode: FusionWeights,
    ) -> Result<Fused> {
        let l = s.g.rows(fwd);
        if s.g.rows(bwd) != l || s.g.cols(fwd) != 3 || s.g.cols(bwd) != 3 {
            return Err(Error::Argument(format!(
                "fusion needs two N x 3 estimates, got {:?} and {:?}",
                s.g.shape(fwd),
                s.g.shape(bwd)
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Argument(format!("fusion spacing must be positive, got {spacing}")));
        }
        let k = self.k;
        if k == 0 || k > 2 * l {
            return Err(Error::Argument(format!(
                "fusion k = {k} exceeds the {} candidate points",
                2 * l
            )));
        }
        let union = s.g.concat_rows(&[fwd, bwd])?;
        let pts = points_of(s, union);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(rng);
        let n_fwd = Self::forward_share(l, t);
        let mut anchors: Vec<usize> = perm[..n_fwd].to_vec();
        anchors.extend(perm[n_fwd..].iter().map(|&i| i + l));
        let anchor_pts: Vec<Point> = anchors.iter().map(|&i| pts[i]).collect();
        let nn = knn(&anchor_pts, &pts, k)?;

        let cand = s.g.gather_rows(union, &nn.indices)?;
        let weights = match mode {
            FusionWeights::Learned => {
                let repeat: Vec<usize> = anchors.iter().flat_map(|&a| std::iter::repeat_n(a, k)).collect();
                let centers = s.g.gather_rows(union, &repeat)?;
                let rel = s.g.sub(cand, centers)?;
                let rel = s.g.scale(rel, 1.0 / spacing)?;
                let dist = s.g.l2norm_rows(rel)?;
                let tags: Vec<f64> = nn.indices.iter().map(|&j| if j < l { 0.0 } else { 1.0 }).collect();
                let tag = s.g.constant_f64(&[l * k, 1], &tags)?;
                let x = s.g.concat_cols(&[rel, dist, tag])?;
                let logits = self.mlp.forward(s, x)?;
                s.g.softmax_groups(logits, k)?
            }
            FusionWeights::Nearest => {
                let one_hot: Vec<f64> = (0..l * k).map(|i| if i % k == 0 { 1.0 } else { 0.0 }).collect();
                s.g.constant_f64(&[l * k, 1], &one_hot)?
            }
        };
        let weighted = s.g.mul_col(cand, weights)?;
        let points = s.g.sum_groups(weighted, k)?;
        Ok(Fused {
            points,
            weights,
            neighbors: nn.indices,
            anchors,
            k,
        })
    }
}

/// Coordinates as a constant `N x 3` tensor.
pub fn cloud_constant<T: Real>(s: &mut Session<'_, T>, pts: &[Point]) -> Result<Var> {
    constant_points(s, pts)
}
