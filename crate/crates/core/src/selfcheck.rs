//! Built-in verification suite behind `pcinterp selfcheck`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cloud::{Direction, Point, PointCloud, SceneFlow};
use crate::config::{ModelConfig, RefineConfig};
use crate::error::{Error, Result};
use crate::kernels::{fps, warp};
use crate::losses::{pyramid_gt, total_loss, LossWeights};
use crate::metrics::{chamfer, emd_approx, emd_exact};
use crate::model::FastPci;
use crate::msformer::{AttentionMode, MsBlock};
use crate::oracle::{brute_chamfer, brute_emd, greedy_fps, random_points};
use crate::params::{param_grad_check, ParamBuilder, ParamStore};
use crate::pyramid::PyramidNet;
use crate::refine::{cloud_constant, Fusion, FusionWeights, RefineNet};
use crate::tensor::{grad_check_many, Graph, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    /// Gradient-check tolerance. Finite differences always run in f64; the
    /// f32 mode only loosens the bound to what single-precision training needs.
    pub fn grad_tolerance(self) -> (f64, f64) {
        match self {
            Precision::F32 => (1e-3, 1e-3),
            Precision::F64 => (1e-5, 1e-5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelfCheckReport {
    pub items: Vec<CheckItem>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    fn push(&mut self, name: impl Into<String>, r: Result<(bool, String)>) {
        let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.items.push(CheckItem {
            name: name.into(),
            passed,
            detail,
        });
    }
}

impl fmt::Display for SelfCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.items {
            writeln!(f, "{} {:<28} {}", if i.passed { "PASS" } else { "FAIL" }, i.name, i.detail)?;
        }
        let failed = self.items.iter().filter(|i| !i.passed).count();
        write!(f, "{} checks, {failed} failed", self.items.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelfCheckOptions {
    pub precision: Precision,
    /// Flip a bit in the stored CRC before the checkpoint load check.
    pub corrupt_checkpoint: bool,
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, TensorError>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("mul_col", vec![vec![3, 4], vec![3, 1]], |g, v| g.mul_col(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| g.scale(v[0], -1.7)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, v| g.concat_cols(&[v[1], v[0]])),
        ("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1, 1])),
        ("slice_rows", vec![vec![5, 2]], |g, v| g.slice_rows(v[0], 1, 3)),
        ("weighted_gather", vec![vec![4, 3]], |g, v| g.weighted_gather(v[0], &[0, 2, 3, 3, 1, 0], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3], 3)),
        ("softmax_lastdim", vec![vec![3, 5]], |g, v| g.softmax_lastdim(v[0])),
        ("softmax_groups", vec![vec![6, 2]], |g, v| g.softmax_groups(v[0], 3)),
        ("sum_groups", vec![vec![6, 2]], |g, v| g.sum_groups(v[0], 2)),
        ("max_pool_groups", vec![vec![6, 2]], |g, v| g.max_pool_groups(v[0], 3)),
        ("relu", vec![vec![3, 4]], |g, v| g.relu(v[0])),
        ("leaky_relu", vec![vec![3, 4]], |g, v| g.leaky_relu(v[0], 0.1)),
        ("sigmoid", vec![vec![3, 4]], |g, v| g.sigmoid(v[0])),
        ("sqrt", vec![vec![3, 4]], |g, v| {
            let sq = g.square(v[0])?;
            let one = g.constant_f64(&[4], &[0.5; 4])?;
            let pos = g.add_row(sq, one)?;
            g.sqrt(pos)
        }),
        ("square", vec![vec![3, 4]], |g, v| g.square(v[0])),
        ("transpose_last2", vec![vec![3, 4]], |g, v| g.transpose_last2(v[0])),
        ("reduce_sum", vec![vec![3, 4]], |g, v| g.reduce_sum(v[0])),
        ("reduce_mean", vec![vec![3, 4]], |g, v| g.reduce_mean(v[0])),
        ("min_over_rows_with_index", vec![vec![3, 5]], |g, v| g.min_over_rows_with_index(v[0])),
        ("l2norm_rows", vec![vec![3, 4]], |g, v| g.l2norm_rows(v[0])),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    ]
}

/// Values in `[-1, -0.1] ∪ [0.1, 1]`, away from kinks and ties.
fn op_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Largest relative gradient error of every autodiff op, in f64.
pub fn op_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x09e7);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let vals: Vec<Vec<f64>> = shapes.iter().map(|s| op_input(&mut rng, s.iter().product())).collect();
            let inputs: Vec<(&[usize], &[f64])> = shapes.iter().zip(&vals).map(|(s, v)| (&s[..], &v[..])).collect();
            // contract the output with fixed random weights so no entry cancels out
            let err = grad_check_many(&inputs, 1e-6, |g, v| {
                let y = f(g, v)?;
                let n = g.value(y).len();
                let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0).collect();
                let w = g.constant_f64(g.shape(y).to_vec().as_slice(), &w)?;
                let p = g.mul(y, w)?;
                g.reduce_sum(p)
            })?;
            Ok((name, err))
        })
        .collect()
}

fn sum_squares(g: &mut Graph<f64>, vars: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for &v in vars {
        let sq = g.square(v)?;
        terms.push(g.reduce_mean(sq)?);
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.reduce_sum(all)?)
}

/// Gradient errors of the composite modules on small configurations, with
/// respect to every parameter.
pub fn module_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3d);
    let cloud = |rng: &mut ChaCha8Rng, n| PointCloud::new(random_points(rng, n));
    let mut out = Vec::new();

    for (name, mode) in [("ms_block", AttentionMode::DualCross), ("ms_block (self)", AttentionMode::SelfAttention)] {
        let mut store = ParamStore::<f64>::new();
        let block = MsBlock::new(&mut ParamBuilder::new(&mut store, &mut rng.clone(), ""), "blk", 4, 3, true)?;
        let x = store.add("input", &[12, 4], op_input(&mut rng, 48))?;
        let err = param_grad_check(&store, 1e-6, |s| {
            let f = s.param(x);
            let o = block.forward(s, f, mode)?;
            let vars: Vec<Var> = o.motion.iter().chain(&o.structure).copied().collect();
            sum_squares(&mut s.g, &vars)
        })?;
        out.push((name, err));
    }

    let cfg = ModelConfig::tiny(32);
    let (a, b, gt) = (cloud(&mut rng, 32)?, cloud(&mut rng, 32)?, cloud(&mut rng, 32)?);
    {
        let mut store = ParamStore::<f64>::new();
        let net = PyramidNet::new(&mut ParamBuilder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), ""), &cfg)?;
        let err = param_grad_check(&store, 1e-6, |s| {
            let st = net.forward(s, &a, &b, 0.4)?;
            let vars: Vec<Var> = st.levels.iter().flat_map(|l| [l.forward, l.backward]).collect();
            sum_squares(&mut s.g, &vars)
        })?;
        out.push(("pyramid_forward", err));
    }
    {
        let rc = RefineConfig {
            channels: vec![3, 4, 5],
            divisor: 4,
            attn_k: 4,
            pool_k: 3,
        };
        let mut store = ParamStore::<f64>::new();
        let net = RefineNet::new(&mut ParamBuilder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), ""), &rc, 2)?;
        let feats = op_input(&mut rng, 64);
        let err = param_grad_check(&store, 1e-6, |s| {
            let est = cloud_constant(s, &a.points)?;
            let f = s.g.constant_f64(&[32, 2], &feats)?;
            let r = net.forward(s, est, f)?;
            sum_squares(&mut s.g, &[r])
        })?;
        out.push(("refine", err));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let fu = Fusion::new(&mut ParamBuilder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(3), ""), 4, 6)?;
        let va = store.add("a", &[12, 3], random_points(&mut rng, 12).concat())?;
        let vb = store.add("b", &[12, 3], random_points(&mut rng, 12).concat())?;
        let err = param_grad_check(&store, 1e-6, |s| {
            let (x, y) = (s.param(va), s.param(vb));
            let f = fu.forward(s, x, y, 0.25, 0.3, &mut ChaCha8Rng::seed_from_u64(9), FusionWeights::Learned)?;
            sum_squares(&mut s.g, &[f.points])
        })?;
        out.push(("fuse", err));
    }
    {
        let mut store = ParamStore::<f64>::new();
        let m = FastPci::new(&mut store, &cfg, 5)?;
        let lg = pyramid_gt(&gt, &cfg.level_sizes())?;
        let err = param_grad_check(&store, 1e-6, |s| {
            let o = m.forward(s, &a, &b, 0.5, 7, FusionWeights::Learned)?;
            Ok(total_loss(&mut s.g, &o.loss_inputs(), &gt, &lg, &LossWeights::default())?.total)
        })?;
        out.push(("total_loss", err));
    }
    Ok(out)
}

fn bound_check(errs: Vec<(&'static str, f64)>, tol: f64) -> (bool, String) {
    let worst = errs.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    (
        errs.iter().all(|e| e.1 <= tol),
        format!("{} cases, worst {} = {:.2e} (tol {tol:.0e})", errs.len(), worst.0, worst.1),
    )
}

fn emd_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe3d);
    let mut worst_exact: f64 = 0.0;
    for n in 1..=7 {
        let (x, y) = (random_points(&mut rng, n), random_points(&mut rng, n));
        worst_exact = worst_exact.max((emd_exact(&x, &y)?.total_cost - brute_emd(&x, &y)).abs());
    }
    let mut worst_rel: f64 = 0.0;
    for i in 0..10 {
        let n = 4 + 6 * i;
        let (x, y) = (random_points(&mut rng, n), random_points(&mut rng, n));
        let exact = emd_exact(&x, &y)?.total_cost;
        worst_rel = worst_rel.max((emd_approx(&x, &y, None)? - exact).abs() / exact);
    }
    Ok((
        worst_exact <= 1e-12 && worst_rel <= 0.01,
        format!("exact vs brute {worst_exact:.1e}, approx rel {worst_rel:.1e}"),
    ))
}

fn chamfer_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xcd);
    let x = random_points(&mut rng, 64);
    let ident = chamfer(&x, &x)?;
    let single = chamfer(&[[0.0; 3]], &[[1.0, 0.0, 0.0]])?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (a, b) = (random_points(&mut rng, 128), random_points(&mut rng, 128));
        worst = worst.max((chamfer(&a, &b)? - brute_chamfer(&a, &b)).abs());
    }
    Ok((
        ident == 0.0 && single == 2.0 && worst <= 1e-9,
        format!("CD(X,X) = {ident}, unit offset = {single}, vs brute {worst:.1e}"),
    ))
}

fn warp_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a);
    let pc = PointCloud::new(random_points(&mut rng, 50))?;
    let zero = SceneFlow::zeros(50, Direction::Forward);
    let sf = SceneFlow::new(random_points(&mut rng, 50), Direction::Forward)?;
    let back = SceneFlow::new(sf.vectors.clone(), Direction::Backward)?;
    let same = |a: &PointCloud, b: &PointCloud| {
        a.points
            .iter()
            .flatten()
            .zip(b.points.iter().flatten())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    };
    let ok = same(&warp(&pc, &zero, 0.37)?, &pc) && same(&warp(&pc, &sf, 0.0)?, &pc) && same(&warp(&pc, &back, 1.0)?, &pc);
    Ok((ok, "zero flow, forward t = 0 and backward t = 1 leave the cloud bitwise unchanged".into()))
}

fn fps_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf5);
    for case in 0..10 {
        let n = 8 + 24 * case;
        let pts: Vec<Point> = random_points(&mut rng, n);
        let m = 1 + rng.random_range(0..n);
        let start = rng.random_range(0..n);
        if fps(&pts, m, start)? != greedy_fps(&pts, m, start) {
            return Ok((false, format!("case {case} (N = {n}, m = {m}) differs")));
        }
    }
    Ok((true, "10 cases index-for-index".into()))
}

fn checkpoint_check(corrupt: bool) -> Result<(bool, String)> {
    let mut store = ParamStore::<f32>::new();
    FastPci::new(&mut store, &ModelConfig::tiny(32), 1)?;
    let dir = tempfile::tempdir().map_err(|e| Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    let path = dir.path().join("selfcheck.fpci");
    checkpoint::save(&path, &store)?;
    if corrupt {
        let mut bytes = std::fs::read(&path).map_err(crate::error::io_err(&path))?;
        let n = bytes.len();
        bytes[n - 1] ^= 0x01;
        std::fs::write(&path, bytes).map_err(crate::error::io_err(&path))?;
    }
    let back = match checkpoint::load(&path) {
        Ok(b) => b,
        Err(e) => return Ok((false, e.to_string())),
    };
    let bitwise = checkpoint::encode(&back) == checkpoint::encode(&store);
    Ok((bitwise, format!("{} tensors round-trip", store.len())))
}

/// Runs every check; failures are reported, never propagated.
pub fn run(opts: &SelfCheckOptions) -> SelfCheckReport {
    let (op_tol, module_tol) = opts.precision.grad_tolerance();
    let mut r = SelfCheckReport::default();
    r.push("gradients: ops", op_gradient_errors().map(|e| bound_check(e, op_tol)));
    r.push("gradients: modules", module_gradient_errors().map(|e| bound_check(e, module_tol)));
    r.push("emd oracle", emd_check());
    r.push("chamfer identities", chamfer_check());
    r.push("warp identities", warp_check());
    r.push("fps oracle", fps_check());
    r.push("checkpoint round-trip", checkpoint_check(opts.corrupt_checkpoint));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_gradients_are_tight() {
        let errs = op_gradient_errors().unwrap();
        assert_eq!(errs.len(), op_cases().len());
        for (name, e) in errs {
            assert!(e <= 1e-5, "{name}: {e}");
        }
    }

    #[test]
    fn cheap_checks_pass() {
        for c in [emd_check(), chamfer_check(), warp_check(), fps_check(), checkpoint_check(false)] {
            let (ok, detail) = c.unwrap();
            assert!(ok, "{detail}");
        }
    }

    #[test]
    fn corrupted_crc_fails_only_that_check() {
        let (ok, detail) = checkpoint_check(true).unwrap();
        assert!(!ok);
        assert!(detail.contains("CRC"), "{detail}");
    }
}
