//! Motion-structure transformer block.
//!
//! Both temporal directions are processed as one stacked tensor: rows
//! `[0, L)` belong to frame 0 and rows `[L, 2L)` to frame 1. Direction
//! `0 -> 1` takes queries from frame 0 and keys/values from frame 1, and
//! the reverse direction swaps the roles.
//!
//! The coordinate map is built from point indices, so the block is not
//! permutation-equivariant: callers must give both frames a consistent
//! ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp, LEAKY_SLOPE};
use crate::params::{ParamBuilder, Session};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Queries from one direction, keys and values from the other.
    #[serde(rename = "dual_cross")]
    DualCross,
    /// Keys and values come from the query's own frame.
    #[serde(rename = "self")]
    SelfAttention,
}

/// `L x 3` row-major grid with every entry of row `i` equal to `i / (L - 1)`.
pub fn coordinate_map(l: usize) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(Error::Argument("coordinate map needs at least one point".into()));
    }
    let denom = (l.max(2) - 1) as f64;
    Ok((0..l).flat_map(|i| [i as f64 / denom; 3]).collect())
}

/// `softmax(q k^T / sqrt(d))` with `d = cols(q)`, normalized per row.
pub fn dual_cross_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    if g.cols(q) != g.cols(k) {
        return Err(Error::Argument(format!(
            "query width {} does not match key width {}",
            g.cols(q),
            g.cols(k)
        )));
    }
    let d = g.cols(q) as f64;
    let kt = g.transpose_last2(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / d.sqrt())?;
    Ok(g.softmax_lastdim(logits)?)
}

/// `S = (A v) W_S`.
pub fn structure_head<T: Real>(g: &mut Graph<T>, a: Var, v: Var, w_s: Var) -> Result<Var> {
    let av = g.matmul(a, v)?;
    Ok(g.matmul(av, w_s)?)
}

/// `M = (A B1 - B1) W_M`.
pub fn motion_head<T: Real>(g: &mut Graph<T>, a: Var, b1: Var, w_m: Var) -> Result<Var> {
    let warped = g.matmul(a, b1)?;
    let diff = g.sub(warped, b1)?;
    Ok(g.matmul(diff, w_m)?)
}

/// Per-direction outputs; index 0 is direction `0 -> 1`, index 1 is `1 -> 0`.
#[derive(Debug, Clone, Copy)]
pub struct MsBlockOutput {
    pub attention: [Var; 2],
    pub structure: [Var; 2],
    pub motion: [Var; 2],
    /// Stacked `[F0'; F1']`.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct MsBlock {
    pub channels: usize,
    pub attn_dim: usize,
    norm: LayerNorm,
    wq: Linear,
    wk: Linear,
    wb: Linear,
    wm: Linear,
    structure: Option<StructurePath>,
}

#[derive(Debug, Clone)]
struct StructurePath {
    wv: Linear,
    ws: Linear,
    update: Mlp,
}

impl MsBlock {
    /// Without the structure branch `W_v`, `W_S` and the update MLP are not
    /// created; the structure output is then the normalized input features.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, attn_dim: usize, structure_branch: bool) -> Result<Self> {
        let mut pb = pb.scope(name);
        let structure = if structure_branch {
            Some(StructurePath {
                wv: Linear::new(&mut pb, "wv", channels, attn_dim, false)?,
                ws: Linear::new(&mut pb, "ws", attn_dim, attn_dim, false)?,
                update: Mlp::new(&mut pb, "update", &[attn_dim, channels, channels], Activation::LeakyRelu(LEAKY_SLOPE), false)?,
            })
        } else {
            None
        };
        Ok(MsBlock {
            channels,
            attn_dim,
            norm: LayerNorm::new(&mut pb, "norm", channels)?,
            wq: Linear::new(&mut pb, "wq", channels, attn_dim, false)?,
            wk: Linear::new(&mut pb, "wk", channels, attn_dim, false)?,
            wb: Linear::new(&mut pb, "wb", 3, attn_dim, false)?,
            wm: Linear::new(&mut pb, "wm", attn_dim, attn_dim, false)?,
            structure,
        })
    }

    /// Width of the structure output.
    pub fn structure_dim(&self) -> usize {
        if self.structure.is_some() {
            self.attn_dim
        } else {
            self.channels
        }
    }

    /// Runs the block on stacked features `[F0; F1]` of shape `2L x C`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, stacked: Var, mode: AttentionMode) -> Result<MsBlockOutput> {
        let rows = s.g.rows(stacked);
        if !rows.is_multiple_of(2) || s.g.cols(stacked) != self.channels {
            return Err(Error::Argument(format!(
                "block expects 2L x {} stacked features, got {:?}",
                self.channels,
                s.g.shape(stacked)
            )));
        }
        let l = rows / 2;
        let normed = self.norm.forward(s, stacked)?;
        let q = self.wq.forward(s, normed)?;
        let k = self.wk.forward(s, normed)?;
        let v = match &self.structure {
            Some(p) => Some(p.wv.forward(s, normed)?),
            None => None,
        };
        let coords = s.g.constant_f64(&[l, 3], &coordinate_map(l)?)?;
        let b1 = self.wb.forward(s, coords)?;

        let mut attention = Vec::with_capacity(2);
        let mut structure = Vec::with_capacity(2);
        let mut motion = Vec::with_capacity(2);
        let mut updated = Vec::with_capacity(2);
        for dir in 0..2 {
            let own = dir * l;
            let other = match mode {
                AttentionMode::DualCross => (1 - dir) * l,
                AttentionMode::SelfAttention => own,
            };
            let qd = s.g.slice_rows(q, own, l)?;
            let kd = s.g.slice_rows(k, other, l)?;
            let a = dual_cross_attention(&mut s.g, qd, kd)?;
            let w_m = s.param(self.wm.w);
            let m = motion_head(&mut s.g, a, b1, w_m)?;
            let f_own = s.g.slice_rows(stacked, own, l)?;
            let (st, f_next) = match (&self.structure, v) {
                (Some(p), Some(v)) => {
                    let vd = s.g.slice_rows(v, other, l)?;
                    let w_s = s.param(p.ws.w);
                    let st = structure_head(&mut s.g, a, vd, w_s)?;
                    let delta = p.update.forward(s, st)?;
                    (st, s.g.add(f_own, delta)?)
                }
                _ => (s.g.slice_rows(normed, own, l)?, f_own),
            };
            attention.push(a);
            structure.push(st);
            motion.push(m);
            updated.push(f_next);
        }
        let features = s.g.concat_rows(&updated)?;
        Ok(MsBlockOutput {
            attention: [attention[0], attention[1]],
            structure: [structure[0], structure[1]],
            motion: [motion[0], motion[1]],
            features,
        })
    }
}

/// Motion features at time `t` under the local-linear assumption.
pub fn motion_at<T: Real>(g: &mut Graph<T>, m: Var, t: f64) -> Result<Var> {
    Ok(g.scale(m, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{param_grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(structure: bool, c: usize, d: usize) -> (ParamStore<f64>, MsBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, "");
        let b = MsBlock::new(&mut pb, "blk", c, d, structure).unwrap();
        (store, b)
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn coordinate_map_examples() {
        assert_eq!(coordinate_map(3).unwrap(), vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(coordinate_map(1).unwrap(), vec![0.0; 3]);
        assert_eq!(coordinate_map(2).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(coordinate_map(0).is_err());
    }

    #[test]
    fn attention_closed_form() {
        // q k^T / sqrt(1) = [[0, ln 3], [0, 0]]
        let mut g = Graph::<f64>::new();
        let q = g.constant(&[2, 1], vec![1.0, 0.0]).unwrap();
        let k = g.constant(&[2, 1], vec![0.0, 3f64.ln()]).unwrap();
        let a = dual_cross_attention(&mut g, q, k).unwrap();
        let want = [0.25, 0.75, 0.5, 0.5];
        for (x, w) in g.value(a).iter().zip(want) {
            assert!((x - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_give_uniform_attention() {
        let (store, b) = block(true, 4, 3);
        let mut s = Session::inference(&store);
        let f = s.g.zeros(&[10, 4]).unwrap();
        let out = b.forward(&mut s, f, AttentionMode::DualCross).unwrap();
        for a in out.attention {
            assert!(s.g.value(a).iter().all(|&x| (x - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_attention_gives_zero_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let l = 5;
        let mut eye = vec![0.0; l * l];
        for i in 0..l {
            eye[i * l + i] = 1.0;
        }
        let a = g.constant(&[l, l], eye.clone()).unwrap();
        let b1 = g.constant(&[l, 4], random(&mut rng, l * 4)).unwrap();
        let wm = g.constant(&[4, 4], random(&mut rng, 16)).unwrap();
        let m = motion_head(&mut g, a, b1, wm).unwrap();
        assert!(g.value(m).iter().all(|&x| x == 0.0));

        let v = g.constant(&[l, 4], random(&mut rng, l * 4)).unwrap();
        let mut id4 = vec![0.0; 16];
        for i in 0..4 {
            id4[i * 4 + i] = 1.0;
        }
        let ws = g.constant(&[4, 4], id4).unwrap();
        let st = structure_head(&mut g, a, v, ws).unwrap();
        assert_eq!(g.value(st), g.value(v));
    }

    #[test]
    fn cyclic_shift_motion() {
        let mut g = Graph::<f64>::new();
        let shift = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let a = g.constant(&[3, 3], shift).unwrap();
        let b1v = vec![0.1, 0.7, -0.3, 1.5, 0.2, 0.9, -2.0, 0.4, 0.05];
        let b1 = g.constant(&[3, 3], b1v.clone()).unwrap();
        let eye = g.constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = motion_head(&mut g, a, b1, eye).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                let want = b1v[((i + 1) % 3) * 3 + c] - b1v[i * 3 + c];
                assert!((g.value(m)[i * 3 + c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn structure_head_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, d) = (4, 3);
        let av = random(&mut rng, l * l);
        let vv = random(&mut rng, l * d);
        let wv = random(&mut rng, d * d);
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[l, l], av.clone()).unwrap();
        let v = g.constant(&[l, d], vv.clone()).unwrap();
        let w = g.constant(&[d, d], wv.clone()).unwrap();
        let st = structure_head(&mut g, a, v, w).unwrap();
        for i in 0..l {
            for c in 0..d {
                let mut want = 0.0;
                for j in 0..l {
                    for e in 0..d {
                        want += av[i * l + j] * vv[j * d + e] * wv[e * d + c];
                    }
                }
                assert!((g.value(st)[i * d + c] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn motion_scales_linearly_in_t() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(&[2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        for t in [0.25, 0.5, 0.75] {
            let mt = motion_at(&mut g, m, t).unwrap();
            for (a, b) in g.value(mt).iter().zip([0.3, -1.0, 2.0, 0.5]) {
                assert_eq!(*a, t * b);
            }
        }
    }

    #[test]
    fn symmetric_inputs_give_symmetric_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, b) = block(true, 6, 4);
        let half = random(&mut rng, 7 * 6);
        let stacked: Vec<f64> = half.iter().chain(&half).copied().collect();
        for mode in [AttentionMode::DualCross, AttentionMode::SelfAttention] {
            let mut s = Session::inference(&store);
            let f = s.g.constant(&[14, 6], stacked.clone()).unwrap();
            let out = b.forward(&mut s, f, mode).unwrap();
            for pair in [out.attention, out.structure, out.motion] {
                for (x, y) in s.g.value(pair[0]).iter().zip(s.g.value(pair[1])) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
            let fv = s.g.value(out.features);
            for (x, y) in fv[..42].iter().zip(&fv[42..]) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn modes_share_parameters_and_structure_flag_shrinks() {
        let (with, _) = block(true, 6, 4);
        let (without, b) = block(false, 6, 4);
        assert!(without.num_scalars() < with.num_scalars());
        let mut s = Session::inference(&without);
        let f = s.g.constant(&[8, 6], vec![0.1; 48]).unwrap();
        let out = b.forward(&mut s, f, AttentionMode::DualCross).unwrap();
        assert_eq!(s.g.value(out.features), &[0.1; 48][..]);
        assert_eq!(s.g.cols(out.structure[0]), 6);
    }

    #[test]
    fn attention_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, b) = block(true, 5, 4);
        for _ in 0..10 {
            let mut s = Session::inference(&store);
            let f = s.g.constant(&[12, 5], random(&mut rng, 60).iter().map(|x| 4.0 * x).collect()).unwrap();
            let out = b.forward(&mut s, f, AttentionMode::DualCross).unwrap();
            for a in out.attention {
                for row in s.g.value(a).chunks(6) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn block_gradient_wrt_input_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut store, b) = block(true, 4, 3);
        let x = store.add("input", &[12, 4], random(&mut rng, 48)).unwrap();
        for mode in [AttentionMode::DualCross, AttentionMode::SelfAttention] {
            let err = param_grad_check(&store, 1e-6, |s| {
                let f = s.param(x);
                let out = b.forward(s, f, mode)?;
                let mut terms = Vec::new();
                for t in out.motion.iter().chain(&out.structure) {
                    let sq = s.g.square(*t)?;
                    terms.push(s.g.reduce_sum(sq)?);
                }
                let all = s.g.concat_rows(&terms)?;
                Ok(s.g.reduce_sum(all)?)
            })
            .unwrap();
            assert!(err <= 1e-5, "{mode:?}: {err}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coordinate_map_is_a_monotone_unit_grid(l in 1usize..300) {
                let b = coordinate_map(l).unwrap();
                prop_assert_eq!(b.len(), 3 * l);
                prop_assert!(b.iter().all(|&x| (0.0..=1.0).contains(&x)));
                for c in 0..3 {
                    prop_assert!((1..l).all(|i| b[i * 3 + c] >= b[(i - 1) * 3 + c]));
                }
                prop_assert_eq!(b, coordinate_map(l).unwrap());
            }

            #[test]
            fn attention_rows_sum_to_one(seed in any::<u64>(), l in 1usize..20, scale in 0.01f64..30.0, dual: bool) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (store, b) = block(true, 5, 4);
                let mut s = Session::inference(&store);
                let f = s.g.constant(&[2 * l, 5], random(&mut rng, 10 * l).iter().map(|x| scale * x).collect()).unwrap();
                let mode = if dual { AttentionMode::DualCross } else { AttentionMode::SelfAttention };
                let out = b.forward(&mut s, f, mode).unwrap();
                for a in out.attention {
                    for row in s.g.value(a).chunks(l) {
                        prop_assert!(row.iter().all(|x| x.is_finite()));
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
