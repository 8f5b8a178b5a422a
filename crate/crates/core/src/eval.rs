//! Held-out evaluation over the three intermediate frames.

use std::path::Path;

use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{io_err, Error, Result};
use crate::metrics::{chamfer, emd_approx, emd_exact, EMD_EXACT_MAX};
use crate::model::FastPci;
use crate::params::ParamStore;
use crate::synth::Sequence;
use crate::tensor::Real;

/// Frame slots evaluated per sequence and their times.
pub const EVAL_FRAMES: [(usize, f64); 3] = [(1, 0.25), (2, 0.5), (3, 0.75)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmdMode {
    /// Exact up to the exact-solver limit, auction above it.
    Auto,
    Off,
}

pub fn emd(x: &[crate::Point], y: &[crate::Point], mode: EmdMode) -> Result<Option<f64>> {
    match mode {
        EmdMode::Off => Ok(None),
        EmdMode::Auto if x.len() <= EMD_EXACT_MAX => Ok(Some(emd_exact(x, y)?.total_cost)),
        EmdMode::Auto => Ok(Some(emd_approx(x, y, None)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub cd: f64,
    pub emd: Option<f64>,
}

/// Mean CD and EMD per frame slot over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub frames: [FrameMetrics; 3],
}

impl MetricsReport {
    pub fn average(&self) -> FrameMetrics {
        let f = &self.frames;
        FrameMetrics {
            cd: (f[0].cd + f[1].cd + f[2].cd) / 3.0,
            emd: match (f[0].emd, f[1].emd, f[2].emd) {
                (Some(a), Some(b), Some(c)) => Some((a + b + c) / 3.0),
                _ => None,
            },
        }
    }

    /// `frame,CD,EMD` with rows 1, 2, 3 and Average. EMD is left empty when
    /// it was not computed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,CD,EMD\n");
        let fmt = |m: &FrameMetrics| format!("{},{}", m.cd, m.emd.map(|e| e.to_string()).unwrap_or_default());
        for (i, m) in self.frames.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, fmt(m)));
        }
        out.push_str(&format!("Average,{}\n", fmt(&self.average())));
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Scores `predict(seq, frame, t)` against the stored frames. Sequences are
/// processed in parallel; sums are taken in sequence order.
pub fn evaluate_with<F>(test: &[Sequence], emd_mode: EmdMode, predict: F) -> Result<MetricsReport>
where
    F: Fn(&Sequence, usize, f64) -> Result<PointCloud> + Sync,
{
    if test.is_empty() {
        return Err(Error::Argument("test set is empty".into()));
    }
    let per_seq: Vec<Result<[FrameMetrics; 3]>> = test
        .par_iter()
        .map(|seq| {
            let mut out = [FrameMetrics { cd: 0.0, emd: None }; 3];
            for (slot, &(frame, t)) in EVAL_FRAMES.iter().enumerate() {
                let pred = predict(seq, frame, t)?;
                let gt = &seq.frames[frame];
                out[slot] = FrameMetrics {
                    cd: chamfer(&pred.points, &gt.points)?,
                    emd: emd(&pred.points, &gt.points, emd_mode)?,
                };
            }
            Ok(out)
        })
        .collect();
    let n = test.len() as f64;
    let mut frames = [FrameMetrics {
        cd: 0.0,
        emd: (emd_mode != EmdMode::Off).then_some(0.0),
    }; 3];
    for r in per_seq {
        for (acc, m) in frames.iter_mut().zip(r?) {
            acc.cd += m.cd / n;
            if let (Some(a), Some(e)) = (acc.emd.as_mut(), m.emd) {
                *a += e / n;
            }
        }
    }
    Ok(MetricsReport { frames })
}

/// Fusion seed used for a given sequence and frame, so evaluation is reproducible.
pub fn eval_fusion_seed(seq: &Sequence, frame: usize) -> u64 {
    seq.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ frame as u64
}

pub fn evaluate<T: Real>(model: &FastPci, store: &ParamStore<T>, test: &[Sequence], emd_mode: EmdMode) -> Result<MetricsReport> {
    evaluate_with(test, emd_mode, |seq, frame, t| {
        Ok(model
            .interpolate(store, &seq.frames[0], &seq.frames[4], t, eval_fusion_seed(seq, frame))?
            .final_cloud)
    })
}

/// Predicts every intermediate frame as a copy of frame 0.
pub fn copy_frame0_baseline(test: &[Sequence], emd_mode: EmdMode) -> Result<MetricsReport> {
    evaluate_with(test, emd_mode, |seq, _, _| Ok(seq.frames[0].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{dataset, SceneTemplate};

    fn test_set() -> Vec<Sequence> {
        let tpl = SceneTemplate {
            points: 64,
            ..SceneTemplate::default()
        };
        dataset(3, 1, 3, &tpl).unwrap().test_iter().collect::<Result<_>>().unwrap()
    }

    #[test]
    fn ground_truth_scores_zero() {
        let r = evaluate_with(&test_set(), EmdMode::Auto, |seq, f, _| Ok(seq.frames[f].clone())).unwrap();
        for m in r.frames.iter().chain([&r.average()]) {
            assert_eq!(m.cd, 0.0);
            assert_eq!(m.emd, Some(0.0));
        }
    }

    #[test]
    fn average_row_is_the_mean() {
        let r = copy_frame0_baseline(&test_set(), EmdMode::Auto).unwrap();
        let csv = r.to_csv();
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert_eq!(csv.lines().next(), Some("frame,CD,EMD"));
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3][0], "Average");
        for col in 1..3 {
            let v: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
            assert_eq!(v[3], (v[0] + v[1] + v[2]) / 3.0);
        }
        // moving scenes drift further from frame 0 as t grows
        assert!(r.frames[0].cd < r.frames[2].cd);
    }

    #[test]
    fn emd_can_be_skipped() {
        let r = copy_frame0_baseline(&test_set(), EmdMode::Off).unwrap();
        assert!(r.frames.iter().all(|m| m.emd.is_none()));
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(','));
    }
}
