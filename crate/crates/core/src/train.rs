//! Optimizer and training loop.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::losses::{pyramid_gt, total_loss, LossWeights};
use crate::model::FastPci;
use crate::params::{ParamStore, Session};
use crate::refine::FusionWeights;
use crate::synth::{dataset, Dataset, SceneTemplate, Sequence};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates per parameter, in store order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        AdamState {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`p -= lr * wd * p`). Parameters without a gradient still decay.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Argument(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {}",
            store.iter().nth(i).map_or("?", |p| p.name.as_str())
        )));
    }
    state.step += 1;
    let c1 = 1.0 - h.beta1.powi(state.step as i32);
    let c2 = 1.0 - h.beta2.powi(state.step as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.values.iter_mut().enumerate() {
            let g = grads[i].as_ref().map_or(0.0, |g| g[j].as_f64());
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + h.eps);
            let xv = x.as_f64();
            *x = T::cast_from(xv - h.lr * update - h.lr * h.weight_decay * xv);
        }
    }
    Ok(())
}

/// `lr0 * 0.5^floor(epoch / period)`.
pub fn lr_at(lr0: f64, period: usize, epoch: usize) -> f64 {
    if period == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((epoch / period) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TSampling {
    /// Uniform over {0.25, 0.5, 0.75}.
    Discrete,
    /// Uniform over (0, 1), with the ground truth taken from the nearest stored frame.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_halving_period_epochs: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub t_sampling: TSampling,
    /// Also write a checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 4,
            lr_halving_period_epochs: 80,
            epochs: 1,
            max_steps: None,
            seed: 0,
            t_sampling: TSampling::Discrete,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "need lr > 0, weight_decay >= 0 and batch_size >= 1 (got {}, {}, {})",
                self.lr, self.weight_decay, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub scene: SceneTemplate,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_train: 64,
            n_test: 16,
            scene: SceneTemplate::default(),
        }
    }
}

impl DataConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        dataset(self.seed, self.n_train, self.n_test, &self.scene)
    }
}

/// Everything a run needs; this is the JSON accepted by `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.data.scene.points != self.model.points {
            return Err(Error::Config(format!(
                "data.scene.points = {} but model.points = {}",
                self.data.scene.points, self.model.points
            )));
        }
        self.data.scene.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}: {e}", e.line())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One optimizer step of the loss curve (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub intp: f64,
    pub cd1: f64,
    pub cd2: f64,
    pub ms: f64,
}

pub const CURVE_HEADER: &str = "epoch,step,lr,total,intp,cd1,cd2,ms";

pub fn write_curve(path: impl AsRef<Path>, curve: &[CurveRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.total, r.intp, r.cd1, r.cd2, r.ms
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Ground truth for time `t`: the stored frame nearest to `t`.
pub fn target_frame(seq: &Sequence, t: f64) -> &crate::PointCloud {
    let i = seq
        .times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| i)
        .expect("five frames");
    &seq.frames[i]
}

/// Per-sample loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub intp: f64,
    pub cd1: f64,
    pub cd2: f64,
    pub ms: f64,
}

/// Loss and parameter gradients for one training sample.
pub fn sample_gradients<T: Real>(
    model: &FastPci,
    store: &ParamStore<T>,
    seq: &Sequence,
    t: f64,
    fusion_seed: u64,
    weights: &LossWeights,
) -> Result<(SampleLoss, Vec<Option<Vec<T>>>)> {
    let gt = target_frame(seq, t);
    let level_gt = pyramid_gt(gt, &model.config().level_sizes())?;
    let mut s = Session::train(store);
    let out = model.forward(&mut s, &seq.frames[0], &seq.frames[4], t, fusion_seed, FusionWeights::Learned)?;
    let terms = total_loss(&mut s.g, &out.loss_inputs(), gt, &level_gt, weights)?;
    let loss = SampleLoss {
        total: s.g.scalar(terms.total).as_f64(),
        intp: terms.intp,
        cd1: terms.cd1,
        cd2: terms.cd2,
        ms: terms.ms,
    };
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (seed {}, t {t}): total {} intp {} cd1 {} cd2 {} ms {}",
            seq.seed, loss.total, loss.intp, loss.cd1, loss.cd2, loss.ms
        )));
    }
    s.g.backward(terms.total)?;
    Ok((loss, s.param_grads()))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: FastPci,
    pub store: ParamStore<T>,
    pub curve: Vec<CurveRow>,
    pub steps: usize,
}

/// Called after every epoch with `(epoch, store)`.
pub type EpochHook<'a, T> = dyn FnMut(usize, &ParamStore<T>) -> Result<()> + 'a;

/// Trains a freshly initialized model on `train`.
///
/// Samples of a minibatch run in parallel; gradients are summed in sample
/// order, so results do not depend on scheduling.
pub fn train<T: Real>(cfg: &RunConfig, train_set: &[Sequence], on_epoch: Option<&mut EpochHook<'_, T>>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let tc = &cfg.train;
    let mut store = ParamStore::<T>::new();
    let model = FastPci::new(&mut store, &cfg.model, tc.seed)?;
    let mut state = AdamState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x005e_ed0f_7a11);
    let mut curve = Vec::new();
    let mut steps = 0;
    let mut hook = on_epoch;
    'epochs: for epoch in 0..tc.epochs {
        let lr = lr_at(tc.lr, tc.lr_halving_period_epochs, epoch);
        let hyper = AdamHyper::new(lr, tc.weight_decay);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let jobs: Vec<(usize, f64, u64)> = batch
                .iter()
                .map(|&i| {
                    let t = match tc.t_sampling {
                        TSampling::Discrete => [0.25, 0.5, 0.75][rng.random_range(0..3)],
                        TSampling::Continuous => rng.random_range(0.01..0.99),
                    };
                    (i, t, rng.random())
                })
                .collect();
            let results: Vec<Result<(SampleLoss, Vec<Option<Vec<T>>>)>> = jobs
                .par_iter()
                .map(|&(i, t, fs)| sample_gradients(&model, &store, &train_set[i], t, fs, &cfg.loss))
                .collect();
            let n = results.len() as f64;
            let mut sum = vec![None::<Vec<f64>>; store.len()];
            let mut mean = SampleLoss::default();
            for r in results {
                let (loss, grads) = r?;
                mean.total += loss.total / n;
                mean.intp += loss.intp / n;
                mean.cd1 += loss.cd1 / n;
                mean.cd2 += loss.cd2 / n;
                mean.ms += loss.ms / n;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                        for (a, x) in acc.iter_mut().zip(g) {
                            *a += x.as_f64();
                        }
                    }
                }
            }
            let grads: Vec<Option<Vec<T>>> = sum
                .into_iter()
                .map(|g| g.map(|g| g.into_iter().map(|x| T::cast_from(x / n)).collect()))
                .collect();
            adam_step(&mut store, &grads, &mut state, &hyper)?;
            steps += 1;
            curve.push(CurveRow {
                epoch,
                step: steps,
                lr,
                total: mean.total,
                intp: mean.intp,
                cd1: mean.cd1,
                cd2: mean.cd2,
                ms: mean.ms,
            });
            log::debug!("epoch {epoch} step {steps} loss {:.6}", mean.total);
        }
        if let Some(h) = hook.as_mut() {
            h(epoch, &store)?;
        }
    }
    Ok(TrainOutcome {
        model,
        store,
        curve,
        steps,
    })
}

/// Writes `loss_curve.csv` for a finished run into `dir`.
pub fn write_run_files(dir: impl AsRef<Path>, cfg: &RunConfig, curve: &[CurveRow]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_curve(dir.join("loss_curve.csv"), curve)?;
    let path = dir.join("config.json");
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(serde_json::to_string_pretty(cfg).expect("config serializes").as_bytes())
        .map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", &[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = s.clone();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(vec![0.0; 3])], &mut st, &AdamHyper::new(1e-3, 0.0)).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", &[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(vec![1.0])], &mut st, &AdamHyper::new(1e-3, 0.0)).unwrap();
        assert!((s.iter().next().unwrap().values[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", &[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&s);
        let mut prev = 1.0;
        for _ in 0..10 {
            let x = s.get(id).values[0];
            adam_step(&mut s, &[Some(vec![2.0 * x])], &mut st, &AdamHyper::new(0.05, 0.0)).unwrap();
            let f = s.get(id).values[0].powi(2);
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn adam_rejects_nan() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", &[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &[Some(vec![f32::NAN])], &mut st, &AdamHyper::new(1e-3, 0.0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn halving_schedule() {
        for (e, want) in [(0, 1e-3), (79, 1e-3), (80, 5e-4), (160, 2.5e-4)] {
            assert_eq!(lr_at(1e-3, 80, e), want);
        }
    }

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny(64);
        cfg.data.scene.points = 64;
        cfg.data.n_train = 4;
        cfg.data.n_test = 2;
        cfg.train.batch_size = 2;
        cfg
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut cfg = tiny_run();
        cfg.train.epochs = 0;
        let data: Vec<_> = cfg.data.dataset().unwrap().train_iter().collect::<Result<_>>().unwrap();
        let out = train::<f32>(&cfg, &data, None).unwrap();
        let mut fresh = ParamStore::<f32>::new();
        FastPci::new(&mut fresh, &cfg.model, cfg.train.seed).unwrap();
        assert_eq!(out.store, fresh);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let mut cfg = tiny_run();
        cfg.train.epochs = 2;
        let data: Vec<_> = cfg.data.dataset().unwrap().train_iter().collect::<Result<_>>().unwrap();
        let mut epochs_seen = Vec::new();
        let mut hook = |e: usize, _: &ParamStore<f32>| {
            epochs_seen.push(e);
            Ok(())
        };
        let a = train::<f32>(&cfg, &data, Some(&mut hook)).unwrap();
        let b = train::<f32>(&cfg, &data, None).unwrap();
        assert_eq!(epochs_seen, vec![0, 1]);
        assert_eq!(a.curve.len(), 4);
        assert_eq!(a.store, b.store);
        assert_eq!(a.curve, b.curve);
        cfg.train.max_steps = Some(3);
        assert_eq!(train::<f32>(&cfg, &data, None).unwrap().steps, 3);
    }

    #[test]
    fn run_config_json() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "loss": {"ms": false}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.loss.ms);
        assert!(RunConfig::from_json(r#"{"model": {"points": 512}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0}}"#).is_err());
    }
}
