//! Seeded synthetic scenes of rigidly moving objects over a static ground
//! plane.
//!
//! Points are ordered by object and then by generation index, identically
//! in every frame, so index `i` is the same physical point throughout a
//! sequence.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud, SceneFlow};
use crate::error::{io_err, Error, Result};
use crate::io::write_cloud;
use crate::Direction;

/// Times of the stored frames within the interval.
pub const FRAME_TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Surface of an axis-aligned cube with half-side `size`.
    Box,
    /// Surface of a sphere of radius `size`.
    Sphere,
    /// Square `[-size, size]^2` in the `z = 0` plane around `center`.
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub center: Point,
    pub size: f64,
    /// Displacement over one frame interval.
    pub velocity: Point,
    /// Axis-angle rotation (radians) over one frame interval, about `center`.
    pub rotation: Point,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// Standard deviation of per-coordinate Gaussian noise, meters.
    pub noise: f64,
}

impl SceneSpec {
    pub fn total_points(&self) -> usize {
        self.objects.iter().map(|o| o.points).sum()
    }
}

/// Distribution that random scenes are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneTemplate {
    pub points: usize,
    pub num_objects: usize,
    /// Half side of the ground plane.
    pub extent: f64,
    /// Share of points on the ground plane.
    pub plane_fraction: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Object speed is drawn from `[0.2, 1] * max_speed`.
    pub max_speed: f64,
    pub max_rotation_deg: f64,
    pub noise: f64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        SceneTemplate {
            points: 1024,
            num_objects: 4,
            extent: 5.0,
            plane_fraction: 0.4,
            min_size: 0.5,
            max_size: 1.0,
            max_speed: 1.0,
            max_rotation_deg: 30.0,
            noise: 0.005,
        }
    }
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        let ok = self.points > self.num_objects
            && self.extent > 0.0
            && (0.0..1.0).contains(&self.plane_fraction)
            && self.min_size > 0.0
            && self.max_size >= self.min_size
            && self.max_speed >= 0.0
            && self.max_rotation_deg >= 0.0
            && self.noise >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid scene template {self:?}")));
        }
        let diameter = 2.0 * self.extent * 2f64.sqrt();
        if self.max_speed > 0.5 * diameter {
            return Err(Error::Config(format!(
                "max_speed {} exceeds half the scene diameter {}",
                self.max_speed,
                0.5 * diameter
            )));
        }
        Ok(())
    }

    /// Draws a scene; the same seed always gives the same scene.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane_pts = if self.num_objects == 0 {
            self.points
        } else {
            (self.plane_fraction * self.points as f64).round() as usize
        };
        let mut objects = vec![ObjectSpec {
            kind: ShapeKind::Plane,
            center: [0.0; 3],
            size: self.extent,
            velocity: [0.0; 3],
            rotation: [0.0; 3],
            points: plane_pts,
        }];
        let rest = self.points - plane_pts;
        let margin = (self.extent - self.max_size).max(0.0);
        for i in 0..self.num_objects {
            let size = rng.random_range(self.min_size..=self.max_size);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = self.max_speed * rng.random_range(0.2..=1.0);
            let axis = unit(&mut rng);
            let angle = self.max_rotation_deg.to_radians() * rng.random_range(0.0..=1.0);
            let kind = if rng.random_bool(0.5) { ShapeKind::Box } else { ShapeKind::Sphere };
            objects.push(ObjectSpec {
                kind,
                center: [rng.random_range(-margin..=margin), rng.random_range(-margin..=margin), size],
                size,
                velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
                rotation: [axis[0] * angle, axis[1] * angle, axis[2] * angle],
                points: rest / self.num_objects + usize::from(i < rest % self.num_objects),
            });
        }
        Ok(SceneSpec {
            seed,
            objects,
            noise: self.noise,
        })
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rodrigues rotation of `p` by the axis-angle vector `w`.
pub fn rotate(p: Point, w: Point) -> Point {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if theta == 0.0 {
        return p;
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let (s, c) = theta.sin_cos();
    let kxp = [k[1] * p[2] - k[2] * p[1], k[2] * p[0] - k[0] * p[2], k[0] * p[1] - k[1] * p[0]];
    let kdp = k[0] * p[0] + k[1] * p[1] + k[2] * p[2];
    [
        p[0] * c + kxp[0] * s + k[0] * kdp * (1.0 - c),
        p[1] * c + kxp[1] * s + k[1] * kdp * (1.0 - c),
        p[2] * c + kxp[2] * s + k[2] * kdp * (1.0 - c),
    ]
}

impl ObjectSpec {
    /// Position at time `t` of a point given relative to the object center at `t = 0`.
    pub fn transform(&self, local: Point, t: f64) -> Point {
        let w = [t * self.rotation[0], t * self.rotation[1], t * self.rotation[2]];
        let r = rotate(local, w);
        [
            self.center[0] + t * self.velocity[0] + r[0],
            self.center[1] + t * self.velocity[1] + r[1],
            self.center[2] + t * self.velocity[2] + r[2],
        ]
    }

    fn surface_point(&self, rng: &mut ChaCha8Rng) -> Point {
        let s = self.size;
        match self.kind {
            ShapeKind::Plane => [rng.random_range(-s..=s), rng.random_range(-s..=s), 0.0],
            ShapeKind::Sphere => {
                let u = unit(rng);
                [s * u[0], s * u[1], s * u[2]]
            }
            ShapeKind::Box => {
                let face = rng.random_range(0..6);
                let (axis, sign) = (face / 2, if face % 2 == 0 { -s } else { s });
                let mut p = [rng.random_range(-s..=s), rng.random_range(-s..=s), rng.random_range(-s..=s)];
                p[axis] = sign;
                p
            }
        }
    }
}

/// Frames at [`FRAME_TIMES`] plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub seed: u64,
    pub times: [f64; 5],
    /// Noisy observations.
    pub frames: Vec<PointCloud>,
    /// The same frames before noise.
    pub clean: Vec<PointCloud>,
    /// Noise-free displacement from frame 0 to frame 1.
    pub flow: SceneFlow,
    /// Object index of every point (0 is the first object of the scene).
    pub labels: Vec<usize>,
}

impl Sequence {
    pub fn frame_at(&self, t: f64) -> Option<&PointCloud> {
        self.times.iter().position(|&x| x == t).map(|i| &self.frames[i])
    }
}

pub fn generate(spec: &SceneSpec) -> Result<Sequence> {
    if spec.total_points() == 0 {
        return Err(Error::Argument("scene has no points".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Argument(format!("noise sigma {} must be >= 0", spec.noise)));
    }
    let finite = |p: &Point| p.iter().all(|v| v.is_finite());
    if spec.objects.iter().any(|o| !finite(&o.center) || !finite(&o.velocity) || !finite(&o.rotation) || !o.size.is_finite()) {
        return Err(Error::Argument("object parameters must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut local = Vec::with_capacity(spec.total_points());
    let mut labels = Vec::with_capacity(spec.total_points());
    for (id, obj) in spec.objects.iter().enumerate() {
        for _ in 0..obj.points {
            local.push(obj.surface_point(&mut rng));
            labels.push(id);
        }
    }
    let clean: Vec<PointCloud> = FRAME_TIMES
        .iter()
        .map(|&t| {
            PointCloud::new(
                local
                    .iter()
                    .zip(&labels)
                    .map(|(&p, &id)| spec.objects[id].transform(p, t))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Argument(e.to_string()))?;
    let frames = clean
        .iter()
        .map(|pc| {
            PointCloud::new(
                pc.points
                    .iter()
                    .map(|p| {
                        if spec.noise == 0.0 {
                            *p
                        } else {
                            [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng), p[2] + noise.sample(&mut rng)]
                        }
                    })
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let flow = clean[0]
        .points
        .iter()
        .zip(&clean[4].points)
        .map(|(a, b)| [b[0] - a[0], b[1] - a[1], b[2] - a[2]])
        .collect();
    Ok(Sequence {
        seed: spec.seed,
        times: FRAME_TIMES,
        frames,
        clean,
        flow: SceneFlow::new(flow, Direction::Forward)?,
        labels,
    })
}

/// Seeds of a train/test split. Train seeds live in the lower half of the
/// 32-bit index range under `seed`, test seeds in the upper half.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub template: SceneTemplate,
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

const TEST_OFFSET: u64 = 1 << 31;

pub fn dataset(seed: u64, n_train: usize, n_test: usize, template: &SceneTemplate) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 || n_train as u64 > TEST_OFFSET || n_test as u64 > TEST_OFFSET {
        return Err(Error::Argument(format!(
            "split sizes must be in 1..={TEST_OFFSET}, got {n_train} and {n_test}"
        )));
    }
    template.validate()?;
    let base = (seed & 0xffff_ffff) << 32;
    Ok(Dataset {
        template: template.clone(),
        train: (0..n_train as u64).map(|i| base | i).collect(),
        test: (0..n_test as u64).map(|i| base | TEST_OFFSET | i).collect(),
    })
}

impl Dataset {
    pub fn sequence(&self, seed: u64) -> Result<Sequence> {
        generate(&self.template.sample(seed)?)
    }

    pub fn train_iter(&self) -> impl Iterator<Item = Result<Sequence>> + '_ {
        self.train.iter().map(|&s| self.sequence(s))
    }

    pub fn test_iter(&self) -> impl Iterator<Item = Result<Sequence>> + '_ {
        self.test.iter().map(|&s| self.sequence(s))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub seed: u64,
    pub spec: SceneSpec,
    pub times: Vec<f64>,
    pub frames: Vec<String>,
    pub flow: String,
}

/// Writes `frame_<i>.xyz` per time, `flow.xyz` and `manifest.json` into `dir`.
pub fn write_sequence(dir: impl AsRef<Path>, spec: &SceneSpec, seq: &Sequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut frames = Vec::new();
    for (i, f) in seq.frames.iter().enumerate() {
        let name = format!("frame_{i}.xyz");
        write_cloud(dir.join(&name), f)?;
        frames.push(name);
    }
    let flow = PointCloud {
        points: seq.flow.vectors.clone(),
        features: None,
    };
    write_cloud(dir.join("flow.xyz"), &flow)?;
    let manifest = SequenceManifest {
        seed: seq.seed,
        spec: spec.clone(),
        times: seq.times.to_vec(),
        frames,
        flow: "flow.xyz".into(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Reads a directory written by [`write_sequence`].
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<(SceneSpec, Sequence)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: SequenceManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        line: Some(e.line()),
        msg: e.to_string(),
    })?;
    let times: [f64; 5] = m.times.as_slice().try_into().map_err(|_| Error::Format {
        path: path.clone(),
        offset: 0,
        line: None,
        msg: format!("expected 5 frame times, found {}", m.times.len()),
    })?;
    let frames = m.frames.iter().map(|f| crate::io::read_cloud(dir.join(f))).collect::<Result<Vec<_>>>()?;
    let flow = crate::io::read_cloud(dir.join(&m.flow))?;
    let clean = generate(&m.spec)?.clean;
    let labels = m.spec.objects.iter().enumerate().flat_map(|(i, o)| std::iter::repeat_n(i, o.points)).collect();
    Ok((
        m.spec,
        Sequence {
            seed: m.seed,
            times,
            frames,
            clean,
            flow: SceneFlow::new(flow.points, Direction::Forward)?,
            labels,
        },
    ))
}
