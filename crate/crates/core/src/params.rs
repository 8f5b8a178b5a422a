//! Named learnable parameters and their binding into a graph.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

pub(crate) fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<ParamId> {
        if !valid_name(name) {
            return Err(Error::Argument(format!(
                "parameter name {name:?} must be nonempty and use only [a-zA-Z0-9._]"
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name {name:?}")));
        }
        if shape.iter().product::<usize>() != values.len() || shape.contains(&0) {
            return Err(Error::Argument(format!(
                "parameter {name:?}: shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Scalar count per top-level name segment (`"pyramid.stage1.wq"` counts under `"pyramid"`).
    pub fn count_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let key: String = p.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.values.len(),
                None => out.push((key, p.values.len())),
            }
        }
        out
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|v| U::cast_from(v.as_f64())).collect(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: shape {:?} does not match model shape {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            for (d, s) in p.values.iter_mut().zip(&src.values) {
                *d = T::cast_from(s.as_f64());
            }
        }
        Ok(())
    }
}

/// Graph plus lazily bound parameters for one forward/backward pass.
pub struct Session<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Session<'a, T> {
    /// Parameters enter the graph as gradient-receiving leaves.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters enter the graph as constants; no gradients are tracked.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Session {
            trainable: false,
            ..Self::train(store)
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.trainable {
            self.g.leaf(&p.shape, p.values.clone())
        } else {
            self.g.constant(&p.shape, p.values.clone())
        }
        .expect("stored parameters have valid shapes");
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient per parameter (in store order); `None` when unused.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

/// Largest relative error between autodiff and central-difference gradients
/// of `f` with respect to every scalar in `store`.
///
/// `f` builds a scalar from a fresh session; it is evaluated twice per scalar.
pub fn param_grad_check<F>(store: &ParamStore<f64>, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = Session::train(store);
    let out = f(&mut s)?;
    s.g.backward(out)?;
    let grads = s.param_grads();
    let eval = |st: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::inference(st);
        let out = f(&mut s)?;
        let y = s.g.scalar(out);
        if !y.is_finite() {
            return Err(Error::Numeric(format!("non-finite value {y} during gradient check")));
        }
        Ok(y)
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        for j in 0..store.params[i].values.len() {
            let x = store.params[i].values[j];
            work.params[i].values[j] = x + eps;
            let plus = eval(&work)?;
            work.params[i].values[j] = x - eps;
            let minus = eval(&work)?;
            work.params[i].values[j] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad.as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max(crate::tensor::relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, T> {
        let prefix = self.full(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| T::cast_from(self.rng.random_range(-bound..=bound)))
            .collect();
        let full = self.full(name);
        self.store.add(&full, shape, values)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let full = self.full(name);
        self.store.add(&full, shape, vec![T::cast_from(value); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_validated() {
        let mut s = ParamStore::<f32>::new();
        assert!(s.add("a.b_1", &[1], vec![0.0]).is_ok());
        assert!(s.add("a.b_1", &[1], vec![0.0]).is_err());
        assert!(s.add("a-b", &[1], vec![0.0]).is_err());
        assert!(s.add("", &[1], vec![0.0]).is_err());
        assert!(s.add("x", &[2], vec![0.0]).is_err());
    }

    #[test]
    fn session_binds_each_parameter_once() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let mut sess = Session::train(&s);
        let a = sess.param(id);
        let b = sess.param(id);
        assert_eq!(a, b);
        let y = sess.g.add(a, b).unwrap();
        let l = sess.g.reduce_sum(y).unwrap();
        sess.g.backward(l).unwrap();
        assert_eq!(sess.param_grads()[0].as_deref(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn inference_session_tracks_no_grads() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let mut sess = Session::inference(&s);
        let a = sess.param(id);
        assert!(!sess.g.node(a).requires_grad());
    }

    #[test]
    fn builder_prefixes_and_is_seeded() {
        let build = || {
            let mut s = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut b = ParamBuilder::new(&mut s, &mut rng, "net");
            b.scope("stage1").uniform("wq", &[2, 2], 0.5).unwrap();
            s
        };
        let s = build();
        assert!(s.id("net.stage1.wq").is_some());
        assert_eq!(s, build());
    }
}
