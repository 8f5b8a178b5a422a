//! Per-point layers shared by the network modules.

use crate::error::Result;
use crate::params::{ParamBuilder, ParamId, Session};
use crate::tensor::{Real, Var};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => s.g.relu(x)?,
            Activation::LeakyRelu(slope) => s.g.leaky_relu(x, slope)?,
            Activation::Sigmoid => s.g.sigmoid(x)?,
        })
    }
}

/// `x W (+ b)` applied to every row; equivalent to a kernel-size-1 convolution.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::scaled(pb, name, in_dim, out_dim, bias, 1.0)
    }

    /// Uniform init in `±gain/sqrt(in_dim)`.
    pub fn scaled<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let bound = gain / (in_dim as f64).sqrt();
        let mut scope = pb.scope(name);
        let w = scope.uniform("w", &[in_dim, out_dim], bound)?;
        let b = if bias {
            Some(scope.uniform("b", &[out_dim], bound)?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        Ok(s.g.linear(x, w, b)?)
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
    pub act_last: bool,
}

impl Mlp {
    /// `widths` lists the input width followed by every layer's output width.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, widths: &[usize], act: Activation, act_last: bool) -> Result<Self> {
        let mut scope = pb.scope(name);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut scope, &format!("l{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, act, act_last })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            if i + 1 < n || self.act_last {
                x = self.act.apply(s, x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut scope = pb.scope(name);
        Ok(LayerNorm {
            gamma: scope.filled("gamma", &[dim], 1.0)?,
            beta: scope.filled("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        Ok(s.g.layer_norm(x, gamma, beta, Self::EPS)?)
    }
}

/// Sets every value of the given parameters to zero.
pub fn zero_params<T: Real>(store: &mut crate::params::ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).values.iter_mut().for_each(|v| *v = T::zero());
    }
}
