//! Central-difference verification of reverse-mode gradients.

use super::{Graph, Real, Result, TensorError, Var};

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the autodiff gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// single-element tensor. Returns the largest relative error over all
/// elements of `x`.
pub fn grad_check<T, E, F>(shape: &[usize], x: &[T], eps: f64, f: F) -> Result<f64, E>
where
    T: Real,
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, E>,
{
    grad_check_many(&[(shape, x)], eps, |g, vars| f(g, vars[0]))
}

/// Multi-input variant of [`grad_check`]; every input is perturbed in turn.
pub fn grad_check_many<T, E, F>(inputs: &[(&[usize], &[T])], eps: f64, f: F) -> Result<f64, E>
where
    T: Real,
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let eval = |vals: &[Vec<T>], with_grad: bool| -> Result<(f64, Vec<Option<Vec<T>>>), E> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| g.leaf(shape, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let y = g.scalar(out).as_f64();
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        let mut grads = Vec::new();
        if with_grad {
            g.backward(out)?;
            grads = vars.iter().map(|&v| g.grad(v).map(<[T]>::to_vec)).collect();
        }
        Ok((y, grads))
    };

    let base: Vec<Vec<T>> = inputs.iter().map(|(_, v)| v.to_vec()).collect();
    let (_, grads) = eval(&base, true)?;
    let mut worst = 0.0f64;
    for (i, (_, x)) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i][j] = T::cast_from(x[j].as_f64() + eps);
            minus[i][j] = T::cast_from(x[j].as_f64() - eps);
            let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * eps);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[j].as_f64());
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = [0.1, -0.2, 0.3];
        let err = grad_check(&[3], &x, 1e-5, |g, _| g.constant(&[1], vec![4.0f64])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn square_sum_is_tight() {
        let x = [0.3, -1.2, 2.5, 0.7, -0.1, 1.9, -2.2, 0.05];
        let err = grad_check(&[8], &x, 1e-5, |g, v| {
            let s = g.square(v)?;
            g.reduce_sum(s)
        })
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = [-1.0f64];
        let r = grad_check(&[1], &x, 1e-5, |g, v| {
            let s = g.sqrt(v)?;
            g.reduce_sum(s)
        });
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
