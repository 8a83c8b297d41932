//! Central-difference gradient checking for recorded scalar functions.

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1e-6, |analytic| + |numeric|)` seen.
    pub max_rel_error: f64,
    /// (parameter index, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compare the tape gradient of `f` against central differences.
///
/// `f` receives a fresh graph and one parameter leaf per entry of `params` and
/// must return a scalar. At most `max_coords` coordinates per parameter are
/// probed, spread evenly over the tensor.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: f64, tol: f64, max_coords: usize) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(config_err!("finite-difference step {eps} outside [1e-4, 1e-2]"));
    }
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("grad_check function returned shape {:?}", v.shape())));
        }
        let y = v.data()[0].as_f64();
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite function value during grad_check".into()));
        }
        Ok(y)
    };

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0, tol };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let analytic = grads.raw(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); n]);
        let step = (n / max_coords.max(1)).max(1);
        for idx in (0..n).step_by(step).take(max_coords.max(1)) {
            let orig = probe[pi].data()[idx];
            probe[pi].data_mut()[idx] = T::lit(orig.as_f64() + eps);
            let plus = eval(&probe)?;
            probe[pi].data_mut()[idx] = T::lit(orig.as_f64() - eps);
            let minus = eval(&probe)?;
            probe[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx].as_f64();
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at parameter {pi}[{idx}]")));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            report.coordinates += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, idx, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let theta = Tensor::<f64>::scalar(3.0);
        let f = |g: &Graph<f64>, v: &[Var]| Ok(g.sum(g.mul(v[0], v[0])?));
        let r = grad_check(f, &[theta.clone()], 1e-3, 1e-6, 1).unwrap();
        let (_, _, a, n) = r.worst.unwrap();
        assert_eq!(a, 6.0);
        assert!((n - 6.0).abs() < 1e-6);
        assert!(r.passed());
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let theta = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let f = |g: &Graph<f64>, _: &[Var]| Ok(g.input(Tensor::scalar(4.0)));
        let r = grad_check(f, &[theta], 1e-3, 1e-6, 2).unwrap();
        let (_, _, a, n) = r.worst.unwrap();
        assert_eq!((a, n), (0.0, 0.0));
        assert!(r.passed());
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let f = |g: &Graph<f64>, v: &[Var]| Ok(g.sum(v[0]));
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.5, 1e-3, 1).is_err());
    }
}
