use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is perturbed by `±h` in turn; `f` must be deterministic.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(h);
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - T::lit(h);
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite objective while probing coordinate {i}")));
        }
        grad.push(T::lit((plus - minus) / (2.0 * h)));
    }
    Tensor::new(x.shape(), grad)
}

/// Elementwise relative error `|a − b| / max(|a|, |b|, floor)`, maximized.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
