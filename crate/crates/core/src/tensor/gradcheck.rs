//! Finite-difference gradient checking against the analytic backwards.

use super::scalar::Scalar;
use super::store::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entry: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Compare the gradient currently stored for `entry` against central finite
/// differences of `f` over the given coordinates.
///
/// `f` must be a deterministic scalar function of the store; this is verified
/// by evaluating it twice at the base point. The step is scaled per
/// coordinate by max(1, |value|). The caller is expected to have populated
/// the store's gradient buffers with the analytic gradient beforehand.
pub fn finite_diff_check<S: Scalar>(
    store: &mut ParameterStore<S>,
    entry: &str,
    coords: &[usize],
    h: f64,
    floor: f64,
    f: impl Fn(&ParameterStore<S>) -> S,
) -> Result<FdReport> {
    if !store.contains(entry) {
        return Err(Error::UnknownParam(entry.to_string()));
    }
    let base0 = f(store).to_f64_s();
    let base1 = f(store).to_f64_s();
    if base0.to_bits() != base1.to_bits() {
        return Err(Error::Check(format!(
            "function is non-deterministic: {base0} vs {base1}"
        )));
    }

    let analytic = store.grad(entry).to_f64_vec();
    let mut report = FdReport {
        entry: entry.to_string(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
        checked: 0,
    };
    for &i in coords {
        let orig = store.value(entry).data()[i];
        let step = super::scalar::sc::<S>(h * orig.to_f64_s().abs().max(1.0));
        store.value_mut(entry).data_mut()[i] = orig + step;
        let lp = f(store).to_f64_s();
        store.value_mut(entry).data_mut()[i] = orig - step;
        let lm = f(store).to_f64_s();
        store.value_mut(entry).data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * step.to_f64_s());
        let a = analytic[i];
        let rel = rel_err(a, fd, floor);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_fd = fd;
        }
    }
    Ok(report)
}

/// Evenly spread sample of up to `max` coordinate indices out of `len`.
pub fn sample_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_function_has_all_ones_gradient() {
        let mut store = ParameterStore::<f64>::new();
        store.register("v", Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap(), 1.0);
        store.add_grad("v", &[1.0, 1.0, 1.0, 1.0]);
        let report = finite_diff_check(&mut store, "v", &[0, 1, 2, 3], 1e-4, 1e-9, |s| {
            s.slice("v").iter().sum::<f64>()
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-10, "{report:?}");
    }

    #[test]
    fn squared_norm_gradient_is_2v() {
        let vals = [0.7, -0.4, 1.3];
        let mut store = ParameterStore::<f64>::new();
        store.register("v", Tensor::new(vec![3], vals.to_vec()).unwrap(), 1.0);
        let analytic: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        store.add_grad("v", &analytic);
        let report = finite_diff_check(&mut store, "v", &[0, 1, 2], 1e-4, 1e-9, |s| {
            s.slice("v").iter().map(|v| v * v).sum::<f64>()
        })
        .unwrap();
        // quadratics are exact under central differences
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let mut store = ParameterStore::<f64>::new();
        store.register("v", Tensor::scalar(1.0), 1.0);
        let counter = AtomicU64::new(0);
        let err = finite_diff_check(&mut store, "v", &[0], 1e-4, 1e-9, |_| {
            counter.fetch_add(1, Ordering::SeqCst) as f64
        })
        .unwrap_err();
        assert!(err.to_string().contains("non-deterministic"));
    }
}
