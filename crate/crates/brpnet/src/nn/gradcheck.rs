//! Central finite-difference utilities for validating analytic gradients.

use super::param::ParamRef;

/// Central difference of a scalar function w.r.t. one parameter component.
/// Restores the parameter before returning.
pub fn central_diff<F: FnMut() -> f64>(param: &ParamRef<f64>, idx: usize, h: f64, f: &mut F) -> f64 {
    let orig = param.borrow().value.data()[idx];
    param.borrow_mut().value.data_mut()[idx] = orig + h;
    let fp = f();
    param.borrow_mut().value.data_mut()[idx] = orig - h;
    let fm = f();
    param.borrow_mut().value.data_mut()[idx] = orig;
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Worst relative error and where it occurred.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub worst: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
}

/// Checks every component of every parameter against central differences.
/// `analytic[i]` must hold a snapshot of params[i].grad after one backward
/// pass; `f` re-evaluates the scalar loss at the current parameter values.
pub fn check_all<F: FnMut() -> f64>(
    params: &[ParamRef<f64>],
    analytic: &[Vec<f64>],
    h: f64,
    f: &mut F,
) -> CheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut report = CheckReport {
        worst: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        fd: 0.0,
    };
    for (pi, (p, grads)) in params.iter().zip(analytic).enumerate() {
        let n = p.borrow().value.numel();
        assert_eq!(n, grads.len());
        for idx in 0..n {
            let fd = central_diff(p, idx, h, f);
            let e = rel_err(grads[idx], fd);
            if e > report.worst {
                report = CheckReport {
                    worst: e,
                    param: pi,
                    index: idx,
                    analytic: grads[idx],
                    fd,
                };
            }
        }
    }
    report
}
