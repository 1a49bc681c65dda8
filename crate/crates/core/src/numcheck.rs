//! Finite-difference gradient checking.
//!
//! Uses the fourth-order central stencil
//! `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, which only calls the
//! loss function and never touches the backward pass it checks.

use crate::nn::Module;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Denominator floor for the relative error; below this gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central difference of a scalar function at one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let fm2 = f(x - 2.0 * h);
    let fm1 = f(x - h);
    let fp1 = f(x + h);
    let fp2 = f(x + 2.0 * h);
    (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h)
}

/// Compares the gradients already stored in `model`'s parameters against
/// finite differences of `loss`. `filter` selects parameter names to check.
pub fn check_module<M: Module>(
    model: &mut M,
    loss: impl Fn(&M) -> f64,
    filter: impl Fn(&str) -> bool,
    h: f64,
) -> GradCheck {
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.iter().cloned().collect()))
        .collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        for (j, &a) in grads.iter().enumerate() {
            let original = nth_value(model, pi, j);
            let numeric = central_difference(
                |v| {
                    set_nth_value(model, pi, j, v);
                    loss(model)
                },
                original,
                h,
            );
            set_nth_value(model, pi, j, original);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.checked == 1 || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn nth_value<M: Module>(model: &M, param: usize, idx: usize) -> f64 {
    let ps = model.params();
    ps[param].1.value.as_slice().expect("standard layout")[idx]
}

fn set_nth_value<M: Module>(model: &mut M, param: usize, idx: usize, v: f64) {
    let mut ps = model.params_mut();
    ps[param].1.value.as_slice_mut().expect("standard layout")[idx] = v;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_is_exact_for_quartics() {
        let d = central_difference(|x| x.powi(4) - 2.0 * x.powi(3) + x, 1.5, 1e-2);
        let exact = 4.0 * 1.5f64.powi(3) - 6.0 * 1.5f64.powi(2) + 1.0;
        assert!((d - exact).abs() < 1e-10);
    }
}
