//! Central finite differences as an independent check on analytic
//! gradients. Everything here runs in `f64`.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// `max_i |analytic_i - central_i| / max(|central_i|, 1e-12)`.
    pub max_rel: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub excluded: usize,
}

/// Largest relative discrepancy between `analytic` and central differences
/// of `f` around `x`.
pub fn finite_diff_check(
    f: impl Fn(&Tensor<f64>) -> f64,
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> f64 {
    finite_diff_check_excluding(f, analytic, x, h, &[]).max_rel
}

/// Like [`finite_diff_check`] but skips the listed coordinates, typically
/// points where `f` is not differentiable (see [`kink_coordinates`]).
pub fn finite_diff_check_excluding(
    f: impl Fn(&Tensor<f64>) -> f64,
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    h: f64,
    excluded: &[usize],
) -> FdReport {
    assert_eq!(analytic.shape(), x.shape(), "gradient shape must match the point");
    let mut probe = x.clone();
    let mut report = FdReport {
        max_rel: 0.0,
        worst_index: None,
        checked: 0,
        excluded: 0,
    };
    for i in 0..x.len() {
        if excluded.contains(&i) {
            report.excluded += 1;
            continue;
        }
        let central = central_difference(&f, &mut probe, i, h);
        let rel = (analytic[i] - central).abs() / central.abs().max(1e-12);
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel {
            report.max_rel = rel;
            report.worst_index = Some(i);
        }
    }
    report
}

fn central_difference(
    f: &impl Fn(&Tensor<f64>) -> f64,
    probe: &mut Tensor<f64>,
    i: usize,
    h: f64,
) -> f64 {
    let orig = probe[i];
    probe.data_mut()[i] = orig + h;
    let up = f(probe);
    probe.data_mut()[i] = orig - h;
    let down = f(probe);
    probe.data_mut()[i] = orig;
    (up - down) / (2.0 * h)
}

/// Coordinates where `f` has a kink within `h` of `x`.
///
/// The second difference `f(x+h) - 2f(x) + f(x-h)` shrinks as `h²` where `f`
/// is smooth but only as `h` across a slope discontinuity. A coordinate is
/// flagged when halving the step does not quarter the second difference
/// (within `ratio_tol`), ignoring differences below the rounding noise.
pub fn kink_coordinates(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
    ratio_tol: f64,
) -> Vec<usize> {
    let f0 = f(x);
    let noise = 64.0 * f64::EPSILON * (1.0 + f0.abs());
    let mut probe = x.clone();
    let mut second_diff = |i: usize, step: f64| {
        let orig = probe[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        up - 2.0 * f0 + down
    };
    let mut kinks = Vec::new();
    for i in 0..x.len() {
        let d1 = second_diff(i, h);
        if d1.abs() <= noise {
            continue;
        }
        let d2 = second_diff(i, h / 2.0);
        if (d2 / d1 - 0.25).abs() > ratio_tol {
            kinks.push(i);
        }
    }
    kinks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let w = [2.0, -0.5, 3.0];
        let f = |t: &Tensor<f64>| t.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + 1.0;
        let grad = Tensor::new(vec![3], w.to_vec()).unwrap();
        assert!(finite_diff_check(f, &grad, &x, 1e-5) < 1e-9);
    }

    #[test]
    fn square_at_one() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let grad = Tensor::new(vec![1], vec![2.0]).unwrap();
        assert!(finite_diff_check(|t| t[0] * t[0], &grad, &x, 1e-5) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let grad = Tensor::new(vec![1], vec![2.1]).unwrap();
        assert!(finite_diff_check(|t| t[0] * t[0], &grad, &x, 1e-5) > 1e-2);
    }

    #[test]
    fn hinge_kink_is_detected_and_excluded() {
        let c = 0.5;
        let hinge = |t: &Tensor<f64>| t.data().iter().map(|&v| (v - c).max(0.0).powi(2) + (v - c).max(0.0)).sum::<f64>();
        let x = Tensor::new(vec![2], vec![c, 1.5]).unwrap();
        let kinks = kink_coordinates(hinge, &x, 1e-5, 0.1);
        assert_eq!(kinks, vec![0]);
        // Analytic derivative at the kink is taken from the left (0); the
        // central difference would say 0.5.
        let grad = Tensor::new(vec![2], vec![0.0, 2.0 * 1.0 + 1.0]).unwrap();
        let report = finite_diff_check_excluding(hinge, &grad, &x, 1e-5, &kinks);
        assert_eq!(report.excluded, 1);
        assert!(report.max_rel < 1e-8);
    }
}
