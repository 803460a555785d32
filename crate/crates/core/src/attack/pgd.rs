use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Step size at iteration `t` of a cosine schedule with warm restarts.
///
/// Within a cycle `t_cur` runs from 0 to `period` inclusive, so the step
/// starts at exactly `alpha_max`, ends at exactly `alpha_min`, and the next
/// iteration restarts at `alpha_max`.
pub fn cosine_wr_step(t: usize, alpha_max: f64, alpha_min: f64, period: usize) -> f64 {
    let period = period.max(1);
    let t_cur = t % (period + 1);
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t_cur as f64 / period as f64).cos());
    alpha_min * (1.0 - w) + alpha_max * w
}

/// Largest `u <= 1 - x` with `x + u <= 1` in f32 arithmetic.
fn headroom(x: f32) -> f32 {
    let mut u = 1.0 - x;
    while u > 0.0 && x + u > 1.0 {
        u = f32::from_bits(u.to_bits() - 1);
    }
    u
}

/// One signed-gradient descent step followed by projection onto the L∞
/// ball of radius `epsilon` and onto the perturbations that keep every
/// image in `images` inside `[0, 1]`.
pub fn pgd_update(delta: &Tensor, grad: &Tensor, alpha: f32, epsilon: f32, images: &[Tensor]) -> Result<Tensor> {
    if delta.shape() != grad.shape() {
        return Err(shape_err!("gradient {:?} vs perturbation {:?}", grad.shape(), delta.shape()));
    }
    if let Some(bad) = images.iter().find(|x| x.shape() != delta.shape()) {
        return Err(shape_err!("image {:?} vs perturbation {:?}", bad.shape(), delta.shape()));
    }
    let mut out = delta.clone();
    for (p, (d, &g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let step = if g > 0.0 {
            -alpha
        } else if g < 0.0 {
            alpha
        } else {
            0.0
        };
        let mut v = (*d + step).clamp(-epsilon, epsilon);
        for x in images {
            let xp = x.data()[p];
            v = v.max(-xp).min(headroom(xp));
        }
        *d = v;
    }
    Ok(out)
}

/// Errors unless `‖δ‖∞ <= epsilon` and every `x + δ` lies in `[0, 1]`.
pub fn check_feasible(delta: &Tensor, epsilon: f32, images: &[Tensor]) -> Result<()> {
    if let Some(v) = delta.data().iter().find(|v| !(v.abs() <= epsilon)) {
        return Err(Error::Invariant(format!("perturbation entry {v} exceeds epsilon {epsilon}")));
    }
    for x in images {
        for (&xp, &d) in x.data().iter().zip(delta.data()) {
            let y = xp + d;
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::Invariant(format!("perturbed pixel {y} outside [0, 1]")));
            }
        }
    }
    Ok(())
}
