//! Central finite-difference checks of tape gradients.

use rand::Rng;

use crate::{Gradients, ParamStore};

/// Result of comparing one directional derivative.
#[derive(Clone, Copy, Debug)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl DirectionalCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares `<grad, u>` against `(f(p + h u) - f(p - h u)) / 2h` for a
/// random unit direction `u` over all parameters.
pub fn directional_check<R, F>(
    params: &ParamStore,
    grads: &Gradients,
    loss: F,
    h: f64,
    rng: &mut R,
) -> DirectionalCheck
where
    R: Rng + ?Sized,
    F: Fn(&ParamStore) -> f64,
{
    let base = params.flatten();
    let mut dir: Vec<f64> = base.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);

    let analytic = grads.flatten().iter().zip(&dir).map(|(g, u)| g * u).sum();

    let mut shifted = params.clone();
    let plus: Vec<f64> = base.iter().zip(&dir).map(|(p, u)| p + h * u).collect();
    shifted.assign_flat(&plus);
    let f_plus = loss(&shifted);
    let minus: Vec<f64> = base.iter().zip(&dir).map(|(p, u)| p - h * u).collect();
    shifted.assign_flat(&minus);
    let f_minus = loss(&shifted);

    DirectionalCheck {
        analytic,
        numeric: (f_plus - f_minus) / (2.0 * h),
    }
}
