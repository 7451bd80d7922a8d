//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is essentially zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(REL_FLOOR)
    }
}

/// Compares autodiff gradients of the scalar `f(inputs)` against central
/// differences with step `h` at the given `(input, element)` coordinates.
///
/// Inputs must be trainable leaves. Their gradients are reset first and left
/// holding the analytic values afterwards.
pub fn check<F>(inputs: &[Tensor], coords: &[(usize, usize)], h: f64, f: F) -> Result<Vec<Probe>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    inputs.iter().for_each(Tensor::zero_grad);
    f(inputs)?.backward()?;
    let grads: Vec<Vec<f64>> =
        inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let _guard = no_grad();
    let mut probes = Vec::with_capacity(coords.len());
    for &(input, index) in coords {
        let t = &inputs[input];
        let orig = t.data()[index];
        t.data_mut()[index] = orig + h;
        let up = f(inputs)?.item()?;
        t.data_mut()[index] = orig - h;
        let down = f(inputs)?.item()?;
        t.data_mut()[index] = orig;
        probes.push(Probe { input, index, analytic: grads[input][index], numeric: (up - down) / (2.0 * h) });
    }
    Ok(probes)
}

/// Largest relative error over `probes`.
pub fn max_rel_error(probes: &[Probe]) -> f64 {
    probes.iter().map(Probe::rel_error).fold(0.0, f64::max)
}
