//! Central-difference gradient verification.

use alloc::vec::Vec;

use crate::Tensor;

/// Compares analytic gradients against central differences.
///
/// `f` returns the loss and the analytic gradient for each tensor in
/// `params`. Every tensor contributes up to `max_coords` evenly strided
/// coordinates. Returns the largest `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(params: &[Tensor], f: F, h: f64, max_coords: usize) -> f64
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape());
        let n = params[pi].len();
        let stride = if n > max_coords { n.div_ceil(max_coords) } else { 1 };
        for c in (0..n).step_by(stride) {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let up = f(&work).0;
            work[pi].data_mut()[c] = orig - h;
            let down = f(&work).0;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[c];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
