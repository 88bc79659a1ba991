use crate::autodiff::CE_PROB_FLOOR;
use crate::{Error, Result, Tensor};

/// Mean over rows of `−Σ_k y'_k ln(max(p_k, 1e-12))` with
/// `y' = (1 − ε)·onehot + ε/K`.
pub fn label_smoothed_ce(probs: &Tensor, targets: &[usize], smoothing: f64) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] != targets.len() {
        return Err(Error::dim("label_smoothed_ce", probs.shape(), &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
    }
    let k = probs.shape()[1];
    let mut total = 0.0;
    for (row, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Label { label: t, classes: k });
        }
        let p = &probs.data()[row * k..(row + 1) * k];
        for (c, &pv) in p.iter().enumerate() {
            let y = smoothing / k as f64 + if c == t { 1.0 - smoothing } else { 0.0 };
            if y != 0.0 {
                total -= y * libm::log(pv.max(CE_PROB_FLOOR));
            }
        }
    }
    Ok(total / targets.len() as f64)
}
