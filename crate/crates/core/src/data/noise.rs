use rand_distr::{Distribution, StandardNormal};

use crate::data::HyperCube;
use crate::seeded;

/// Per-band min-max scaling to `[0, 1]`; constant bands become 0.
pub fn normalize_bands(cube: &HyperCube) -> HyperCube {
    let c = cube.bands();
    let mut lo = alloc::vec![f32::INFINITY; c];
    let mut hi = alloc::vec![f32::NEG_INFINITY; c];
    for px in cube.values().chunks_exact(c) {
        for (b, &v) in px.iter().enumerate() {
            lo[b] = lo[b].min(v);
            hi[b] = hi[b].max(v);
        }
    }
    let mut out = cube.clone();
    for px in out.values_mut().chunks_exact_mut(c) {
        for (b, v) in px.iter_mut().enumerate() {
            let range = hi[b] as f64 - lo[b] as f64;
            *v = if range > 0.0 {
                ((*v as f64 - lo[b] as f64) / range) as f32
            } else {
                0.0
            };
        }
    }
    out
}

/// Mean squared value over the whole cube.
pub fn mean_square(cube: &HyperCube) -> f64 {
    let v = cube.values();
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64
}

/// Adds i.i.d. Gaussian noise with variance `mean_square / 10^(snr/10)`.
/// `None` or an infinite SNR returns the cube unchanged.
pub fn inject_noise(cube: &HyperCube, snr_db: Option<f64>, seed: u64) -> HyperCube {
    let Some(snr) = snr_db.filter(|s| s.is_finite()) else {
        return cube.clone();
    };
    let sigma = libm::sqrt(mean_square(cube) / libm::pow(10.0, snr / 10.0));
    let mut rng = seeded(seed);
    let mut out = cube.clone();
    for v in out.values_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + sigma * z) as f32;
    }
    out
}
