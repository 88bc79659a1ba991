use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::LabelMap;
use crate::{seeded, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.01,
            val_frac: 0.01,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.train_frac) || !open(self.val_frac) || self.train_frac + self.val_frac >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions train={} val={} must lie in (0, 1) and sum below 1",
                self.train_frac, self.val_frac
            )));
        }
        Ok(())
    }
}

/// Disjoint flat pixel indices (`row · W + col`) per subset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_half_up(x: f64) -> usize {
    libm::floor(x + 0.5) as usize
}

/// Per-class shuffle, then `max(1, round(f · n_c))` pixels to train and to
/// validation and the rest to test. Background pixels are never drawn.
pub fn stratified_split(labels: &LabelMap, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let k = labels.num_classes();
    let mut by_class: Vec<Vec<usize>> = alloc::vec![Vec::new(); k + 1];
    for (i, &l) in labels.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = seeded(spec.seed);
    let mut split = Split::default();
    for (class, pixels) in by_class.iter_mut().enumerate().skip(1) {
        let n = pixels.len();
        if n < 3 {
            return Err(Error::Split {
                class: class as u16,
                count: n,
            });
        }
        pixels.shuffle(&mut rng);
        let n_train = round_half_up(spec.train_frac * n as f64).max(1);
        let n_val = round_half_up(spec.val_frac * n as f64).max(1);
        if n_train + n_val >= n {
            return Err(Error::Config(format!(
                "class {class} with {n} pixels leaves no test pixels"
            )));
        }
        split.train.extend_from_slice(&pixels[..n_train]);
        split.val.extend_from_slice(&pixels[n_train..n_train + n_val]);
        split.test.extend_from_slice(&pixels[n_train + n_val..]);
    }
    Ok(split)
}
