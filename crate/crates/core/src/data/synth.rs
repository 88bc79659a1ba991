//! Desk-scale synthetic scenes: gain-scaled endmember spectra over a Voronoi
//! partition of the image.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{inject_noise, HyperCube, LabelMap};
use crate::{derive_seed, seeded, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    /// Number of Voronoi sites; sites are assigned to classes round-robin.
    pub sites: usize,
    pub gain_lo: f64,
    pub gain_hi: f64,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 32,
            classes: 8,
            sites: 24,
            gain_lo: 0.5,
            gain_hi: 1.5,
            snr_db: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::Config(format!(
                "class count {} out of range",
                self.classes
            )));
        }
        if self.classes > self.sites {
            return Err(Error::Config(format!(
                "{} classes need at least as many sites, got {}",
                self.classes, self.sites
            )));
        }
        if self.sites > self.height * self.width {
            return Err(Error::Config(format!(
                "{} sites do not fit in a {}x{} image",
                self.sites, self.height, self.width
            )));
        }
        if !(self.gain_lo > 0.0 && self.gain_lo <= self.gain_hi && self.gain_hi.is_finite()) {
            return Err(Error::Config(format!(
                "gain range [{}, {}] must satisfy 0 < lo <= hi",
                self.gain_lo, self.gain_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cube: HyperCube,
    pub labels: LabelMap,
    /// Pure spectrum of class `k + 1`.
    pub endmembers: Vec<Vec<f64>>,
}

fn endmember<R: Rng + ?Sized>(bands: usize, rng: &mut R) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..core::f64::consts::TAU),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            let x = b as f64 / bands as f64;
            terms
                .iter()
                .map(|(a, f, p)| a * libm::sin(core::f64::consts::TAU * f * x + p))
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let offset = rng.random_range(0.1..0.3);
    raw.into_iter().map(|v| v - lo + offset).collect()
}

/// Deterministic in `spec.seed`.
pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let mut rng = seeded(spec.seed);
    let endmembers: Vec<Vec<f64>> = (0..spec.classes).map(|_| endmember(c, &mut rng)).collect();

    // Distinct pixel positions keep every site's own pixel in its cell.
    let sites: Vec<(f64, f64)> = sample(&mut rng, h * w, spec.sites)
        .into_iter()
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let mut best = (f64::INFINITY, 0usize);
            for (s, &(sr, sc)) in sites.iter().enumerate() {
                let d = (r as f64 - sr) * (r as f64 - sr) + (col as f64 - sc) * (col as f64 - sc);
                if d < best.0 {
                    best = (d, s);
                }
            }
            labels.push((best.1 % spec.classes + 1) as u16);
        }
    }

    let mut values = Vec::with_capacity(h * w * c);
    for &l in &labels {
        let gain = if spec.gain_lo == spec.gain_hi {
            spec.gain_lo
        } else {
            rng.random_range(spec.gain_lo..spec.gain_hi)
        };
        values.extend(endmembers[l as usize - 1].iter().map(|&e| (gain * e) as f32));
    }
    let cube = HyperCube::new(h, w, c, values)?;
    let cube = inject_noise(&cube, spec.snr_db, derive_seed(spec.seed, &[0x6e_6f69_7365]));
    Ok(SynthScene {
        cube,
        labels: LabelMap::new(h, w, labels)?,
        endmembers,
    })
}
