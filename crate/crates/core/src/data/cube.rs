use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// `H × W × C` reflectance raster stored row-major with bands innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dim("cube", &[height, width, bands], &[]));
        }
        if values.len() != height * width * bands {
            return Err(Error::dim("cube", &[height, width, bands], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "cube",
                detail: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let off = (row * self.width + col) * self.bands;
        &self.values[off..off + self.bands]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// Per-pixel class ids; 0 marks unlabeled background, classes are `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    /// Requires at least two distinct nonzero classes.
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::dim("labels", &[height, width], &[labels.len()]));
        }
        let map = Self {
            height,
            width,
            labels,
        };
        let present = map.class_counts().iter().skip(1).filter(|&&c| c > 0).count();
        if present < 2 {
            return Err(Error::Config(format!(
                "label map needs at least 2 classes, found {present}"
            )));
        }
        Ok(map)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest class id.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Pixel count per id `0..=K`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes() + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Errors unless the spatial extents match `cube`.
    pub fn check_pair(&self, cube: &HyperCube) -> Result<()> {
        if self.height != cube.height() || self.width != cube.width() {
            return Err(Error::dim(
                "label/cube pairing",
                &[self.height, self.width],
                &cube.shape(),
            ));
        }
        Ok(())
    }
}
