use crate::data::HyperCube;
use crate::{Error, Result, Tensor};

/// Mirror index without repeating the border sample: `-1 → 1`, `n → n-2`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `P × P × C` window whose top-left corner sits `⌊P/2⌋` above and left of
/// `(row, col)`; outside pixels are mirrored back into the image.
pub fn extract_patch(cube: &HyperCube, row: usize, col: usize, size: usize) -> Result<Tensor> {
    let (h, w, c) = (cube.height(), cube.width(), cube.bands());
    if row >= h || col >= w {
        return Err(Error::Range {
            row,
            col,
            height: h,
            width: w,
        });
    }
    let half = (size / 2) as isize;
    let mut data = alloc::vec::Vec::with_capacity(size * size * c);
    for i in 0..size as isize {
        let r = reflect_index(row as isize - half + i, h);
        for j in 0..size as isize {
            let cc = reflect_index(col as isize - half + j, w);
            data.extend(cube.spectrum(r, cc).iter().map(|&v| v as f64));
        }
    }
    Tensor::new(&[size, size, c], data)
}
