//! Scene files on disk: NPY cubes and label rasters, PPM class maps.

use std::fs;
use std::path::Path;

use angleattn_core::data::{class_color, HyperCube, LabelMap};

use crate::npy::{self, NpyArray, NpyData};
use crate::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    npy::decode(&read_bytes(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: e.offset,
        detail: e.detail,
    })
}

fn shape_error(path: &Path, detail: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail,
    }
}

/// `<f4` array of shape (H, W, C).
pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let a = read_npy(path)?;
    let NpyData::F4(values) = a.data else {
        return Err(shape_error(
            path,
            format!("cube must be <f4, found {}", a.data.dtype().descr()),
        ));
    };
    let [h, w, c] = a.shape[..] else {
        return Err(shape_error(path, format!("cube must be 3-D, found shape {:?}", a.shape)));
    };
    Ok(HyperCube::new(h, w, c, values)?)
}

/// `<u2` array of shape (H, W).
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let a = read_npy(path)?;
    let NpyData::U2(labels) = a.data else {
        return Err(shape_error(
            path,
            format!("labels must be <u2, found {}", a.data.dtype().descr()),
        ));
    };
    let [h, w] = a.shape[..] else {
        return Err(shape_error(path, format!("labels must be 2-D, found shape {:?}", a.shape)));
    };
    Ok(LabelMap::new(h, w, labels)?)
}

/// Loads both files and checks that their spatial extents agree.
pub fn load_scene(cube: &Path, labels: &Path) -> Result<(HyperCube, LabelMap)> {
    let c = load_cube(cube)?;
    let l = load_labels(labels)?;
    l.check_pair(&c)?;
    Ok((c, l))
}

pub fn save_cube(path: &Path, cube: &HyperCube) -> Result<()> {
    write_bytes(
        path,
        &npy::encode(&cube.shape(), &NpyData::F4(cube.values().to_vec())),
    )
}

pub fn save_labels(path: &Path, height: usize, width: usize, labels: &[u16]) -> Result<()> {
    write_bytes(path, &npy::encode(&[height, width], &NpyData::U2(labels.to_vec())))
}

/// Binary P6 image, 8 bits per channel.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Palette colors for a class-id raster; id 0 renders black.
pub fn render_classes(ids: &[u16], classes: usize) -> Vec<u8> {
    ids.iter().flat_map(|&k| class_color(k, classes)).collect()
}

pub fn export_map(path: &Path, height: usize, width: usize, ids: &[u16], classes: usize) -> Result<()> {
    write_bytes(path, &encode_ppm(width, height, &render_classes(ids, classes)))
}
