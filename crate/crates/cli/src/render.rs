//! Class maps as binary PPM images.

use std::fs;
use std::path::Path;

use tsvit::Error;

/// Fixed class colours, indexed by class.
pub const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
];

/// Encodes an `height × width` map of class indices as a P6 image. Pixels
/// equal to `background` are black; any other index must have a palette
/// entry.
pub fn render_class_map(
    map: &[usize],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
    background: usize,
) -> Result<Vec<u8>, Error> {
    if map.len() != height * width {
        return Err(Error::Dimension(format!(
            "class map has {} pixels, expected {height}x{width}",
            map.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * map.len());
    for &c in map {
        if c == background {
            out.extend_from_slice(&[0, 0, 0]);
        } else {
            let rgb = palette.get(c).ok_or_else(|| {
                Error::Data(format!(
                    "class {c} has no palette colour ({} available)",
                    palette.len()
                ))
            })?;
            out.extend_from_slice(rgb);
        }
    }
    Ok(out)
}

pub fn write_class_map(
    path: &Path,
    map: &[usize],
    height: usize,
    width: usize,
    palette: &[[u8; 3]],
    background: usize,
) -> Result<(), Error> {
    fs::write(
        path,
        render_class_map(map, height, width, palette, background)?,
    )?;
    Ok(())
}
