//! Binary PPM images of label maps and range channels.

use crate::class::Class;
use crate::projection::{LabelGrid, SphericalGrid, CH_RANGE};

pub fn class_color(class: Class) -> [u8; 3] {
    match class {
        Class::Car => [255, 0, 0],
        Class::Pedestrian => [0, 255, 0],
        Class::Cyclist => [0, 0, 255],
        Class::Background => [128, 128, 128],
    }
}

/// RGB pixels, row-major; unoccupied cells are black.
pub fn label_rgb(labels: &LabelGrid) -> Vec<u8> {
    labels
        .classes()
        .iter()
        .zip(labels.mask())
        .flat_map(|(&c, &m)| match (m, Class::from_id(c)) {
            (true, Some(class)) => class_color(class),
            _ => [0, 0, 0],
        })
        .collect()
}

/// Gray levels falling off with range; unoccupied cells are black.
pub fn range_rgb(grid: &SphericalGrid, max_range: f32) -> Vec<u8> {
    (0..grid.mask.len())
        .flat_map(|i| {
            if !grid.mask[i] {
                return [0, 0, 0];
            }
            let t = (grid.cell(i)[CH_RANGE] / max_range).clamp(0.0, 1.0);
            let v = (255.0 - 200.0 * t).round() as u8;
            [v, v, v]
        })
        .collect()
}

/// P6 file contents for `rgb` of the given size.
pub fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "pixel buffer does not match image size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn label_ppm(labels: &LabelGrid) -> Vec<u8> {
    ppm(labels.width(), labels.height(), &label_rgb(labels))
}

pub fn range_ppm(grid: &SphericalGrid, max_range: f32) -> Vec<u8> {
    ppm(grid.width(), grid.height(), &range_rgb(grid, max_range))
}
