//! Bilinear sampling of a feature grid at continuous coordinates.

use crate::tensor::Mat;

/// One of the four grid cells contributing to a bilinear sample, with the
/// derivative of its weight with respect to the sampling coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Tap {
    pub index: usize,
    pub weight: f64,
    pub d_dy: f64,
    pub d_dx: f64,
}

/// Taps for sampling an `height × width` grid at `(y, x)`. Coordinates are
/// clamped to `[0, height-1] × [0, width-1]`; the derivative along a clamped
/// axis is zero.
pub(crate) fn bilinear_taps(height: usize, width: usize, y: f64, x: f64) -> [Tap; 4] {
    let (y0, y1, fy, y_live) = axis(y, height);
    let (x0, x1, fx, x_live) = axis(x, width);
    let gy = if y_live { 1.0 } else { 0.0 };
    let gx = if x_live { 1.0 } else { 0.0 };
    [
        Tap { index: y0 * width + x0, weight: (1.0 - fy) * (1.0 - fx), d_dy: -gy * (1.0 - fx), d_dx: -gx * (1.0 - fy) },
        Tap { index: y0 * width + x1, weight: (1.0 - fy) * fx, d_dy: -gy * fx, d_dx: gx * (1.0 - fy) },
        Tap { index: y1 * width + x0, weight: fy * (1.0 - fx), d_dy: gy * (1.0 - fx), d_dx: -gx * fy },
        Tap { index: y1 * width + x1, weight: fy * fx, d_dy: gy * fx, d_dx: gx * fy },
    ]
}

fn axis(coord: f64, extent: usize) -> (usize, usize, f64, bool) {
    let hi = (extent - 1) as f64;
    let live = coord > 0.0 && coord < hi;
    let c = coord.clamp(0.0, hi);
    let lo = (c.floor() as usize).min(extent - 1);
    let up = (lo + 1).min(extent - 1);
    (lo, up, c - lo as f64, live)
}

/// Bilinear interpolation of a grid stored row-major as `(height·width) × C`.
/// Out-of-range points are clamped to the border.
pub fn bilinear_sample(grid: &Mat, height: usize, width: usize, y: f64, x: f64) -> Vec<f64> {
    assert_eq!(grid.rows(), height * width, "grid has {} rows, expected {}", grid.rows(), height * width);
    let mut out = vec![0.0; grid.cols()];
    for tap in bilinear_taps(height, width, y, x) {
        for (o, &v) in out.iter_mut().zip(grid.row(tap.index)) {
            *o += tap.weight * v;
        }
    }
    out
}
