//! Upscaling of 2-D maps onto the input grid.
//!
//! Sample grids are corner-aligned: the first and last target rows/columns
//! land exactly on the first and last source rows/columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Separable linear interpolation along both axes.
    #[default]
    Bilinear,
    /// Linear interpolation along rows (axis 0), nearest neighbour along columns.
    Linear,
}

/// Source coordinate of target index `i` on a corner-aligned grid.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 || src == 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// (lower index, upper index, weight of upper) for linear interpolation.
fn linear_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = source_coord(i, src, dst);
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

fn nearest_tap(i: usize, src: usize, dst: usize) -> usize {
    ((source_coord(i, src, dst) + 0.5).floor() as usize).min(src - 1)
}

/// Resizes an `H x W` map to `target = (H', W')` with `H' >= H`, `W' >= W`.
pub fn resize_map(map: &Tensor, target: (usize, usize), mode: ResizeMode) -> Result<Tensor> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "resize_map",
                "map rank",
                format!("expected H x W, got {:?}", map.shape()),
            ))
        }
    };
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::invalid(format!(
            "resize_map only upscales: {h}x{w} -> {th}x{tw}"
        )));
    }
    let src = map.data();
    let at = |y: usize, x: usize| src[y * w + x];
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let (y0, y1, fy) = linear_taps(i, h, th);
        for j in 0..tw {
            let v = match mode {
                ResizeMode::Bilinear => {
                    let (x0, x1, fx) = linear_taps(j, w, tw);
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    top * (1.0 - fy) + bottom * fy
                }
                ResizeMode::Linear => {
                    let x = nearest_tap(j, w, tw);
                    at(y0, x) * (1.0 - fy) + at(y1, x) * fy
                }
            };
            out.push(v);
        }
    }
    Tensor::new(vec![th, tw], out)
}
