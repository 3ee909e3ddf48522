//! Binary PGM (P5) slice images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::ravel;

/// Linear window of `v` over `[lo, hi]` to 0..=255, clamped, rounding half up.
pub fn window_pixel(v: f64, lo: f64, hi: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (u * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Encodes the slice `index` along `axis` of a grid. The image columns
/// follow the lower remaining axis and the rows the higher one.
pub fn encode_slice(
    dims: [usize; 3],
    values: &[f64],
    axis: usize,
    index: usize,
    range: (f64, f64),
) -> Result<Vec<u8>> {
    if values.len() != dims.iter().product::<usize>() {
        return Err(Error::invalid("value count does not match dims"));
    }
    if axis > 2 {
        return Err(Error::invalid(format!("axis {axis} is not one of 0, 1, 2")));
    }
    if index >= dims[axis] {
        return Err(Error::invalid(format!(
            "slice {index} out of range for axis {axis} of length {}",
            dims[axis]
        )));
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::invalid(format!("bad value range [{lo}, {hi}]")));
    }
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for row in 0..h {
        for col in 0..w {
            let mut idx = [0usize; 3];
            idx[axis] = index;
            idx[u] = col;
            idx[v] = row;
            out.push(window_pixel(values[ravel(idx, dims)], lo, hi));
        }
    }
    Ok(out)
}

pub fn write_slice_image(
    path: &Path,
    dims: [usize; 3],
    values: &[f64],
    axis: usize,
    index: usize,
    range: (f64, f64),
) -> Result<()> {
    super::write_atomic(path, &encode_slice(dims, values, axis, index, range)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_rounds_up() {
        assert_eq!(window_pixel(1.0, 0.0, 2.0), 128);
        assert_eq!(window_pixel(-5.0, 0.0, 2.0), 0);
        assert_eq!(window_pixel(9.0, 0.0, 2.0), 255);
        assert_eq!(window_pixel(2.0, 0.0, 2.0), 255);
    }

    #[test]
    fn bad_axis_or_index() {
        let v = vec![1.0; 8];
        assert!(encode_slice([2, 2, 2], &v, 3, 0, (0.0, 2.0)).is_err());
        assert!(encode_slice([2, 2, 2], &v, 1, 2, (0.0, 2.0)).is_err());
        assert!(encode_slice([2, 2, 2], &v, 1, 1, (2.0, 2.0)).is_err());
        let img = encode_slice([2, 2, 2], &v, 1, 1, (0.0, 2.0)).unwrap();
        assert!(img.ends_with(&[128; 4]));
    }
}
