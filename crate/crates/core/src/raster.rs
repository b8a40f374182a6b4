//! Float image containers and conversions.
//!
//! Images are `[C, H, W]` arrays with intensities in [0, 1]; scalar maps are
//! `[H, W]`.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;

/// Loads an 8-bit image as RGB in [0, 1].
pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Writes a `[3, H, W]` or `[1, H, W]` image as 8-bit PNG.
pub fn save_png(img: ArrayView3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if c >= 3 {
            image::Rgb([q(img[(0, y, x)]), q(img[(1, y, x)]), q(img[(2, y, x)])])
        } else {
            let g = q(img[(0, y, x)]);
            image::Rgb([g, g, g])
        }
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Source coordinate of output index `i` when resampling `n_in` samples onto
/// `n_out` with corners aligned.
#[inline]
fn aligned_coordinate(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in < 2 || n_out < 2 {
        return (0, 0, 0.0);
    }
    let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let x0 = (x.floor() as usize).min(n_in - 2);
    (x0, x0 + 1, x - x0 as f64)
}

/// Corner-aligned bilinear resize of a scalar map. Exact for functions of the
/// form a·u + b·v + c + d·u·v.
pub fn resize_bilinear(src: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (height, width) {
        return src.to_owned();
    }
    let mut out = Array2::zeros((height, width));
    for i in 0..height {
        let (y0, y1, b) = aligned_coordinate(i, h, height);
        for j in 0..width {
            let (x0, x1, a) = aligned_coordinate(j, w, width);
            let top = src[(y0, x0)] * (1.0 - a) + src[(y0, x1)] * a;
            let bottom = src[(y1, x0)] * (1.0 - a) + src[(y1, x1)] * a;
            out[(i, j)] = top * (1.0 - b) + bottom * b;
        }
    }
    out
}

/// Transpose of [`resize_bilinear`]: maps a gradient on the resized map back
/// to the `(height, width)` source.
pub fn resize_bilinear_adjoint(grad: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (oh, ow) = grad.dim();
    if (oh, ow) == (height, width) {
        return grad.to_owned();
    }
    let mut out = Array2::zeros((height, width));
    for i in 0..oh {
        let (y0, y1, b) = aligned_coordinate(i, height, oh);
        for j in 0..ow {
            let (x0, x1, a) = aligned_coordinate(j, width, ow);
            let g = grad[(i, j)];
            out[(y0, x0)] += g * (1.0 - a) * (1.0 - b);
            out[(y0, x1)] += g * a * (1.0 - b);
            out[(y1, x0)] += g * (1.0 - a) * b;
            out[(y1, x1)] += g * a * b;
        }
    }
    out
}

pub fn resize_image(src: ArrayView3<f64>, height: usize, width: usize) -> Image {
    let c = src.dim().0;
    let mut out = Array3::zeros((c, height, width));
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch)
            .assign(&resize_bilinear(src.index_axis(Axis(0), ch), height, width));
    }
    out
}
