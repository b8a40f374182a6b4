//! Appearance loss between the target frame and its reconstructions, with
//! per-pixel minimum over sources and the stationary-pixel auto-mask.

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};

use super::sign;
use super::ssim::{ssim, ssim_vjp_b};
use crate::geometry::WarpedImage;

/// Weight of the SSIM term against L1.
pub const ALPHA: f64 = 0.85;

/// Per-pixel `α/2·(1 − SSIM) + (1 − α)·|a − b|`, averaged over channels.
pub fn photometric_pair_loss(target: ArrayView3<f64>, synth: ArrayView3<f64>) -> Array2<f64> {
    let c = target.dim().0 as f64;
    let s = ssim(target, synth);
    let mut per_channel = (1.0 - s) * (ALPHA / 2.0);
    Zip::from(&mut per_channel)
        .and(&target)
        .and(&synth)
        .for_each(|p, &a, &b| *p += (1.0 - ALPHA) * (a - b).abs());
    per_channel.sum_axis(Axis(0)) / c
}

/// Gradient of `Σ grad · photometric_pair_loss(target, synth)` with respect to
/// `synth`.
pub fn photometric_pair_loss_vjp(
    target: ArrayView3<f64>,
    synth: ArrayView3<f64>,
    grad: ndarray::ArrayView2<f64>,
) -> Array3<f64> {
    let (c, h, w) = target.dim();
    let per_channel = grad.insert_axis(Axis(0)).broadcast((c, h, w)).unwrap().to_owned() / c as f64;
    let mut out = ssim_vjp_b(target, synth, (&per_channel * (-ALPHA / 2.0)).view());
    Zip::from(&mut out)
        .and(&per_channel)
        .and(&target)
        .and(&synth)
        .for_each(|o, &g, &a, &b| {
            *o += g * (1.0 - ALPHA) * sign(b - a);
        });
    out
}

#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    pub loss: f64,
    /// Pixels that contribute: the best reconstruction beats every unwarped
    /// source. Always a subset of `valid`.
    pub automask: Array2<bool>,
    /// Pixels with at least one in-bounds reconstruction.
    pub valid: Array2<bool>,
    /// Per-pixel minimum of the reconstruction loss over valid sources
    /// (infinite where no source is valid).
    pub min_map: Array2<f64>,
    /// Index of the source achieving the minimum.
    pub selected: Array2<usize>,
    /// Number of pixels averaged into `loss`.
    pub count: usize,
    /// Set when no pixel survives masking; `loss` is then 0.
    pub skipped: bool,
}

/// Minimum reprojection loss over sources with auto-masking.
///
/// `sources` are the raw neighbor frames (for the stationary-pixel test) and
/// `warped` their reconstructions of the target, in the same order.
pub fn photometric_loss(
    target: ArrayView3<f64>,
    sources: &[ArrayView3<f64>],
    warped: &[WarpedImage],
) -> PhotometricLoss {
    assert!(!sources.is_empty(), "photometric loss needs at least one source");
    assert_eq!(sources.len(), warped.len());
    let (_, h, w) = target.dim();

    let mut min_map = Array2::from_elem((h, w), f64::INFINITY);
    let mut selected = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for (s, wi) in warped.iter().enumerate() {
        let l = photometric_pair_loss(target, wi.image.view());
        for ((i, j), &v) in l.indexed_iter() {
            if wi.valid[(i, j)] && v < min_map[(i, j)] {
                min_map[(i, j)] = v;
                selected[(i, j)] = s;
                valid[(i, j)] = true;
            }
        }
    }

    let mut identity_min = Array2::from_elem((h, w), f64::INFINITY);
    for src in sources {
        let l = photometric_pair_loss(target, *src);
        Zip::from(&mut identity_min)
            .and(&l)
            .for_each(|m, &v| *m = m.min(v));
    }

    let automask = Zip::from(&valid)
        .and(&min_map)
        .and(&identity_min)
        .map_collect(|&ok, &warped, &ident| ok && warped < ident);

    let mut sum = 0.0;
    let mut count = 0usize;
    Zip::from(&automask).and(&min_map).for_each(|&m, &v| {
        if m {
            sum += v;
            count += 1;
        }
    });
    let skipped = count == 0;
    PhotometricLoss {
        loss: if skipped { 0.0 } else { sum / count as f64 },
        automask,
        valid,
        min_map,
        selected,
        count,
        skipped,
    }
}

impl PhotometricLoss {
    /// Gradient of `loss` with respect to each reconstructed image.
    pub fn warped_gradients(&self, target: ArrayView3<f64>, warped: &[WarpedImage]) -> Vec<Array3<f64>> {
        let (_, h, w) = target.dim();
        warped
            .iter()
            .enumerate()
            .map(|(s, wi)| {
                if self.skipped {
                    return Array3::zeros(wi.image.raw_dim());
                }
                let inv = 1.0 / self.count as f64;
                let mut g = Array2::zeros((h, w));
                let mut any = false;
                Zip::from(&mut g)
                    .and(&self.automask)
                    .and(&self.selected)
                    .for_each(|g, &m, &sel| {
                        if m && sel == s {
                            *g = inv;
                            any = true;
                        }
                    });
                if !any {
                    return Array3::zeros(wi.image.raw_dim());
                }
                photometric_pair_loss_vjp(target, wi.image.view(), g.view())
            })
            .collect()
    }

    /// Gradient of `loss` with respect to the target depth used for warping.
    pub fn depth_gradient(&self, target: ArrayView3<f64>, warped: &[WarpedImage]) -> Array2<f64> {
        let (_, h, w) = target.dim();
        let mut out = Array2::zeros((h, w));
        for (g, wi) in self.warped_gradients(target, warped).iter().zip(warped) {
            let chain = (g * &wi.dimage_ddepth).sum_axis(Axis(0));
            out += &chain;
        }
        out
    }
}
