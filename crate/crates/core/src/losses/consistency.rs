//! Geometric agreement between the target depth transported into each
//! neighbor camera and the neighbor's own depth resampled at the same points.

use ndarray::{Array2, ArrayView2, Zip};

use super::sign;
use crate::geometry::DepthWarp;

#[derive(Debug, Clone)]
pub struct Consistency {
    pub value: f64,
    /// Per-source masked mean, `None` where that source's region was empty.
    pub per_source: Vec<Option<f64>>,
    pub skipped: bool,
}

/// One neighbor's contribution: resampled neighbor depth, transported target
/// depth, and the matched region Ω.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyPair<'a> {
    pub resampled: ArrayView2<'a, f64>,
    pub transformed: ArrayView2<'a, f64>,
    pub region: ArrayView2<'a, bool>,
}

/// Mean absolute depth disagreement over each region, averaged over the
/// sources whose region is non-empty.
pub fn scale_consistency_loss(pairs: &[ConsistencyPair<'_>]) -> Consistency {
    let per_source: Vec<Option<f64>> = pairs
        .iter()
        .map(|p| {
            let mut sum = 0.0;
            let mut n = 0usize;
            Zip::from(&p.resampled)
                .and(&p.transformed)
                .and(&p.region)
                .for_each(|&r, &t, &m| {
                    if m {
                        sum += (t - r).abs();
                        n += 1;
                    }
                });
            (n > 0).then(|| sum / n as f64)
        })
        .collect();
    let active: Vec<f64> = per_source.iter().flatten().copied().collect();
    let skipped = active.is_empty();
    Consistency {
        value: if skipped {
            0.0
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        },
        per_source,
        skipped,
    }
}

/// Region Ω for one source: warp validity intersected with the auto-mask.
pub fn matched_region(warp: &DepthWarp, automask: ArrayView2<bool>) -> Array2<bool> {
    Zip::from(&warp.valid)
        .and(&automask)
        .map_collect(|&v, &m| v && m)
}

#[derive(Debug, Clone)]
pub struct ConsistencyGradients {
    pub loss: Consistency,
    /// Gradient with respect to the target depth.
    pub target: Array2<f64>,
    /// Gradient with respect to each neighbor's depth map.
    pub sources: Vec<Array2<f64>>,
}

/// Loss and gradients for depth warps computed with [`crate::geometry::warp_depth`].
pub fn consistency_with_gradients(warps: &[DepthWarp], regions: &[Array2<bool>]) -> ConsistencyGradients {
    assert_eq!(warps.len(), regions.len());
    let pairs: Vec<ConsistencyPair<'_>> = warps
        .iter()
        .zip(regions)
        .map(|(w, r)| ConsistencyPair {
            resampled: w.resampled.view(),
            transformed: w.transformed.view(),
            region: r.view(),
        })
        .collect();
    let loss = scale_consistency_loss(&pairs);
    let dim = warps
        .first()
        .map(|w| w.resampled.raw_dim())
        .unwrap_or_else(|| ndarray::Dim([0, 0]));
    let mut target = Array2::zeros(dim);
    let mut sources = Vec::with_capacity(warps.len());
    let active = loss.per_source.iter().flatten().count();
    for ((w, region), per) in warps.iter().zip(regions).zip(&loss.per_source) {
        if per.is_none() {
            let (sw, sh) = w.grid().source_size;
            sources.push(Array2::zeros((sh, sw)));
            continue;
        }
        let n = region.iter().filter(|m| **m).count() as f64;
        let scale = 1.0 / (n * active as f64);
        let mut g_res = Array2::zeros(w.resampled.raw_dim());
        for (idx, &m) in region.indexed_iter() {
            if !m {
                continue;
            }
            let e = scale * sign(w.transformed[idx] - w.resampled[idx]);
            target[idx] += e * (w.dtransformed_ddepth[idx] - w.dresampled_ddepth[idx]);
            g_res[idx] = -e;
        }
        sources.push(w.source_adjoint(g_res.view()));
    }
    ConsistencyGradients {
        loss,
        target,
        sources,
    }
}
