//! Edge-aware first-order smoothness on mean-normalized disparity.

use ndarray::{Array2, ArrayView2, ArrayView3};

use super::distill::LossTerm;
use super::sign;

/// `mean|∂x d*|·e^{−|∂x I|} + mean|∂y d*|·e^{−|∂y I|}` with `d* = d / mean(d)`;
/// image gradients are averaged over channels. Each direction is averaged
/// over its own number of neighbor pairs.
pub fn smoothness_term(disp: ArrayView2<f64>, image: ArrayView3<f64>) -> LossTerm {
    let (h, w) = disp.dim();
    let (c, ih, iw) = image.dim();
    assert_eq!((h, w), (ih, iw), "disparity and image must share a resolution");
    let n = (h * w) as f64;
    let mean = disp.sum() / n;
    if !(mean > 0.0) {
        return LossTerm {
            value: 0.0,
            grad: Array2::zeros((h, w)),
        };
    }
    let norm = disp.mapv(|v| v / mean);
    let edge = |i0: usize, j0: usize, i1: usize, j1: usize| {
        let mut g = 0.0;
        for ch in 0..c {
            g += (image[(ch, i1, j1)] - image[(ch, i0, j0)]).abs();
        }
        (-g / c as f64).exp()
    };

    let nx = (h * w.saturating_sub(1)) as f64;
    let ny = (h.saturating_sub(1) * w) as f64;
    let mut value = 0.0;
    let mut g_norm = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                let d = norm[(i, j + 1)] - norm[(i, j)];
                let wgt = edge(i, j, i, j + 1) / nx;
                value += d.abs() * wgt;
                let s = sign(d) * wgt;
                g_norm[(i, j + 1)] += s;
                g_norm[(i, j)] -= s;
            }
            if i + 1 < h {
                let d = norm[(i + 1, j)] - norm[(i, j)];
                let wgt = edge(i, j, i + 1, j) / ny;
                value += d.abs() * wgt;
                let s = sign(d) * wgt;
                g_norm[(i + 1, j)] += s;
                g_norm[(i, j)] -= s;
            }
        }
    }
    // d*_i = d_i / μ  =>  ∂/∂d_j = g*_j/μ − (Σ_i g*_i d_i)/(μ² n)
    let dot: f64 = g_norm.iter().zip(disp.iter()).map(|(g, d)| g * d).sum();
    let grad = g_norm.mapv(|g| g / mean) - dot / (mean * mean * n);
    LossTerm { value, grad }
}

pub fn smoothness_loss(disp: ArrayView2<f64>, image: ArrayView3<f64>) -> f64 {
    smoothness_term(disp, image).value
}
