//! Windowed SSIM with 3×3 box pooling over reflection-padded inputs.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// 3×3 mean over the reflection-padded map.
pub fn box3(x: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for di in -1..=1 {
                let r = reflect(i as isize + di, h);
                for dj in -1..=1 {
                    s += x[(r, reflect(j as isize + dj, w))];
                }
            }
            out[(i, j)] = s / 9.0;
        }
    }
    out
}

/// Transpose of [`box3`].
pub fn box3_adjoint(g: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let v = g[(i, j)] / 9.0;
            if v == 0.0 {
                continue;
            }
            for di in -1..=1 {
                let r = reflect(i as isize + di, h);
                for dj in -1..=1 {
                    out[(r, reflect(j as isize + dj, w))] += v;
                }
            }
        }
    }
    out
}

struct Moments {
    mu_a: Array2<f64>,
    mu_b: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    b1: Array2<f64>,
    b2: Array2<f64>,
}

fn moments(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Moments {
    let mu_a = box3(a);
    let mu_b = box3(b);
    let saa = box3((&a * &a).view()) - &mu_a * &mu_a;
    let sbb = box3((&b * &b).view()) - &mu_b * &mu_b;
    let sab = box3((&a * &b).view()) - &mu_a * &mu_b;
    let a1 = 2.0 * &mu_a * &mu_b + C1;
    let a2 = 2.0 * sab + C2;
    let b1 = &mu_a * &mu_a + &mu_b * &mu_b + C1;
    let b2 = saa + sbb + C2;
    Moments {
        mu_a,
        mu_b,
        a1,
        a2,
        b1,
        b2,
    }
}

fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let m = moments(a, b);
    (&m.a1 * &m.a2) / (&m.b1 * &m.b2)
}

/// Per-pixel, per-channel SSIM of two `[C, H, W]` images.
pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Array3<f64> {
    assert_eq!(a.dim(), b.dim(), "ssim inputs must share a shape");
    let mut out = Array3::zeros(a.raw_dim());
    for c in 0..a.dim().0 {
        out.index_axis_mut(Axis(0), c)
            .assign(&ssim_channel(a.index_axis(Axis(0), c), b.index_axis(Axis(0), c)));
    }
    out
}

/// Vector-Jacobian product of [`ssim`] with respect to its second argument.
pub fn ssim_vjp_b(a: ArrayView3<f64>, b: ArrayView3<f64>, grad: ArrayView3<f64>) -> Array3<f64> {
    let mut out = Array3::zeros(b.raw_dim());
    for c in 0..a.dim().0 {
        let (ac, bc, gc) = (
            a.index_axis(Axis(0), c),
            b.index_axis(Axis(0), c),
            grad.index_axis(Axis(0), c),
        );
        let m = moments(ac, bc);
        // SSIM as a function of P = pool(b), Q = pool(b²), R = pool(a·b).
        let mut g_p = Array2::zeros(bc.raw_dim());
        let mut g_q = Array2::zeros(bc.raw_dim());
        let mut g_r = Array2::zeros(bc.raw_dim());
        for (idx, &g) in gc.indexed_iter() {
            let (mu_a, mu_b) = (m.mu_a[idx], m.mu_b[idx]);
            let (a1, a2, b1, b2) = (m.a1[idx], m.a2[idx], m.b1[idx], m.b2[idx]);
            let den = b1 * b2;
            let s = a1 * a2 / den;
            g_p[idx] = g * (2.0 * mu_a * (a2 - a1) / den - 2.0 * mu_b * s * (1.0 / b1 - 1.0 / b2));
            g_q[idx] = g * (-s / b2);
            g_r[idx] = g * (2.0 * a1 / den);
        }
        let back = box3_adjoint(g_p.view())
            + 2.0 * &bc * &box3_adjoint(g_q.view())
            + &ac * &box3_adjoint(g_r.view());
        out.index_axis_mut(Axis(0), c).assign(&back);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array::from_shape_fn((3, 6, 7), |_| rng.gen::<f64>());
        for v in ssim(a.view(), a.view()).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_black_against_white() {
        let a = Array3::zeros((1, 4, 4));
        let b = Array3::ones((1, 4, 4));
        let want = C1 * C2 / ((1.0 + C1) * C2);
        for v in ssim(a.view(), b.view()).iter() {
            assert!((v - want).abs() < 1e-15);
            assert!((v - 1e-4).abs() < 1e-7);
        }
    }

    #[test]
    fn tiny_noise_keeps_ssim_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.1..0.9));
        let b = a.mapv(|v| v + 1e-4 * (rng.gen::<f64>() * 2.0 - 1.0) * 1.7320508);
        let s = ssim(a.view(), b.view());
        assert!(s.mean().unwrap() > 0.99);
    }

    #[test]
    fn box_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array::from_shape_fn((5, 4), |_| rng.gen::<f64>());
        let g = Array::from_shape_fn((5, 4), |_| rng.gen::<f64>());
        let lhs = (box3(x.view()) * &g).sum();
        let rhs = (box3_adjoint(g.view()) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Array::from_shape_fn((2, 5, 6), |_| rng.gen::<f64>());
        let b = Array::from_shape_fn((2, 5, 6), |_| rng.gen::<f64>());
        let g = Array::from_shape_fn((2, 5, 6), |_| rng.gen_range(-1.0..1.0));
        let f = |bb: &Array3<f64>| (ssim(a.view(), bb.view()) * &g).sum();
        let analytic = ssim_vjp_b(a.view(), b.view(), g.view());
        let eps = 1e-6;
        for idx in 0..b.len() {
            let mut p = b.clone();
            let mut m = b.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            m.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{idx}: {fd} vs {an}");
        }
    }
}
