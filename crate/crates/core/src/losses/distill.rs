//! Scale- and shift-invariant distillation against a frozen teacher.

use ndarray::{Array2, ArrayView2, Zip};

use super::sign;
use crate::error::{Error, Result};

/// Fraction of residuals kept after sorting; the largest 20% are discarded.
pub const KEEP_NUMERATOR: usize = 4;
pub const KEEP_DENOMINATOR: usize = 5;

/// A loss value together with its gradient with respect to the student map.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Output of the median/mean-absolute-deviation alignment.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub values: Array2<f64>,
    pub median: f64,
    pub scale: f64,
    /// Flat indices of the order statistics forming the median (one for odd
    /// sizes, two for even).
    median_idx: Vec<usize>,
}


/// Median with the mean-of-central-pair convention for even sizes, plus the
/// flat indices it was taken from.
pub fn median_with_indices(values: &[f64]) -> (f64, Vec<usize>) {
    assert!(!values.is_empty());
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| values[*a].total_cmp(&values[*b]);
    if n % 2 == 1 {
        let (_, m, _) = idx.select_nth_unstable_by(n / 2, cmp);
        let m = *m;
        (values[m], vec![m])
    } else {
        let (lower, upper, _) = idx.select_nth_unstable_by(n / 2, cmp);
        let upper = *upper;
        let lower = *lower
            .iter()
            .max_by(|a, b| values[**a].total_cmp(&values[**b]))
            .unwrap();
        (0.5 * (values[lower] + values[upper]), vec![lower, upper])
    }
}

pub fn median(values: &[f64]) -> f64 {
    median_with_indices(values).0
}

/// `(D − median(D)) / mean(|D − median(D)|)`.
pub fn align_eta(d: ArrayView2<f64>) -> Result<Alignment> {
    let flat: Vec<f64> = d.iter().copied().collect();
    if flat.is_empty() {
        return Err(Error::Degenerate("alignment of an empty map"));
    }
    let (med, median_idx) = median_with_indices(&flat);
    let scale = flat.iter().map(|v| (v - med).abs()).sum::<f64>() / flat.len() as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("alignment of a constant map"));
    }
    Ok(Alignment {
        values: d.mapv(|v| (v - med) / scale),
        median: med,
        scale,
        median_idx,
    })
}

impl Alignment {
    /// Pulls a gradient on the aligned map back to the input map.
    pub fn backward(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        let n = self.values.len() as f64;
        let g_sum: f64 = grad.sum();
        let g_dot: f64 = Zip::from(&grad)
            .and(&self.values)
            .fold(0.0, |acc, &g, &y| acc + g * y);
        // d median / dx_k: 1 on the median element, or 1/2 on each of the pair.
        let dmed = 1.0 / self.median_idx.len() as f64;
        let sign_sum: f64 = self.values.iter().map(|y| sign(*y)).sum();

        // dη_i/dx_j = δ_ij/s − dmed_j/s − η_i·ds_j/s
        // ds_j = sign(η_j)/n − (Σ_k sign(η_k))/n · dmed_j
        let mut out = Zip::from(&grad)
            .and(&self.values)
            .map_collect(|&g, &y| (g - g_dot * sign(y) / n) / self.scale);
        let flat = out.as_slice_mut().expect("standard layout");
        for &k in &self.median_idx {
            flat[k] += dmed * (-g_sum + g_dot * sign_sum / n) / self.scale;
        }
        out
    }
}

fn check_shapes(student: ArrayView2<f64>, teacher: ArrayView2<f64>) {
    assert_eq!(
        student.dim(),
        teacher.dim(),
        "student and teacher maps must share a resolution"
    );
}

/// Trimmed absolute residual between already aligned maps, with the gradient
/// with respect to the aligned student.
pub fn trimmed_on_aligned(student: &Array2<f64>, teacher: &Array2<f64>) -> LossTerm {
    let n = student.len();
    let keep = n * KEEP_NUMERATOR / KEEP_DENOMINATOR;
    let diff: Vec<f64> = student.iter().zip(teacher.iter()).map(|(a, b)| a - b).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| diff[*a].abs().total_cmp(&diff[*b].abs()));
    let denom = 2.0 * n as f64;
    let mut grad = Array2::zeros(student.raw_dim());
    let flat = grad.as_slice_mut().expect("standard layout");
    let mut value = 0.0;
    for &i in &order[..keep] {
        value += diff[i].abs();
        flat[i] = sign(diff[i]) / denom;
    }
    LossTerm {
        value: value / denom,
        grad,
    }
}

/// Forward-difference gradient matching between aligned maps.
pub fn gradient_matching_on_aligned(student: &Array2<f64>, teacher: &Array2<f64>) -> LossTerm {
    let m = student - teacher;
    let (h, w) = m.dim();
    let n = (h * w) as f64;
    let mut grad = Array2::zeros((h, w));
    let mut value = 0.0;
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                let d = m[(i, j + 1)] - m[(i, j)];
                value += d.abs();
                grad[(i, j + 1)] += sign(d) / n;
                grad[(i, j)] -= sign(d) / n;
            }
            if i + 1 < h {
                let d = m[(i + 1, j)] - m[(i, j)];
                value += d.abs();
                grad[(i + 1, j)] += sign(d) / n;
                grad[(i, j)] -= sign(d) / n;
            }
        }
    }
    LossTerm {
        value: value / n,
        grad,
    }
}

/// Trimmed scale-shift-invariant residual, with gradient w.r.t. the student.
pub fn ssi_term(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<LossTerm> {
    check_shapes(student, teacher);
    let s = align_eta(student)?;
    let t = align_eta(teacher)?;
    let term = trimmed_on_aligned(&s.values, &t.values);
    Ok(LossTerm {
        value: term.value,
        grad: s.backward(term.grad.view()),
    })
}

/// Gradient-matching regularizer, with gradient w.r.t. the student.
pub fn gradient_matching_term(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<LossTerm> {
    check_shapes(student, teacher);
    let s = align_eta(student)?;
    let t = align_eta(teacher)?;
    let term = gradient_matching_on_aligned(&s.values, &t.values);
    Ok(LossTerm {
        value: term.value,
        grad: s.backward(term.grad.view()),
    })
}

pub fn ssi_trimmed_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<f64> {
    ssi_term(student, teacher).map(|t| t.value)
}

pub fn gradient_matching_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<f64> {
    gradient_matching_term(student, teacher).map(|t| t.value)
}

#[derive(Debug, Clone)]
pub struct Distillation {
    pub ssi: f64,
    pub reg: f64,
    /// `ssi + reg / 2`.
    pub total: f64,
    /// Gradient of `total` with respect to the student map.
    pub grad: Array2<f64>,
}

/// `L_ssi + ½·L_reg`, sharing one alignment of each map.
pub fn distillation_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<Distillation> {
    check_shapes(student, teacher);
    let s = align_eta(student)?;
    let t = align_eta(teacher)?;
    let ssi = trimmed_on_aligned(&s.values, &t.values);
    let reg = gradient_matching_on_aligned(&s.values, &t.values);
    let aligned_grad = ssi.grad + reg.grad * 0.5;
    Ok(Distillation {
        ssi: ssi.value,
        reg: reg.value,
        total: combine_distillation(ssi.value, reg.value),
        grad: s.backward(aligned_grad.view()),
    })
}

#[inline]
pub fn combine_distillation(ssi: f64, reg: f64) -> f64 {
    ssi + 0.5 * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eta_odd_and_even() {
        let a = align_eta(arr2(&[[1.0, 2.0, 3.0]]).view()).unwrap();
        assert_eq!(a.values, arr2(&[[-1.5, 0.0, 1.5]]));
        let b = align_eta(arr2(&[[1.0, 2.0, 3.0, 4.0]]).view()).unwrap();
        assert_eq!(b.median, 2.5);
        assert_eq!(b.values, arr2(&[[-1.5, -0.5, 0.5, 1.5]]));
        assert!(matches!(
            align_eta(arr2(&[[4.0, 4.0]]).view()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn eta_is_scale_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Array::from_shape_fn((6, 5), |_| rng.gen::<f64>());
        let a = align_eta(d.view()).unwrap();
        let b = align_eta(d.mapv(|v| 3.7 * v - 2.0).view()).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn trimmed_loss_hand_example() {
        // Aligned residuals [0.1, 0.2, 0.3, 0.4, 10]: keep four, divide by 2N = 10.
        let s = arr2(&[[0.1, 0.2, 0.3, 0.4, 10.0]]);
        let t = Array2::zeros((1, 5));
        let term = trimmed_on_aligned(&s, &t);
        assert!((term.value - 0.1).abs() < 1e-15);
        assert_eq!(term.grad[(0, 4)], 0.0);
    }

    #[test]
    fn affine_student_has_zero_ssi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Array::from_shape_fn((8, 8), |_| rng.gen::<f64>());
        let s = t.mapv(|v| 2.0 * v + 0.1);
        assert!(ssi_trimmed_loss(s.view(), t.view()).unwrap() < 1e-12);
        assert!(ssi_trimmed_loss(t.view(), t.view()).unwrap() == 0.0);
    }

    #[test]
    fn gradient_matching_on_a_ramp() {
        // Aligned maps differ by k·x: each of the H·(W−1) horizontal pairs
        // contributes k, vertical pairs contribute nothing.
        let (h, w, k) = (4usize, 6usize, 0.3);
        let t = Array2::zeros((h, w));
        let s = Array::from_shape_fn((h, w), |(_, j)| k * j as f64);
        let term = gradient_matching_on_aligned(&s, &t);
        let want = k * (h * (w - 1)) as f64 / (h * w) as f64;
        assert!((term.value - want).abs() < 1e-12);
    }

    #[test]
    fn distillation_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Array::from_shape_fn((8, 8), |_| rng.gen::<f64>());
        let t = Array::from_shape_fn((8, 8), |_| rng.gen::<f64>());
        let d = distillation_loss(s.view(), t.view()).unwrap();
        let ssi = ssi_trimmed_loss(s.view(), t.view()).unwrap();
        let reg = gradient_matching_loss(s.view(), t.view()).unwrap();
        assert!((d.total - (ssi + 0.5 * reg)).abs() < 1e-12);
        assert!((combine_distillation(0.1, 0.2) - 0.2).abs() < 1e-15);
    }

    fn check_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, grad: &Array2<f64>) {
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            m.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let an = grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn alignment_backward_matches_finite_differences() {
        for (seed, (h, w)) in [(1u64, (5, 5)), (2, (4, 6))] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array::from_shape_fn((h, w), |_| rng.gen::<f64>());
            let g = Array::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0));
            let f = |v: &Array2<f64>| (align_eta(v.view()).unwrap().values * &g).sum();
            let grad = align_eta(x.view()).unwrap().backward(g.view());
            check_grad(f, &x, &grad);
        }
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = Array::from_shape_fn((6, 7), |_| rng.gen::<f64>());
        let t = Array::from_shape_fn((6, 7), |_| rng.gen::<f64>());
        let d = distillation_loss(s.view(), t.view()).unwrap();
        check_grad(|v| distillation_loss(v.view(), t.view()).unwrap().total, &s, &d.grad);
    }
}
