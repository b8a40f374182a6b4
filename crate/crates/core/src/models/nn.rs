//! Minimal f32 layers with hand-written backward passes.
//!
//! Activations use a channel-major batch layout `[C, B, H, W]` so that a
//! convolution over the whole batch is a single matrix product.

use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Tensor = Array4<f32>;

/// 3×3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// `[cout, cin·9]`, column index `ci·9 + ky·3 + kx`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f32>,
    in_hw: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn im2col(x: ArrayView4<f32>, stride: usize) -> Array2<f32> {
    let (c, b, h, w) = x.dim();
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let n = b * oh * ow;
    let mut cols = Array2::zeros((c * 9, n));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for bi in 0..b {
                    let plane = x.slice(s![ci, bi, .., ..]);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane.row(iy as usize);
                        let base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                row[base + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, c: usize, b: usize, h: usize, w: usize, stride: usize) -> Tensor {
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let mut x = Tensor::zeros((c, b, h, w));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ci * 9 + ky * 3 + kx);
                let row = row.as_slice().expect("standard layout");
                for bi in 0..b {
                    let mut plane = x.slice_mut(s![ci, bi, .., ..]);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let mut dst = plane.row_mut(iy as usize);
                        let base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (cin * 9) as f64).sqrt() as f32;
        Conv2d {
            cin,
            cout,
            stride,
            weight: Array2::from_shape_simple_fn((cout, cin * 9), || rng.gen_range(-bound..bound)),
            bias: Array1::zeros(cout),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView4<f32>) -> (Tensor, ConvCache) {
        let (c, b, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = (out_size(h, self.stride), out_size(w, self.stride));
        let cols = im2col(x, self.stride);
        let mut y = self.weight.dot(&cols);
        for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += bias;
        }
        let y = y
            .into_shape_with_order((self.cout, b, oh, ow))
            .expect("contiguous product");
        (y, ConvCache { cols, in_hw: (h, w) })
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    pub fn backward(&self, dy: &Tensor, cache: &ConvCache, grad: &mut ConvGrad) -> Tensor {
        let (cout, b, oh, ow) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((cout, b * oh * ow))
            .expect("contiguous gradient");
        grad.weight += &dy2.dot(&cache.cols.t());
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&dy2);
        let (h, w) = cache.in_hw;
        col2im(&dcols, self.cin, b, h, w, self.stride)
    }
}

pub fn elu(x: &Tensor) -> Tensor {
    x.mapv(|v| if v > 0.0 { v } else { v.exp_m1() })
}

/// Backward of [`elu`] given its output `y`.
pub fn elu_backward(dy: &Tensor, y: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g *= v + 1.0;
        }
    });
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(dy: &Tensor, y: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
    dx
}

/// Nearest-neighbor upsampling onto an `(h, w)` grid (`i → i/2`).
pub fn upsample2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, b, xh, xw) = x.dim();
    Tensor::from_shape_fn((c, b, h, w), |(ci, bi, i, j)| {
        x[(ci, bi, (i / 2).min(xh - 1), (j / 2).min(xw - 1))]
    })
}

pub fn upsample2_backward(dy: &Tensor, xh: usize, xw: usize) -> Tensor {
    let (c, b, h, w) = dy.dim();
    let mut dx = Tensor::zeros((c, b, xh, xw));
    for ci in 0..c {
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    dx[(ci, bi, (i / 2).min(xh - 1), (j / 2).min(xw - 1))] += dy[(ci, bi, i, j)];
                }
            }
        }
    }
    dx
}

/// Channel concatenation.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial shape")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    (
        g.slice(s![..first, .., .., ..]).to_owned(),
        g.slice(s![first.., .., .., ..]).to_owned(),
    )
}

/// First-order adaptive-moment optimizer state for a list of conv layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<(Array2<f32>, Array1<f32>)>,
    v: Vec<(Array2<f32>, Array1<f32>)>,
}

impl Adam {
    pub fn new(layers: &[&Conv2d], lr: f64) -> Self {
        let zeros = || {
            layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, layers: &mut [&mut Conv2d], grads: &[ConvGrad]) {
        assert_eq!(layers.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (i, (layer, g)) in layers.iter_mut().zip(grads).enumerate() {
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            adam_slice(&mut layer.weight, &g.weight, mw, vw, b1, b2, lr, eps);
            adam_slice(&mut layer.bias, &g.bias, mb, vb, b1, b2, lr, eps);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_slice<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f32, D>,
    g: &ndarray::Array<f32, D>,
    m: &mut ndarray::Array<f32, D>,
    v: &mut ndarray::Array<f32, D>,
    b1: f32,
    b2: f32,
    lr: f32,
    eps: f32,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * *m / (v.sqrt() + eps);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution, for comparison.
    fn conv_naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (_, b, h, w) = x.dim();
        let s = conv.stride;
        let (oh, ow) = (out_size(h, s), out_size(w, s));
        Tensor::from_shape_fn((conv.cout, b, oh, ow), |(co, bi, oy, ox)| {
            let mut acc = conv.bias[co];
            for ci in 0..conv.cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * s + ky) as isize - 1;
                        let ix = (ox * s + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight[(co, ci * 9 + ky * 3 + kx)]
                                * x[(ci, bi, iy as usize, ix as usize)];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut conv = Conv2d::new(3, 4, stride, &mut rng);
            conv.bias = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0));
            let x = random((3, 2, 7, 5), &mut rng);
            let (y, _) = conv.forward(x.view());
            let want = conv_naive(&conv, &x);
            assert_eq!(y.dim(), want.dim());
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, J dx> = <J^T dy, dx> for the input and weight gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for stride in [1, 2] {
            let conv = Conv2d::new(2, 3, stride, &mut rng);
            let x = random((2, 2, 6, 5), &mut rng);
            let (y, cache) = conv.forward(x.view());
            let dy = random(y.dim(), &mut rng);
            let mut g = ConvGrad::zeros_like(&conv);
            let dx = conv.backward(&dy, &cache, &mut g);
            let dxp = random(x.dim(), &mut rng);
            let mut zero_bias = conv.clone();
            zero_bias.bias.fill(0.0);
            let (jdx, _) = zero_bias.forward(dxp.view());
            let lhs: f32 = (&dy * &jdx).sum();
            let rhs: f32 = (&dx * &dxp).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} {rhs}");

            let dw = Array2::from_shape_simple_fn(conv.weight.raw_dim(), || rng.gen_range(-1.0..1.0));
            let mut wconv = zero_bias.clone();
            wconv.weight = dw.clone();
            let (jw, _) = wconv.forward(x.view());
            let lhs: f32 = (&dy * &jw).sum();
            let rhs: f32 = (&g.weight * &dw).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
            let bias_sum: f32 = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(1)).sum();
            assert!((g.bias.sum() - bias_sum).abs() < 1e-3);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random((2, 1, 3, 4), &mut rng);
        let y = upsample2(&x, 5, 8);
        let dy = random(y.dim(), &mut rng);
        let dx = upsample2_backward(&dy, 3, 4);
        assert!(((&y * &dy).sum() - (&x * &dx).sum()).abs() < 1e-4);
    }

    #[test]
    fn activations_backward_match_finite_differences() {
        let xs = [-2.0f32, -0.3, 0.4, 1.5];
        for &x in &xs {
            let t = Tensor::from_elem((1, 1, 1, 1), x);
            let one = Tensor::ones((1, 1, 1, 1));
            let eps = 1e-3;
            let fd = |f: &dyn Fn(&Tensor) -> Tensor| {
                (f(&Tensor::from_elem((1, 1, 1, 1), x + eps))[(0, 0, 0, 0)]
                    - f(&Tensor::from_elem((1, 1, 1, 1), x - eps))[(0, 0, 0, 0)])
                    / (2.0 * eps)
            };
            let e = elu_backward(&one, &elu(&t))[(0, 0, 0, 0)];
            assert!((e - fd(&elu)).abs() < 1e-3);
            let s = sigmoid_backward(&one, &sigmoid(&t))[(0, 0, 0, 0)];
            assert!((s - fd(&sigmoid)).abs() < 1e-3);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(1, 1, 1, &mut rng);
        let before = conv.weight.clone();
        let mut opt = Adam::new(&[&conv], 0.01);
        let mut g = ConvGrad::zeros_like(&conv);
        g.weight.fill(3.0);
        g.bias.fill(-2.0);
        opt.update(&mut [&mut conv], &[g]);
        for (a, b) in conv.weight.iter().zip(before.iter()) {
            assert!((b - a - 0.01).abs() < 1e-6);
        }
        assert!((conv.bias[0] - 0.01).abs() < 1e-6);
    }
}
