//! Small U-Net student producing normalized disparity in (0, 1).

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{self, Adam, Conv2d, ConvCache, ConvGrad, Tensor};
use crate::error::{Error, Result};
use crate::geometry::DepthRange;

pub const PARAMETER_BUDGET: usize = 500_000;

/// RGB plus two normalized pixel-coordinate channels.
const INPUT_CHANNELS: usize = 5;
const IMAGE_MEAN: f64 = 0.45;
const IMAGE_STD: f64 = 0.225;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    /// Width of the first encoder stage; later stages use 2× and 4×.
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output value at initialization (the head bias is set to its logit).
    pub initial_output: f64,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            base_channels: 16,
            height: 64,
            width: 96,
            initial_output: DepthRange::default().normalized_disparity(3.0),
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "student needs base_channels > 0 and at least 8×8 input, got {}ch {}×{}",
                self.base_channels, self.height, self.width
            )));
        }
        if !(self.initial_output > 0.0 && self.initial_output < 1.0) {
            return Err(Error::Config("student initial_output must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudent {
    pub config: StudentConfig,
    /// enc1..enc4, dec3, dec2, dec1, head.
    layers: Vec<Conv2d>,
}

/// Intermediate activations of one batched forward pass.
pub struct StudentCache {
    acts: Vec<Tensor>,
    convs: Vec<ConvCache>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ToyStudent {
    pub fn new(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = vec![
            Conv2d::new(INPUT_CHANNELS, c, 2, &mut rng),
            Conv2d::new(c, 2 * c, 2, &mut rng),
            Conv2d::new(2 * c, 4 * c, 2, &mut rng),
            Conv2d::new(4 * c, 4 * c, 1, &mut rng),
            Conv2d::new(6 * c, 2 * c, 1, &mut rng),
            Conv2d::new(3 * c, c, 1, &mut rng),
            Conv2d::new(c + INPUT_CHANNELS, c, 1, &mut rng),
            Conv2d::new(c, 1, 1, &mut rng),
        ];
        let head = layers.last_mut().expect("head layer");
        head.weight.mapv_inplace(|w| 0.1 * w);
        head.bias.fill(logit(config.initial_output) as f32);
        let student = ToyStudent { config, layers };
        let n = student.parameter_count();
        if n > PARAMETER_BUDGET {
            return Err(Error::Config(format!(
                "student has {n} parameters, above the budget of {PARAMETER_BUDGET}"
            )));
        }
        Ok(student)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Conv2d::parameter_count).sum()
    }

    pub fn layers(&self) -> Vec<&Conv2d> {
        self.layers.iter().collect()
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.layers.iter().map(ConvGrad::zeros_like).collect()
    }

    pub fn optimizer(&self, lr: f64) -> Adam {
        Adam::new(&self.layers(), lr)
    }

    pub fn apply(&mut self, opt: &mut Adam, grads: &[ConvGrad]) {
        let mut refs: Vec<&mut Conv2d> = self.layers.iter_mut().collect();
        opt.update(&mut refs, grads);
    }

    /// SHA-256 over all parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn input(&self, images: &[ArrayView3<f64>]) -> Result<Tensor> {
        let (h, w) = (self.config.height, self.config.width);
        let mut x = Tensor::zeros((INPUT_CHANNELS, images.len(), h, w));
        for (b, img) in images.iter().enumerate() {
            if img.dim() != (3, h, w) {
                return Err(Error::Data(format!(
                    "student expects 3×{h}×{w} images, got {:?}",
                    img.dim()
                )));
            }
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        x[(c, b, i, j)] = ((img[(c, i, j)] - IMAGE_MEAN) / IMAGE_STD) as f32;
                    }
                }
            }
            for i in 0..h {
                for j in 0..w {
                    x[(3, b, i, j)] = (2.0 * j as f64 / (w - 1) as f64 - 1.0) as f32;
                    x[(4, b, i, j)] = (2.0 * i as f64 / (h - 1) as f64 - 1.0) as f32;
                }
            }
        }
        Ok(x)
    }

    /// Batched forward pass; returns `[B, H, W]` outputs in (0, 1) and the
    /// activations needed by [`ToyStudent::backward`].
    pub fn forward(&self, images: &[ArrayView3<f64>]) -> Result<(Array3<f64>, StudentCache)> {
        let x0 = self.input(images)?;
        let l = &self.layers;
        let mut convs = Vec::with_capacity(8);
        let mut acts: Vec<Tensor> = Vec::with_capacity(8);
        let run = |layer: &Conv2d, x: &Tensor, convs: &mut Vec<ConvCache>| {
            let (y, cache) = layer.forward(x.view());
            convs.push(cache);
            y
        };
        let e1 = nn::elu(&run(&l[0], &x0, &mut convs));
        let e2 = nn::elu(&run(&l[1], &e1, &mut convs));
        let e3 = nn::elu(&run(&l[2], &e2, &mut convs));
        let e4 = nn::elu(&run(&l[3], &e3, &mut convs));
        let (_, _, h2, w2) = e2.dim();
        let (_, _, h1, w1) = e1.dim();
        let (_, _, h0, w0) = x0.dim();
        let c3 = nn::concat(&nn::upsample2(&e4, h2, w2), &e2);
        let d3 = nn::elu(&run(&l[4], &c3, &mut convs));
        let c2 = nn::concat(&nn::upsample2(&d3, h1, w1), &e1);
        let d2 = nn::elu(&run(&l[5], &c2, &mut convs));
        let c1 = nn::concat(&nn::upsample2(&d2, h0, w0), &x0);
        let d1 = nn::elu(&run(&l[6], &c1, &mut convs));
        let out = nn::sigmoid(&run(&l[7], &d1, &mut convs));
        let result = out.index_axis(Axis(0), 0).mapv(f64::from);
        if result.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("student forward", "non-finite output"));
        }
        acts.extend([e1, e2, e3, e4, d3, d2, d1, out]);
        Ok((result, StudentCache { acts, convs }))
    }

    pub fn predict(&self, image: ArrayView3<f64>) -> Result<Array2<f64>> {
        let (out, _) = self.forward(&[image])?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Parameter gradients for `grad` = dL/d(output) of shape `[B, H, W]`.
    pub fn backward(&self, cache: &StudentCache, grad: &Array3<f64>) -> Vec<ConvGrad> {
        let l = &self.layers;
        let c = self.config.base_channels;
        let mut grads = self.zero_grads();
        let [e1, e2, e3, e4, d3, d2, d1, out] = cache.acts.as_slice() else {
            unreachable!("forward stores eight activations")
        };
        let cv = &cache.convs;
        let g = grad.mapv(|v| v as f32).insert_axis(Axis(0));
        let g = nn::sigmoid_backward(&g, out);
        let g_d1 = l[7].backward(&g, &cv[7], &mut grads[7]);

        let g = nn::elu_backward(&g_d1, d1);
        let g_c1 = l[6].backward(&g, &cv[6], &mut grads[6]);
        let (g_up, _) = nn::split(&g_c1, c);
        let g_d2 = nn::upsample2_backward(&g_up, d2.dim().2, d2.dim().3);

        let g = nn::elu_backward(&g_d2, d2);
        let g_c2 = l[5].backward(&g, &cv[5], &mut grads[5]);
        let (g_up, g_e1_skip) = nn::split(&g_c2, 2 * c);
        let g_d3 = nn::upsample2_backward(&g_up, d3.dim().2, d3.dim().3);

        let g = nn::elu_backward(&g_d3, d3);
        let g_c3 = l[4].backward(&g, &cv[4], &mut grads[4]);
        let (g_up, g_e2_skip) = nn::split(&g_c3, 4 * c);
        let g_e4 = nn::upsample2_backward(&g_up, e4.dim().2, e4.dim().3);

        let g = nn::elu_backward(&g_e4, e4);
        let g_e3 = l[3].backward(&g, &cv[3], &mut grads[3]);
        let g = nn::elu_backward(&g_e3, e3);
        let g_e2 = l[2].backward(&g, &cv[2], &mut grads[2]) + &g_e2_skip;
        let g = nn::elu_backward(&g_e2, e2);
        let g_e1 = l[1].backward(&g, &cv[1], &mut grads[1]) + &g_e1_skip;
        let g = nn::elu_backward(&g_e1, e1);
        let _ = l[0].backward(&g, &cv[0], &mut grads[0]);
        grads
    }
}
