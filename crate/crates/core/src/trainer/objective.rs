//! Per-triplet training objective: the weighted sum of the four loss terms
//! and its gradient with respect to the three student output maps.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::dataio::MapKind;
use crate::error::{Error, Result};
use crate::geometry::{
    minmax_normalize, warp_depth, warp_image, CameraIntrinsics, DepthMap, DepthRange, MinMax, PoseSE3,
};
use crate::losses::{
    consistency_with_gradients, distillation_loss, matched_region, photometric_loss, smoothness_term,
    total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::models::{upsample_prediction, upsample_prediction_backward, TeacherPrediction};

use super::config::Normalization;

/// Inputs for one target frame and its two neighbors, all at student
/// resolution except the teacher map.
#[derive(Clone, Copy)]
pub struct TripletView<'a> {
    pub target: ArrayView3<'a, f64>,
    pub sources: [ArrayView3<'a, f64>; 2],
    pub rel_poses: &'a [PoseSE3; 2],
    pub intrinsics: &'a CameraIntrinsics,
    pub teacher: &'a TeacherPrediction,
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub breakdown: LossBreakdown,
    /// dL/d(student output) for the target frame.
    pub grad_target: Array2<f64>,
    /// dL/d(student output) for each neighbor.
    pub grad_sources: [Array2<f64>; 2],
    /// Fraction of target pixels kept by the auto-mask.
    pub automask_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub range: DepthRange,
    pub normalization: Normalization,
}

/// A student output mapped to metric depth, with what the backward pass needs.
pub struct MetricDepth {
    pub depth: DepthMap,
    /// d depth / d normalized disparity, per pixel.
    ddepth: Array2<f64>,
    minmax: Option<MinMax>,
    pub degenerate: bool,
}

impl MetricDepth {
    /// Chains a gradient on depth back to the raw student output.
    pub fn backward(&self, grad_depth: ArrayView2<f64>) -> Array2<f64> {
        let g = &grad_depth * &self.ddepth;
        match &self.minmax {
            Some(m) => m.backward(g.view()),
            None => g,
        }
    }
}

impl Objective {
    pub fn to_depth(&self, output: ArrayView2<f64>) -> Result<MetricDepth> {
        let (x, minmax, degenerate) = match self.normalization {
            Normalization::Identity => (output.to_owned(), None, false),
            Normalization::MinMax => {
                let m = minmax_normalize(output);
                (m.values.clone(), Some(m.clone()), m.degenerate)
            }
        };
        let r = self.range;
        let depth = DepthMap::dense(x.mapv(|v| r.depth(v.clamp(0.0, 1.0))))?;
        Ok(MetricDepth {
            depth,
            ddepth: x.mapv(|v| r.depth_derivative(v.clamp(0.0, 1.0))),
            minmax,
            degenerate,
        })
    }

    /// Loss and output gradients for one triplet.
    ///
    /// `outputs` are the raw student maps for target, first and second
    /// neighbor.
    pub fn evaluate(&self, view: TripletView<'_>, outputs: [ArrayView2<f64>; 3]) -> Result<TripletLoss> {
        let w = self.weights;
        let [s_t, s_a, s_b] = outputs;
        let (h, wd) = s_t.dim();
        let target = self.to_depth(s_t)?;
        let mut grad_depth_t = Array2::<f64>::zeros((h, wd));
        let mut grad_out_t = Array2::<f64>::zeros((h, wd));
        let mut grad_out_src = [Array2::<f64>::zeros((h, wd)), Array2::<f64>::zeros((h, wd))];
        let mut parts = LossParts::default();

        let warped: Vec<_> = (0..2)
            .map(|k| warp_image(view.sources[k], &target.depth, view.intrinsics, &view.rel_poses[k]))
            .collect();
        let photo = photometric_loss(view.target, &view.sources, &warped);
        let photo_usable = !target.degenerate && !photo.skipped;
        if photo_usable {
            parts.photo = Some(photo.loss);
            grad_depth_t += &photo.depth_gradient(view.target, &warped);
        }

        parts.distill = self.distill_into(view.teacher, s_t, &target, &mut grad_out_t, &mut grad_depth_t)?;

        let smooth = smoothness_term(s_t, view.target);
        parts.smooth = Some(smooth.value);
        if w.smooth != 0.0 {
            grad_out_t.scaled_add(w.smooth, &smooth.grad);
        }

        if photo_usable {
            let a = self.to_depth(s_a)?;
            let b = self.to_depth(s_b)?;
            if !a.degenerate && !b.degenerate {
                let neighbors = [a, b];
                let warps: Vec<_> = (0..2)
                    .map(|k| warp_depth(&neighbors[k].depth, &target.depth, view.intrinsics, &view.rel_poses[k]))
                    .collect();
                let regions: Vec<_> = warps
                    .iter()
                    .map(|dw| matched_region(dw, photo.automask.view()))
                    .collect();
                let cons = consistency_with_gradients(&warps, &regions);
                if !cons.loss.skipped {
                    parts.consistency = Some(cons.loss.value);
                    if w.consistency != 0.0 {
                        grad_depth_t.scaled_add(w.consistency, &cons.target);
                        for k in 0..2 {
                            let g = cons.sources[k].mapv(|v| v * w.consistency);
                            grad_out_src[k] = neighbors[k].backward(g.view());
                        }
                    }
                }
            }
        }

        let breakdown = total_loss(&parts, &w);
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::numerical(format!("{term} loss"), "non-finite value"));
        }
        grad_out_t += &target.backward(grad_depth_t.view());
        let grads_finite = grad_out_t
            .iter()
            .chain(grad_out_src.iter().flat_map(|g| g.iter()))
            .all(|v| v.is_finite());
        if !grads_finite {
            return Err(Error::numerical("loss gradient", "non-finite value"));
        }
        let automask_fraction = photo.count as f64 / (h * wd) as f64;
        Ok(TripletLoss {
            breakdown,
            grad_target: grad_out_t,
            grad_sources: grad_out_src,
            automask_fraction,
        })
    }

    /// Distillation term. Inverse-depth teachers are compared with the raw
    /// output, depth teachers with the metric depth; both at teacher
    /// resolution. The gradient is only accumulated when the weight is
    /// nonzero so a zero weight is exactly equivalent to omitting the term.
    fn distill_into(
        &self,
        teacher: &TeacherPrediction,
        s_t: ArrayView2<f64>,
        target: &MetricDepth,
        grad_out: &mut Array2<f64>,
        grad_depth: &mut Array2<f64>,
    ) -> Result<Option<(f64, f64)>> {
        let (h, w) = s_t.dim();
        let (th, tw) = teacher.resolution();
        let student_map = match teacher.kind() {
            MapKind::InverseDepth => s_t,
            MapKind::Depth => target.depth.values.view(),
        };
        let up = upsample_prediction(student_map, th, tw);
        let d = match distillation_loss(up.view(), teacher.values().view()) {
            Ok(d) => d,
            Err(Error::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        if self.weights.distill != 0.0 {
            let g = upsample_prediction_backward(d.grad.view(), h, w);
            match teacher.kind() {
                MapKind::InverseDepth => grad_out.scaled_add(self.weights.distill, &g),
                MapKind::Depth => grad_depth.scaled_add(self.weights.distill, &g),
            }
        }
        Ok(Some((d.ssi, d.reg)))
    }

    /// Photometric term alone, used for validation.
    pub fn photometric(&self, view: TripletView<'_>, s_t: ArrayView2<f64>) -> Result<Option<f64>> {
        let target = self.to_depth(s_t)?;
        if target.degenerate {
            return Ok(None);
        }
        let warped: Vec<_> = (0..2)
            .map(|k| warp_image(view.sources[k], &target.depth, view.intrinsics, &view.rel_poses[k]))
            .collect();
        let photo = photometric_loss(view.target, &view.sources, &warped);
        Ok((!photo.skipped).then_some(photo.loss))
    }

    /// Unweighted distillation value and output gradient, for the warm-up
    /// stage.
    pub fn distill_only(&self, teacher: &TeacherPrediction, s_t: ArrayView2<f64>) -> Result<Option<(f64, Array2<f64>)>> {
        let only = Objective {
            weights: LossWeights {
                distill: 1.0,
                smooth: 0.0,
                consistency: 0.0,
            },
            ..*self
        };
        let target = only.to_depth(s_t)?;
        let mut grad_out = Array2::zeros(s_t.raw_dim());
        let mut grad_depth = Array2::zeros(s_t.raw_dim());
        let Some((ssi, reg)) = only.distill_into(teacher, s_t, &target, &mut grad_out, &mut grad_depth)? else {
            return Ok(None);
        };
        grad_out += &target.backward(grad_depth.view());
        Ok(Some((crate::losses::distill::combine_distillation(ssi, reg), grad_out)))
    }
}
