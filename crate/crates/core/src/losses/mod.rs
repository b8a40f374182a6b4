//! Training objectives. Every term can report its gradient with respect to
//! the maps the student produces.

pub mod consistency;
pub mod distill;
pub mod photometric;
pub mod smoothness;
pub mod ssim;
pub mod total;

pub use consistency::{
    consistency_with_gradients, matched_region, scale_consistency_loss, Consistency,
    ConsistencyGradients, ConsistencyPair,
};
pub use distill::{
    align_eta, distillation_loss, gradient_matching_loss, gradient_matching_on_aligned,
    gradient_matching_term, median, ssi_term, ssi_trimmed_loss, trimmed_on_aligned, Alignment,
    Distillation, LossTerm,
};
pub use photometric::{
    photometric_loss, photometric_pair_loss, photometric_pair_loss_vjp, PhotometricLoss, ALPHA,
};
pub use smoothness::{smoothness_loss, smoothness_term};
pub use ssim::ssim;
pub use total::{total_loss, LossBreakdown, LossParts, LossTermKind, LossWeights};

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
