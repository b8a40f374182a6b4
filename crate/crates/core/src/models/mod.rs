//! Teacher and student depth networks and the resolution adapter between
//! them.

pub mod nn;
pub mod student;
pub mod teacher;

use ndarray::{Array2, ArrayView2};

use crate::raster::{resize_bilinear, resize_bilinear_adjoint};

pub use student::{StudentConfig, ToyStudent, PARAMETER_BUDGET};
pub use teacher::{AdapterTeacher, PrecomputedTeacher, PredictionSource, Teacher, TeacherPrediction};

/// Corner-aligned bilinear upsampling of a student map to `(height, width)`.
pub fn upsample_prediction(d: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    resize_bilinear(d, height, width)
}

/// Pulls a gradient at the upsampled resolution back to the student map of
/// shape `(height, width)`.
pub fn upsample_prediction_backward(grad: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    resize_bilinear_adjoint(grad, height, width)
}
