//! Frozen teacher backends. Predictions are immutable values; nothing in the
//! training loop can reach back into a teacher.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, mapfile, MapKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Network,
    PrecomputedFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPrediction {
    values: Array2<f64>,
    kind: MapKind,
    source: PredictionSource,
}

impl TeacherPrediction {
    pub fn new(values: Array2<f64>, kind: MapKind, source: PredictionSource) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("teacher prediction must be finite and non-negative".into()));
        }
        Ok(TeacherPrediction { values, kind, source })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn source(&self) -> PredictionSource {
        self.source
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// A frozen depth network. `frame_id` identifies the frame for backends
/// that key predictions by frame.
pub trait Teacher: Send + Sync {
    fn predict(&self, frame_id: usize, image: ArrayView3<f64>) -> Result<TeacherPrediction>;
}

/// Reads `<dir>/<frame id>.bin` files written in the map format.
#[derive(Debug, Clone)]
pub struct PrecomputedTeacher {
    dir: PathBuf,
}

impl PrecomputedTeacher {
    pub fn new(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "missing teacher directory: {}",
                dir.display()
            )));
        }
        Ok(PrecomputedTeacher {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path_for(&self, frame_id: usize) -> PathBuf {
        self.dir.join(format!("{}.bin", dataio::frame_stem(frame_id)))
    }
}

impl Teacher for PrecomputedTeacher {
    fn predict(&self, frame_id: usize, _image: ArrayView3<f64>) -> Result<TeacherPrediction> {
        let path = self.path_for(frame_id);
        if !path.exists() {
            return Err(Error::Data(format!(
                "no teacher prediction for frame {frame_id}: missing {}",
                path.display()
            )));
        }
        let map = mapfile::read_map(&path)?;
        TeacherPrediction::new(map.values.mapv(f64::from), map.kind, PredictionSource::PrecomputedFile)
    }
}

/// Wraps an external model given as a closure from a teacher-resolution
/// image to its raw output.
pub struct AdapterTeacher<F> {
    model: F,
    kind: MapKind,
}

impl<F> AdapterTeacher<F>
where
    F: Fn(ArrayView3<f64>) -> Result<Array2<f64>> + Send + Sync,
{
    pub fn new(model: F, kind: MapKind) -> Self {
        AdapterTeacher { model, kind }
    }
}

impl<F> Teacher for AdapterTeacher<F>
where
    F: Fn(ArrayView3<f64>) -> Result<Array2<f64>> + Send + Sync,
{
    fn predict(&self, _frame_id: usize, image: ArrayView3<f64>) -> Result<TeacherPrediction> {
        TeacherPrediction::new((self.model)(image)?, self.kind, PredictionSource::Network)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn precomputed_teacher_returns_stored_bits() {
        let dir = tempfile::tempdir().unwrap();
        let values = Array2::from_shape_fn((3, 4), |(i, j)| 0.1 + (i * 4 + j) as f32 / 7.0);
        mapfile::write_map(&dir.path().join("000005.bin"), MapKind::InverseDepth, &values).unwrap();
        let t = PrecomputedTeacher::new(dir.path()).unwrap();
        let img = Array3::zeros((3, 3, 4));
        let p = t.predict(5, img.view()).unwrap();
        assert_eq!(p.kind(), MapKind::InverseDepth);
        assert_eq!(p.source(), PredictionSource::PrecomputedFile);
        for (a, b) in p.values().iter().zip(values.iter()) {
            assert_eq!((*a as f32).to_bits(), b.to_bits());
        }
        let err = t.predict(6, img.view()).unwrap_err();
        assert!(err.to_string().contains("frame 6"), "{err}");
    }

    #[test]
    fn adapter_passes_through_kind() {
        let t = AdapterTeacher::new(
            |img: ArrayView3<f64>| Ok(Array2::from_elem((img.dim().1, img.dim().2), 2.0)),
            MapKind::Depth,
        );
        let p = t.predict(0, Array3::zeros((3, 2, 2)).view()).unwrap();
        assert_eq!(p.kind(), MapKind::Depth);
        assert_eq!(p.resolution(), (2, 2));
    }
}
