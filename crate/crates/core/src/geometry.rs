//! Pinhole camera geometry used by view synthesis.
//!
//! Every differentiable operation here returns enough intermediate state for
//! its own vector-Jacobian product. Warps have a diagonal Jacobian with respect
//! to the target depth (each output pixel only depends on the depth at that
//! pixel), so those derivatives are stored densely next to the outputs.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Points whose depth in the source camera falls at or below this are treated
/// as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-3;

const SE3_TOLERANCE: f64 = 1e-9;

/// Round-off allowance when deciding whether a projection landed on the image
/// border; accepted coordinates are clamped onto it.
const BOUNDS_SLACK: f64 = 1e-9;

/// Projections closer than this to a pixel center are treated as landing on it.
const LATTICE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Rescales to a new image size: fx, cx by W'/W and fy, cy by H'/H.
    pub fn scaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Viewing ray through pixel (u, v), normalized so that z = 1.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// Rigid transform with metric translation. Applied as `R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(orth <= SE3_TOLERANCE && (det - 1.0).abs() <= SE3_TOLERANCE)
            || !translation.iter().all(|x| x.is_finite())
        {
            return Err(Error::Data(format!(
                "not a rigid transform (orthogonality error {orth:e}, det {det})"
            )));
        }
        Ok(PoseSE3 {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: *q.to_rotation_matrix().matrix(),
            translation,
        }
    }

    /// Yaw-pitch-roll about the camera y, x and z axes (applied in that order).
    pub fn from_euler_yxz(yaw: f64, pitch: f64, roll: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch)
            * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll);
        Self::from_quaternion(q, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Largest absolute entry difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

/// Non-negative, finite inverse depth (1/m) on an H×W grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap(Array2<f64>);

impl InverseDepthMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(InverseDepthMap(values))
        } else {
            Err(Error::Data(
                "inverse depth must be finite and non-negative".into(),
            ))
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Metric depth with a validity mask. Values are positive wherever valid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl DepthMap {
    /// A fully valid map; all values must be positive and finite.
    pub fn dense(values: Array2<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Data("dense depth must be positive and finite".into()));
        }
        let valid = Array2::from_elem(values.dim(), true);
        Ok(DepthMap { values, valid })
    }

    /// Builds a map treating non-positive or non-finite entries as invalid.
    pub fn from_values_with_zero_invalid(mut values: Array2<f64>) -> Self {
        let valid = values.mapv(|v| v.is_finite() && v > 0.0);
        values.zip_mut_with(&valid, |v, &ok| {
            if !ok {
                *v = 0.0
            }
        });
        DepthMap { values, valid }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Continuous source-pixel coordinates for every target pixel, plus the data
/// needed to differentiate them with respect to the target depth.
#[derive(Debug, Clone)]
pub struct PixelGrid {
    /// `[H, W, 2]` holding (u, v) = (column, row).
    pub coords: Array3<f64>,
    pub in_bounds: Array2<bool>,
    /// z of the target point expressed in the source camera.
    pub source_z: Array2<f64>,
    /// `[H, W, 2]` derivative of (u, v) with respect to the target depth.
    pub dcoords_ddepth: Array3<f64>,
    /// Derivative of `source_z` with respect to the target depth.
    pub dz_ddepth: Array2<f64>,
    /// Source image size (width, height).
    pub source_size: (usize, usize),
}

/// Result of Min-Max normalization, keeping what the backward pass needs.
#[derive(Debug, Clone)]
pub struct MinMax {
    pub values: Array2<f64>,
    /// Set when the input is constant; `values` is then all zeros.
    pub degenerate: bool,
    range: f64,
    argmin: (usize, usize),
    argmax: (usize, usize),
}

/// Rescales a map linearly so that its minimum becomes 0 and its maximum 1.
pub fn minmax_normalize(d: ArrayView2<f64>) -> MinMax {
    let mut argmin = (0, 0);
    let mut argmax = (0, 0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ((i, j), &v) in d.indexed_iter() {
        if v < lo {
            lo = v;
            argmin = (i, j);
        }
        if v > hi {
            hi = v;
            argmax = (i, j);
        }
    }
    let range = hi - lo;
    if d.is_empty() || !(range > 0.0) {
        return MinMax {
            values: Array2::zeros(d.raw_dim()),
            degenerate: true,
            range: 0.0,
            argmin,
            argmax,
        };
    }
    MinMax {
        values: d.mapv(|v| (v - lo) / range),
        degenerate: false,
        range,
        argmin,
        argmax,
    }
}

impl MinMax {
    /// Pulls a gradient on the normalized map back to the raw map.
    pub fn backward(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        if self.degenerate {
            return Array2::zeros(grad.raw_dim());
        }
        let inv = 1.0 / self.range;
        let mut out = grad.mapv(|g| g * inv);
        let mut to_min = 0.0;
        let mut to_max = 0.0;
        for (&g, &y) in grad.iter().zip(self.values.iter()) {
            to_min += g * (y - 1.0);
            to_max -= g * y;
        }
        out[self.argmin] += to_min * inv;
        out[self.argmax] += to_max * inv;
        out
    }
}

/// Affine-disparity depth mapping: depth = 1 / (a·x + b) for x in [0, 1],
/// with `a = 1/d_min − 1/d_max`, `b = 1/d_max`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange {
            d_min: 0.1,
            d_max: 100.0,
        }
    }
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        let r = DepthRange { d_min, d_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "depth range requires 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )))
        }
    }

    #[inline]
    fn coefficients(&self) -> (f64, f64) {
        (1.0 / self.d_min - 1.0 / self.d_max, 1.0 / self.d_max)
    }

    #[inline]
    pub fn depth(&self, x: f64) -> f64 {
        let (a, b) = self.coefficients();
        1.0 / (a * x + b)
    }

    /// d depth / d x at the given normalized disparity.
    #[inline]
    pub fn depth_derivative(&self, x: f64) -> f64 {
        let (a, _) = self.coefficients();
        let d = self.depth(x);
        -a * d * d
    }

    /// Inverse of [`DepthRange::depth`].
    #[inline]
    pub fn normalized_disparity(&self, depth: f64) -> f64 {
        let (a, b) = self.coefficients();
        (1.0 / depth - b) / a
    }
}

/// Converts a normalized inverse depth map into metric depth.
pub fn inv_depth_to_depth(d_norm: ArrayView2<f64>, range: &DepthRange) -> Result<DepthMap> {
    range.validate()?;
    if !d_norm.iter().all(|x| (0.0..=1.0).contains(x)) {
        return Err(Error::Data(
            "normalized inverse depth must lie in [0, 1]".into(),
        ));
    }
    let values = d_norm.mapv(|x| range.depth(x));
    let valid = Array2::from_elem(values.dim(), true);
    Ok(DepthMap { values, valid })
}

/// Maps every target pixel through its depth and `target_to_source` into
/// source pixel coordinates.
pub fn reproject(depth: &DepthMap, k: &CameraIntrinsics, target_to_source: &PoseSE3) -> PixelGrid {
    let (h, w) = depth.dim();
    let mut coords = Array3::from_elem((h, w, 2), -1.0);
    let mut dcoords = Array3::zeros((h, w, 2));
    let mut in_bounds = Array2::from_elem((h, w), false);
    let mut source_z = Array2::zeros((h, w));
    let mut dz = Array2::zeros((h, w));
    let r = target_to_source.rotation();
    let t = target_to_source.translation();
    let umax = (k.width - 1) as f64;
    let vmax = (k.height - 1) as f64;
    for i in 0..h {
        for j in 0..w {
            let m = r * k.ray(j as f64, i as f64);
            dz[(i, j)] = m.z;
            if !depth.valid[(i, j)] {
                continue;
            }
            let d = depth.values[(i, j)];
            let q = m * d + t;
            source_z[(i, j)] = q.z;
            if q.z <= BEHIND_CAMERA_EPS {
                continue;
            }
            let (u, v) = k.project(&q);
            let (u, v) = (snap(u), snap(v));
            let z2 = q.z * q.z;
            let du = k.fx * (m.x * q.z - q.x * m.z) / z2;
            let dv = k.fy * (m.y * q.z - q.y * m.z) / z2;
            dcoords[(i, j, 0)] = du;
            dcoords[(i, j, 1)] = dv;
            if (-BOUNDS_SLACK..=umax + BOUNDS_SLACK).contains(&u)
                && (-BOUNDS_SLACK..=vmax + BOUNDS_SLACK).contains(&v)
            {
                coords[(i, j, 0)] = u.clamp(0.0, umax);
                coords[(i, j, 1)] = v.clamp(0.0, vmax);
                in_bounds[(i, j)] = true;
            } else if u.is_finite() && v.is_finite() {
                coords[(i, j, 0)] = u;
                coords[(i, j, 1)] = v;
            }
        }
    }
    PixelGrid {
        coords,
        in_bounds,
        source_z,
        dcoords_ddepth: dcoords,
        dz_ddepth: dz,
        source_size: (k.width, k.height),
    }
}

/// Rounds coordinates lying within roundoff of the lattice onto it, so that a
/// static camera resamples every pixel exactly.
#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < LATTICE_SNAP {
        r
    } else {
        x
    }
}

/// Integer corner and fractional offsets of a bilinear lookup. The corner is
/// clamped so that a coordinate on the last row/column uses weight 1 on it.
#[inline]
fn lattice(x: f64, n: usize) -> (usize, usize, f64) {
    if n < 2 {
        return (0, 0, 0.0);
    }
    let x0 = (x.floor().max(0.0) as usize).min(n - 2);
    (x0, x0 + 1, x - x0 as f64)
}

/// Bilinear resampling of a `[C, H, W]` source at every grid coordinate.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub values: Array3<f64>,
    pub valid: Array2<bool>,
    /// `[C, H, W]` spatial derivatives of the interpolant along u and v.
    pub du: Array3<f64>,
    pub dv: Array3<f64>,
}

/// Exact at both ends and on constant data, so lattice hits and flat patches
/// reproduce the source bit for bit.
#[inline]
fn lerp(p: f64, q: f64, t: f64) -> f64 {
    if t == 1.0 {
        q
    } else {
        p + t * (q - p)
    }
}

/// Bilinear lookup position for grid pixel `(i, j)`. Coordinates outside the
/// source are clamped onto its border; the flags report which axes moved
/// freely (unclamped).
#[inline]
fn lookup(grid: &PixelGrid, i: usize, j: usize, sw: usize, sh: usize) -> ((usize, usize, f64), (usize, usize, f64), bool, bool) {
    let (u, v) = (grid.coords[(i, j, 0)], grid.coords[(i, j, 1)]);
    let (umax, vmax) = ((sw - 1) as f64, (sh - 1) as f64);
    let uc = if u.is_finite() { u.clamp(0.0, umax) } else { 0.0 };
    let vc = if v.is_finite() { v.clamp(0.0, vmax) } else { 0.0 };
    let free = grid.in_bounds[(i, j)];
    (lattice(uc, sw), lattice(vc, sh), free || uc == u, free || vc == v)
}

/// Samples every grid coordinate. Out-of-bounds pixels take the nearest
/// border value (with zero derivative along the clamped axis) and are
/// reported invalid.
pub fn bilinear_sample(src: ArrayView3<f64>, grid: &PixelGrid) -> Sampled {
    let (c, sh, sw) = src.dim();
    let (h, w) = grid.in_bounds.dim();
    let mut values = Array3::zeros((c, h, w));
    let mut du = Array3::zeros((c, h, w));
    let mut dv = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let ((x0, x1, a), (y0, y1, b), u_free, v_free) = lookup(grid, i, j, sw, sh);
            for ch in 0..c {
                let f00 = src[(ch, y0, x0)];
                let f01 = src[(ch, y0, x1)];
                let f10 = src[(ch, y1, x0)];
                let f11 = src[(ch, y1, x1)];
                let top = lerp(f00, f01, a);
                let bottom = lerp(f10, f11, a);
                values[(ch, i, j)] = lerp(top, bottom, b);
                if u_free {
                    du[(ch, i, j)] = (1.0 - b) * (f01 - f00) + b * (f11 - f10);
                }
                if v_free {
                    dv[(ch, i, j)] = bottom - top;
                }
            }
        }
    }
    Sampled {
        values,
        valid: grid.in_bounds.clone(),
        du,
        dv,
    }
}

/// Transpose of [`bilinear_sample`] with respect to the source values:
/// scatters a gradient on the samples back onto the `[C, H, W]` source.
pub fn bilinear_sample_adjoint(grad: ArrayView3<f64>, grid: &PixelGrid) -> Array3<f64> {
    let (c, h, w) = grad.dim();
    let (sw, sh) = grid.source_size;
    let mut out = Array3::zeros((c, sh, sw));
    for i in 0..h {
        for j in 0..w {
            let ((x0, x1, a), (y0, y1, b), _, _) = lookup(grid, i, j, sw, sh);
            for ch in 0..c {
                let g = grad[(ch, i, j)];
                if g == 0.0 {
                    continue;
                }
                out[(ch, y0, x0)] += g * (1.0 - a) * (1.0 - b);
                out[(ch, y0, x1)] += g * a * (1.0 - b);
                out[(ch, y1, x0)] += g * (1.0 - a) * b;
                out[(ch, y1, x1)] += g * a * b;
            }
        }
    }
    out
}

/// Source image resampled into the target view.
#[derive(Debug, Clone)]
pub struct WarpedImage {
    pub image: Array3<f64>,
    pub valid: Array2<bool>,
    /// `[C, H, W]` derivative of each synthesized value with respect to the
    /// target depth at the same pixel.
    pub dimage_ddepth: Array3<f64>,
}

/// Synthesizes the target view from `src` given target depth and the relative
/// pose from target to source camera.
pub fn warp_image(
    src: ArrayView3<f64>,
    depth_t: &DepthMap,
    k: &CameraIntrinsics,
    target_to_source: &PoseSE3,
) -> WarpedImage {
    let grid = reproject(depth_t, k, target_to_source);
    let sampled = bilinear_sample(src, &grid);
    let mut deriv = Array3::zeros(sampled.values.raw_dim());
    for ((ch, i, j), d) in deriv.indexed_iter_mut() {
        *d = sampled.du[(ch, i, j)] * grid.dcoords_ddepth[(i, j, 0)]
            + sampled.dv[(ch, i, j)] * grid.dcoords_ddepth[(i, j, 1)];
    }
    WarpedImage {
        image: sampled.values,
        valid: sampled.valid,
        dimage_ddepth: deriv,
    }
}

/// Neighbor depth resampled into the target view, alongside the target depth
/// transported into the neighbor's camera.
#[derive(Debug, Clone)]
pub struct DepthWarp {
    /// Source depth sampled at the reprojected coordinates.
    pub resampled: Array2<f64>,
    /// z of each target point in the source camera frame.
    pub transformed: Array2<f64>,
    pub valid: Array2<bool>,
    /// Derivative of `resampled` with respect to the target depth (diagonal).
    pub dresampled_ddepth: Array2<f64>,
    /// Derivative of `transformed` with respect to the target depth (diagonal).
    pub dtransformed_ddepth: Array2<f64>,
    grid: PixelGrid,
}

impl DepthWarp {
    /// Pulls a gradient on `resampled` back onto the source depth map.
    pub fn source_adjoint(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        let g = grad.insert_axis(Axis(0));
        bilinear_sample_adjoint(g, &self.grid).index_axis_move(Axis(0), 0)
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }
}

pub fn warp_depth(
    depth_src: &DepthMap,
    depth_t: &DepthMap,
    k: &CameraIntrinsics,
    target_to_source: &PoseSE3,
) -> DepthWarp {
    let grid = reproject(depth_t, k, target_to_source);
    let src = depth_src.values.view().insert_axis(Axis(0));
    let sampled = bilinear_sample(src, &grid);
    let src_valid = depth_src
        .valid
        .mapv(|v| if v { 1.0 } else { 0.0 })
        .insert_axis(Axis(0));
    let coverage = bilinear_sample(src_valid.view(), &grid).values;

    let (h, w) = depth_t.dim();
    let mut resampled = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let mut dres = Array2::zeros((h, w));
    let mut dtrans = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if !grid.in_bounds[(i, j)] {
                continue;
            }
            resampled[(i, j)] = sampled.values[(0, i, j)];
            valid[(i, j)] = coverage[(0, i, j)] >= 1.0 - 1e-9;
            dres[(i, j)] = sampled.du[(0, i, j)] * grid.dcoords_ddepth[(i, j, 0)]
                + sampled.dv[(0, i, j)] * grid.dcoords_ddepth[(i, j, 1)];
            dtrans[(i, j)] = grid.dz_ddepth[(i, j)];
        }
    }
    let transformed = grid.source_z.clone();
    DepthWarp {
        resampled,
        transformed,
        valid,
        dresampled_ddepth: dres,
        dtransformed_ddepth: dtrans,
        grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k8() -> CameraIntrinsics {
        CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap()
    }

    #[test]
    fn minmax_linear_map() {
        let d = arr2(&[[2.0, 4.0, 6.0]]);
        let n = minmax_normalize(d.view());
        assert!(!n.degenerate);
        assert_eq!(n.values, arr2(&[[0.0, 0.5, 1.0]]));
    }

    #[test]
    fn minmax_constant_is_flagged() {
        let n = minmax_normalize(arr2(&[[5.0, 5.0, 5.0]]).view());
        assert!(n.degenerate);
        assert_eq!(n.values, arr2(&[[0.0, 0.0, 0.0]]));
    }

    #[test]
    fn minmax_random_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Array::from_shape_fn((8, 8), |_| rng.gen_range(0.0..5.0));
        let n = minmax_normalize(d.view());
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (x, y) in d.iter().zip(n.values.iter()) {
            assert_abs_diff_eq!((x - lo) / (hi - lo), *y, epsilon = 1e-15);
        }
        assert_eq!(n.values.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(n.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn minmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Array::from_shape_fn((5, 6), |_| rng.gen_range(0.0..5.0));
        let weights = Array::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let f = |x: &Array2<f64>| (minmax_normalize(x.view()).values * &weights).sum();
        let analytic = minmax_normalize(d.view()).backward(weights.view());
        let eps = 1e-6;
        for idx in 0..d.len() {
            let mut p = d.clone();
            let mut m = d.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            m.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, analytic.as_slice().unwrap()[idx], epsilon = 1e-7);
        }
    }

    #[test]
    fn depth_range_endpoints_and_midpoint() {
        let r = DepthRange::default();
        assert_abs_diff_eq!(r.depth(0.0), 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.depth(1.0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.depth(0.5), 1.0 / (0.5 * 9.99 + 0.01), epsilon = 1e-12);
        assert_abs_diff_eq!(r.depth(0.5), 0.19980, epsilon = 1e-5);
        assert!(DepthRange::new(1.0, 1.0).is_err());
        assert!(DepthRange::new(2.0, 1.0).is_err());
        let m = inv_depth_to_depth(arr2(&[[0.0, 0.25, 0.5, 1.0]]).view(), &r).unwrap();
        let v = m.values.as_slice().unwrap();
        assert!(v.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn depth_derivative_matches_finite_difference() {
        let r = DepthRange::new(0.5, 20.0).unwrap();
        for &x in &[0.05, 0.3, 0.9] {
            let fd = (r.depth(x + 1e-7) - r.depth(x - 1e-7)) / 2e-7;
            assert_abs_diff_eq!(fd, r.depth_derivative(x), epsilon = 1e-5 * fd.abs());
            assert_abs_diff_eq!(r.normalized_disparity(r.depth(x)), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn reproject_identity_returns_pixel_lattice() {
        let depth = DepthMap::dense(Array2::from_elem((8, 8), 3.7)).unwrap();
        let g = reproject(&depth, &k8(), &PoseSE3::identity());
        for i in 0..8 {
            for j in 0..8 {
                assert!(g.in_bounds[(i, j)]);
                assert_eq!(g.coords[(i, j, 0)], j as f64);
                assert_eq!(g.coords[(i, j, 1)], i as f64);
            }
        }
    }

    #[test]
    fn reproject_forward_motion_expands_radially() {
        // Plane at z = 4 seen after moving 1 m forward: point (X, Y, 4) lands
        // at z = 3, so offsets from the principal point grow by 4/3.
        let k = k8();
        let depth = DepthMap::dense(Array2::from_elem((8, 8), 4.0)).unwrap();
        let fwd = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let g = reproject(&depth, &k, &fwd);
        for i in 0..8 {
            for j in 0..8 {
                let u = k.cx + (j as f64 - k.cx) * 4.0 / 3.0;
                let v = k.cy + (i as f64 - k.cy) * 4.0 / 3.0;
                assert!((g.coords[(i, j, 0)] - u).abs() < 1e-12);
                assert!((g.coords[(i, j, 1)] - v).abs() < 1e-12);
                assert_abs_diff_eq!(g.source_z[(i, j)], 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reproject_behind_camera_is_out_of_bounds() {
        let depth = DepthMap::dense(Array2::from_elem((8, 8), 2.0)).unwrap();
        let back = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -5.0));
        let g = reproject(&depth, &k8(), &back);
        assert!(g.in_bounds.iter().all(|b| !b));
    }

    #[test]
    fn bilinear_lattice_and_center() {
        let src = arr2(&[[0.0, 1.0], [2.0, 3.0]]).insert_axis(Axis(0));
        let mut grid = PixelGrid {
            coords: Array3::zeros((1, 1, 2)),
            in_bounds: Array2::from_elem((1, 1), true),
            source_z: Array2::ones((1, 1)),
            dcoords_ddepth: Array3::zeros((1, 1, 2)),
            dz_ddepth: Array2::zeros((1, 1)),
            source_size: (2, 2),
        };
        grid.coords[(0, 0, 0)] = 0.5;
        grid.coords[(0, 0, 1)] = 0.5;
        assert_abs_diff_eq!(bilinear_sample(src.view(), &grid).values[(0, 0, 0)], 1.5);
        for (u, v, want) in [(0.0, 0.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 2.0), (1.0, 1.0, 3.0)] {
            grid.coords[(0, 0, 0)] = u;
            grid.coords[(0, 0, 1)] = v;
            assert_eq!(bilinear_sample(src.view(), &grid).values[(0, 0, 0)], want);
        }
    }

    #[test]
    fn out_of_bounds_samples_take_border_and_are_invalid() {
        let depth = DepthMap::dense(Array2::from_elem((8, 8), 2.0)).unwrap();
        let side = PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let src = Array3::from_shape_fn((1, 8, 8), |(_, i, j)| 0.1 * j as f64 + 0.01 * i as f64);
        let w = warp_image(src.view(), &depth, &k8(), &side);
        // Shift of fx·1/2 = 4 px to the right: the rightmost four columns leave the frame.
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(w.valid[(i, j)], j < 4);
                if j >= 4 {
                    assert_abs_diff_eq!(w.image[(0, i, j)], 0.7 + 0.01 * i as f64, epsilon = 1e-12);
                    assert_eq!(w.dimage_ddepth[(0, i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn warp_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = Array::from_shape_fn((3, 8, 8), |_| rng.gen::<f64>());
        let depth = DepthMap::dense(Array::from_shape_fn((8, 8), |_| rng.gen_range(1.0..5.0))).unwrap();
        let w = warp_image(src.view(), &depth, &k8(), &PoseSE3::identity());
        assert!(w.valid.iter().all(|v| *v));
        assert_eq!(w.image, src);
    }

    #[test]
    fn warp_depth_identity_and_axial_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let depth = DepthMap::dense(Array::from_shape_fn((8, 8), |_| rng.gen_range(2.0..5.0))).unwrap();
        let w = warp_depth(&depth, &depth, &k8(), &PoseSE3::identity());
        for ((a, b), c) in w.resampled.iter().zip(w.transformed.iter()).zip(depth.values.iter()) {
            assert_abs_diff_eq!(a, c, epsilon = 1e-12);
            assert_abs_diff_eq!(b, c, epsilon = 1e-12);
        }
        // Moving 1 m toward the scene puts every point 1 m closer.
        let fwd = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let w = warp_depth(&depth, &depth, &k8(), &fwd);
        for (z, d) in w.transformed.iter().zip(depth.values.iter()) {
            assert_abs_diff_eq!(*z, d - 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_inverse_and_compose() {
        let a = PoseSE3::from_euler_yxz(0.3, -0.2, 0.1, Vector3::new(1.0, 2.0, -0.5));
        let id = a.compose(&a.inverse());
        assert!(id.max_abs_diff(&PoseSE3::identity()) < 1e-12);
        assert!(PoseSE3::new(Matrix3::from_diagonal_element(2.0), Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(PoseSE3::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn intrinsics_scaling() {
        let k = CameraIntrinsics::new(100.0, 90.0, 48.0, 32.0, 96, 64).unwrap();
        let half = k.scaled(48, 32).unwrap();
        assert_eq!((half.fx, half.fy, half.cx, half.cy), (50.0, 45.0, 24.0, 16.0));
        let back = half.scaled(96, 64).unwrap();
        assert!((back.fx - k.fx).abs() < 1e-12 && (back.cy - k.cy).abs() < 1e-12);
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
    }
}
