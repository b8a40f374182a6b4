//! Depth metrics, the median-scaling baseline and point-cloud export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, MapKind};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, PoseSE3};
use crate::losses::median;
use crate::models::{PrecomputedTeacher, Teacher};
use crate::raster::{resize_bilinear, resize_image};
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3] = acc.map(|v| v / n);
        Some(DepthMetrics {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            delta1,
            delta2,
            delta3,
        })
    }
}

/// Depth range both maps are clamped to before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for EvalClamp {
    fn default() -> Self {
        EvalClamp { min: 0.1, max: 10.0 }
    }
}

/// Pixels where both maps hold a depth.
fn scored_pixels(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<(usize, usize)>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Data(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dim(),
            gt.dim()
        )));
    }
    let px: Vec<_> = gt
        .valid
        .indexed_iter()
        .filter(|(idx, &v)| v && pred.valid[*idx])
        .map(|(idx, _)| idx)
        .collect();
    if px.is_empty() {
        return Err(Error::Data("no valid ground-truth pixels to evaluate".into()));
    }
    Ok(px)
}

pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, clamp: EvalClamp) -> Result<DepthMetrics> {
    let px = scored_pixels(pred, gt)?;
    let n = px.len() as f64;
    let mut acc = [0.0; 7];
    for idx in px {
        let p = pred.values[idx].clamp(clamp.min, clamp.max);
        let g = gt.values[idx].clamp(clamp.min, clamp.max);
        let diff = p - g;
        let ratio = (p / g).max(g / p);
        acc[0] += diff.abs() / g;
        acc[1] += diff * diff / g;
        acc[2] += diff * diff;
        acc[3] += (p.ln() - g.ln()).powi(2);
        for k in 0..3 {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                acc[4 + k] += 1.0;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        delta1: acc[4] / n,
        delta2: acc[5] / n,
        delta3: acc[6] / n,
    })
}

/// `s = median(gt) / median(pred)` over scored pixels, and `s·pred`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, DepthMap)> {
    let px = scored_pixels(pred, gt)?;
    let g: Vec<f64> = px.iter().map(|&i| gt.values[i]).collect();
    let p: Vec<f64> = px.iter().map(|&i| pred.values[i]).collect();
    let s = median(&g) / median(&p);
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::numerical("median scaling", format!("scale factor {s}")));
    }
    Ok((
        s,
        DepthMap {
            values: pred.values.mapv(|v| v * s),
            valid: pred.valid.clone(),
        },
    ))
}

/// Accumulated colored points in world coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Back-projects every valid pixel through `world_from_camera`.
    /// Returns the number of points added.
    pub fn add_frame(
        &mut self,
        depth: &DepthMap,
        image: ArrayView3<f64>,
        k: &CameraIntrinsics,
        world_from_camera: &PoseSE3,
    ) -> Result<usize> {
        let (h, w) = depth.dim();
        if (k.height, k.width) != (h, w) {
            return Err(Error::Data(format!(
                "intrinsics are {}×{} but depth is {h}×{w}",
                k.height, k.width
            )));
        }
        let resized;
        let image = if image.dim() == (3, h, w) {
            image
        } else {
            resized = resize_image(image, h, w);
            resized.view()
        };
        let before = self.len();
        for ((i, j), &z) in depth.values.indexed_iter() {
            if !depth.valid[(i, j)] {
                continue;
            }
            let cam = k.ray(j as f64, i as f64) * z;
            let p = world_from_camera.transform_point(&cam);
            self.points.push([p.x, p.y, p.z]);
            self.colors
                .push([0, 1, 2].map(|c| (image[(c, i, j)].clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        Ok(self.len() - before)
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut text = String::new();
        let _ = writeln!(text, "ply\nformat ascii 1.0\nelement vertex {}", self.len());
        text.push_str("property float x\nproperty float y\nproperty float z\n");
        text.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
        for (p, c) in self.points.iter().zip(&self.colors) {
            let _ = writeln!(
                text,
                "{} {} {} {} {} {}",
                p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]
            );
        }
        out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a cloud written by [`PointCloud::write_ply`].
    pub fn read_ply(path: &Path) -> Result<PointCloud> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let mut count = None;
        for (n, line) in lines.by_ref() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 && line.trim() != "ply" {
                return Err(parse_err(1, "missing ply magic".into()));
            }
            if let Some(rest) = line.strip_prefix("element vertex ") {
                count = Some(rest.trim().parse::<usize>().map_err(|e| parse_err(n + 1, e.to_string()))?);
            }
            if line.trim() == "end_header" {
                break;
            }
        }
        let count = count.ok_or_else(|| parse_err(0, "no vertex element".into()))?;
        let mut cloud = PointCloud::default();
        for (n, line) in lines.take(count) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(parse_err(n + 1, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(n + 1, e.to_string()));
            let byte = |s: &str| s.parse::<u8>().map_err(|e| parse_err(n + 1, e.to_string()));
            cloud.points.push([num(f[0])?, num(f[1])?, num(f[2])?]);
            cloud.colors.push([byte(f[3])?, byte(f[4])?, byte(f[5])?]);
        }
        if cloud.len() != count {
            return Err(parse_err(0, format!("header declares {count} vertices, found {}", cloud.len())));
        }
        Ok(cloud)
    }
}

/// Writes the frame's cloud to `path`; with `append` the points are added
/// to an existing file's vertices. Returns the number of points written for
/// this frame.
pub fn export_pointcloud(
    depth: &DepthMap,
    image: ArrayView3<f64>,
    k: &CameraIntrinsics,
    world_from_camera: &PoseSE3,
    path: &Path,
    append: bool,
) -> Result<usize> {
    let mut cloud = if append && path.exists() {
        PointCloud::read_ply(path)?
    } else {
        PointCloud::default()
    };
    let added = cloud.add_frame(depth, image, k, world_from_camera)?;
    cloud.write_ply(path)?;
    Ok(added)
}

/// Anything that maps a dataset frame to a metric depth map.
pub trait DepthPredictor {
    fn name(&self) -> String;
    fn predict(&self, dataset: &Dataset, index: usize) -> Result<DepthMap>;
}

impl DepthPredictor for Checkpoint {
    fn name(&self) -> String {
        format!("student@epoch{}", self.epoch)
    }

    fn predict(&self, dataset: &Dataset, index: usize) -> Result<DepthMap> {
        let image = dataset.load_image(index)?;
        self.predict_depth(image.view())
    }
}

/// Emits the stored ground truth; a reference for the zero-error row.
pub struct GroundTruthPredictor;

impl DepthPredictor for GroundTruthPredictor {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn predict(&self, dataset: &Dataset, index: usize) -> Result<DepthMap> {
        ground_truth(dataset, index)
    }
}

/// Raw teacher output read as metric depth (inverse-depth maps inverted).
pub struct TeacherPredictor {
    pub teacher: PrecomputedTeacher,
}

impl DepthPredictor for TeacherPredictor {
    fn name(&self) -> String {
        "teacher".into()
    }

    fn predict(&self, dataset: &Dataset, index: usize) -> Result<DepthMap> {
        let image = dataset.load_image(index)?;
        let p = self.teacher.predict(dataset.frames[index].id, image.view())?;
        let depth = match p.kind() {
            MapKind::InverseDepth => p.values().mapv(|v| if v > 0.0 { 1.0 / v } else { 0.0 }),
            MapKind::Depth => p.values().clone(),
        };
        Ok(DepthMap::from_values_with_zero_invalid(depth))
    }
}

/// Stored ground-truth depth for frame `index`; zeros are invalid.
pub fn ground_truth(dataset: &Dataset, index: usize) -> Result<DepthMap> {
    let map = dataset.load_depth(index)?;
    Ok(DepthMap::from_values_with_zero_invalid(map.values.mapv(f64::from)))
}

/// Resamples a prediction onto the ground-truth lattice when sizes differ.
fn match_resolution(pred: DepthMap, gt: &DepthMap) -> DepthMap {
    let (h, w) = gt.dim();
    if pred.dim() == (h, w) {
        return pred;
    }
    let filled = Array2::from_shape_fn(pred.dim(), |idx| if pred.valid[idx] { pred.values[idx] } else { 0.0 });
    DepthMap::from_values_with_zero_invalid(resize_bilinear(filled.view(), h, w))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: usize,
    pub raw: DepthMetrics,
    pub median_scaled: DepthMetrics,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub clamp: EvalClamp,
    pub raw: DepthMetrics,
    pub median_scaled: DepthMetrics,
    /// Median of pred/gt over all scored pixels of all frames, unclamped.
    pub median_ratio: f64,
    pub frames: Vec<FrameRecord>,
}

impl EvalReport {
    /// Table with one row per column set, Table-style column order.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# predictor\t{}\n# frames\t{}\n# median_ratio\t{}\n", self.predictor, self.frames.len(), self.median_ratio);
        s.push_str("row");
        for c in DepthMetrics::COLUMNS {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for (name, m) in [("raw", &self.raw), ("median_scaled", &self.median_scaled)] {
            s.push_str(name);
            for v in m.values() {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn frames_tsv(&self) -> String {
        let mut s = String::from("frame\tscale");
        for c in DepthMetrics::COLUMNS {
            let _ = write!(s, "\traw_{c}");
        }
        for c in DepthMetrics::COLUMNS {
            let _ = write!(s, "\tscaled_{c}");
        }
        s.push('\n');
        for f in &self.frames {
            let _ = write!(s, "{}\t{:.6}", f.frame_id, f.scale);
            for v in f.raw.values().iter().chain(f.median_scaled.values().iter()) {
                let _ = write!(s, "\t{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes the summary table to `path` and per-frame rows next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))?;
        let frames = path.with_extension("frames.tsv");
        std::fs::write(&frames, self.frames_tsv()).map_err(|e| Error::io(&frames, e))
    }
}

/// Scores every frame with ground truth; aggregates per frame then by mean.
pub fn evaluate_run(predictor: &dyn DepthPredictor, dataset: &Dataset, clamp: EvalClamp) -> Result<EvalReport> {
    let mut frames = Vec::new();
    let mut ratios = Vec::new();
    for idx in 0..dataset.len() {
        if !dataset.depth_path(idx).exists() {
            continue;
        }
        let gt = ground_truth(dataset, idx)?;
        let pred = match_resolution(predictor.predict(dataset, idx)?, &gt);
        for (i, &v) in gt.valid.indexed_iter() {
            if v && pred.valid[i] {
                ratios.push(pred.values[i] / gt.values[i]);
            }
        }
        let raw = compute_metrics(&pred, &gt, clamp)?;
        let (scale, scaled) = median_scale(&pred, &gt)?;
        let median_scaled = compute_metrics(&scaled, &gt, clamp)?;
        frames.push(FrameRecord {
            frame_id: dataset.frames[idx].id,
            raw,
            median_scaled,
            scale,
        });
    }
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "no ground-truth depth maps under {}",
            dataset.root.join(crate::dataio::DEPTH_DIR).display()
        )));
    }
    let raw: Vec<_> = frames.iter().map(|f| f.raw).collect();
    let scaled: Vec<_> = frames.iter().map(|f| f.median_scaled).collect();
    Ok(EvalReport {
        predictor: predictor.name(),
        clamp,
        raw: DepthMetrics::mean(&raw).expect("non-empty"),
        median_scaled: DepthMetrics::mean(&scaled).expect("non-empty"),
        median_ratio: median(&ratios),
        frames,
    })
}

/// Rigid transform helper used by the equivariance check.
pub fn transform_cloud(cloud: &PointCloud, g: &PoseSE3) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| {
                let q = g.transform_point(&Vector3::new(p[0], p[1], p[2]));
                [q.x, q.y, q.z]
            })
            .collect(),
        colors: cloud.colors.clone(),
    }
}
