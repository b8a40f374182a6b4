//! Dataset ingestion: trajectories, intrinsics, frame/pose association,
//! training triplets and the on-disk dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! images/000000.png ...   8-bit RGB frames
//! images.txt              "timestamp images/000000.png" per line
//! trajectory.txt          TUM format, world-from-camera
//! intrinsics.txt          "fx fy cx cy width height"
//! teacher/000000.bin ...  teacher predictions (see mapfile)
//! depth/000000.bin ...    ground-truth depth, optional
//! ```
//!
//! Relative poses map target-camera coordinates into source-camera
//! coordinates: `T_{t→s} = inverse(pose_s) · pose_t`. A camera moving +1 m
//! along its own x axis between t and s sees target points at x − 1 in the
//! source frame, so `T_{t→s}` has translation (−1, 0, 0).

pub mod mapfile;
pub mod trajectory;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::raster::{self, Image};

pub use mapfile::{read_map, write_map, MapFile, MapKind};
pub use trajectory::{load_trajectory, parse_trajectory, Trajectory};

pub const IMAGES_DIR: &str = "images";
pub const IMAGE_LIST: &str = "images.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const TEACHER_DIR: &str = "teacher";
pub const DEPTH_DIR: &str = "depth";

/// Zero-padded frame file stem.
pub fn frame_stem(id: usize) -> String {
    format!("{id:06}")
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let (lineno, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| {
            let l = l.trim();
            !l.is_empty() && !l.starts_with('#')
        })
        .ok_or_else(|| Error::Data(format!("{}: no intrinsics line", path.display())))?;
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno + 1,
        message,
    };
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(err(format!("expected 6 fields, found {}", toks.len())));
    }
    let f = |i: usize| {
        toks[i]
            .parse::<f64>()
            .map_err(|_| err(format!("not a number: {:?}", toks[i])))
    };
    let n = |i: usize| {
        toks[i]
            .parse::<usize>()
            .map_err(|_| err(format!("not a size: {:?}", toks[i])))
    };
    CameraIntrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, n(4)?, n(5)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_intrinsics(&text, path)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let text = format!(
        "# fx fy cx cy width height\n{} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn scale_intrinsics(k: &CameraIntrinsics, width: usize, height: usize) -> Result<CameraIntrinsics> {
    k.scaled(width, height)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `(frame index, trajectory index)` pairs in frame order.
    pub matches: Vec<(usize, usize)>,
    pub dropped: usize,
}

/// Nearest-timestamp matching; frames with no pose within `max_dt` are dropped.
pub fn associate(frame_times: &[f64], traj: &Trajectory, max_dt: f64) -> Association {
    let mut matches = Vec::with_capacity(frame_times.len());
    let mut dropped = 0;
    for (i, &t) in frame_times.iter().enumerate() {
        match traj.nearest(t) {
            Some(j) if (traj.entries()[j].0 - t).abs() <= max_dt => matches.push((i, j)),
            _ => dropped += 1,
        }
    }
    Association { matches, dropped }
}

/// One training sample: target frame, its two temporal neighbors and the
/// target-to-source relative poses. Indices refer to the pose list given to
/// [`make_triplets`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    pub target: usize,
    pub sources: [usize; 2],
    pub rel_poses: [PoseSE3; 2],
}

/// Relative transform taking target-camera points into the source camera.
pub fn relative_pose(world_from_target: &PoseSE3, world_from_source: &PoseSE3) -> PoseSE3 {
    world_from_source.inverse().compose(world_from_target)
}

/// Builds a triplet for every frame with neighbors at ±`stride`. With
/// `min_translation > 0`, triplets where either neighbor moved less than
/// that distance are dropped.
pub fn make_triplets(poses: &[PoseSE3], stride: usize, min_translation: f64) -> Vec<FrameTriplet> {
    let stride = stride.max(1);
    if poses.len() < 2 * stride + 1 {
        log::warn!(
            "sequence of {} frames is too short for stride {stride}; no triplets",
            poses.len()
        );
        return Vec::new();
    }
    (stride..poses.len() - stride)
        .filter_map(|t| {
            let sources = [t - stride, t + stride];
            let rel_poses = sources.map(|s| relative_pose(&poses[t], &poses[s]));
            let moving = rel_poses
                .iter()
                .all(|p| p.translation().norm() >= min_translation);
            (min_translation <= 0.0 || moving).then_some(FrameTriplet {
                target: t,
                sources,
                rel_poses,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub id: usize,
    pub timestamp: f64,
    pub image_path: PathBuf,
    pub pose: PoseSE3,
}

/// An opened dataset directory with frames matched to poses. Images are
/// loaded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    pub dropped: usize,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Data(format!("missing file: {}", path.display())))
    }
}

fn parse_image_list(text: &str, path: &Path) -> Result<Vec<(f64, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(p), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "expected \"timestamp path\"".into(),
            });
        };
        let t = t.parse::<f64>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("not a timestamp: {t:?}"),
        })?;
        out.push((t, p.to_string()));
    }
    Ok(out)
}

impl Dataset {
    /// Opens `root`, associating image timestamps with trajectory poses
    /// within `max_dt` seconds. Every referenced file must exist.
    pub fn open(root: &Path, max_dt: f64) -> Result<Dataset> {
        if !root.is_dir() {
            return Err(Error::Data(format!("missing dataset directory: {}", root.display())));
        }
        let list_path = require(root.join(IMAGE_LIST))?;
        let traj = load_trajectory(&require(root.join(TRAJECTORY_FILE))?)?;
        let intrinsics = load_intrinsics(&require(root.join(INTRINSICS_FILE))?)?;
        let list_text = std::fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
        let list = parse_image_list(&list_text, &list_path)?;
        let times: Vec<f64> = list.iter().map(|e| e.0).collect();
        let assoc = associate(&times, &traj, max_dt);
        let mut frames = Vec::with_capacity(assoc.matches.len());
        for &(fi, ti) in &assoc.matches {
            let (timestamp, rel) = &list[fi];
            let image_path = require(root.join(rel))?;
            let id = Path::new(rel)
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok())
                .unwrap_or(fi);
            frames.push(Frame {
                id,
                timestamp: *timestamp,
                image_path,
                pose: traj.entries()[ti].1,
            });
        }
        if assoc.dropped > 0 {
            log::warn!("{} frames had no pose within {max_dt} s and were dropped", assoc.dropped);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            intrinsics,
            frames,
            dropped: assoc.dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn triplets(&self, stride: usize, min_translation: f64) -> Vec<FrameTriplet> {
        make_triplets(&self.poses(), stride, min_translation)
    }

    pub fn load_image(&self, index: usize) -> Result<Image> {
        raster::load_rgb(&self.frames[index].image_path)
    }

    pub fn teacher_path(&self, index: usize) -> PathBuf {
        self.root
            .join(TEACHER_DIR)
            .join(format!("{}.bin", frame_stem(self.frames[index].id)))
    }

    pub fn depth_path(&self, index: usize) -> PathBuf {
        self.root
            .join(DEPTH_DIR)
            .join(format!("{}.bin", frame_stem(self.frames[index].id)))
    }

    /// Ground-truth depth for a frame; missing file is a data error naming it.
    pub fn load_depth(&self, index: usize) -> Result<MapFile> {
        let path = require(self.depth_path(index))?;
        let map = read_map(&path)?;
        if map.kind != MapKind::Depth {
            return Err(Error::Data(format!("{}: expected a depth map", path.display())));
        }
        Ok(map)
    }

    pub fn has_ground_truth(&self) -> bool {
        self.root.join(DEPTH_DIR).is_dir()
    }

    /// Index of the frame with file id `id`.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }
}

/// SHA-256 of every file below `root`, keyed by relative path.
pub fn directory_checksums(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path
            .strip_prefix(root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        out.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn traj(times: &[f64]) -> Trajectory {
        Trajectory::new(times.iter().map(|&t| (t, PoseSE3::identity())).collect()).unwrap()
    }

    #[test]
    fn intrinsics_parse_and_scale() {
        let k = parse_intrinsics("# c\n100 110 47.5 31.5 96 64\n", Path::new("k")).unwrap();
        assert_eq!((k.fx, k.fy, k.width, k.height), (100.0, 110.0, 96, 64));
        let same = scale_intrinsics(&k, 96, 64).unwrap();
        assert_eq!(same, k);
        let half = scale_intrinsics(&k, 48, 32).unwrap();
        assert_eq!((half.fx, half.fy, half.cx, half.cy), (50.0, 55.0, 23.75, 15.75));
        let back = scale_intrinsics(&scale_intrinsics(&k, 384, 256).unwrap(), 96, 64).unwrap();
        assert!((back.fx - k.fx).abs() < 1e-12 && (back.cy - k.cy).abs() < 1e-12);
        assert!(matches!(
            parse_intrinsics("1 2 3\n", Path::new("k")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn association_exact_offset_and_drop() {
        let tr = traj(&[0.0, 0.1, 0.2, 0.3]);
        let exact = associate(&[0.0, 0.1, 0.2, 0.3], &tr, 0.01);
        assert_eq!(exact.matches, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(exact.dropped, 0);

        let shifted: Vec<f64> = [0.0, 0.1, 0.2, 0.3].iter().map(|t| t + 0.005).collect();
        let off = associate(&shifted, &tr, 0.01);
        assert_eq!(off.matches, exact.matches);
        let neg: Vec<f64> = [0.0, 0.1, 0.2, 0.3].iter().map(|t| t - 0.005).collect();
        assert_eq!(associate(&neg, &tr, 0.01).matches, exact.matches);

        let far = associate(&[0.0, 0.15, 0.9], &tr, 0.01);
        assert_eq!(far.matches, vec![(0, 0)]);
        assert_eq!(far.dropped, 2);
    }

    #[test]
    fn identity_trajectory_gives_one_identity_triplet() {
        let ts = make_triplets(&[PoseSE3::identity(); 3], 1, 0.0);
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].target, 1);
        assert_eq!(ts[0].sources, [0, 2]);
        for p in &ts[0].rel_poses {
            assert!(p.max_abs_diff(&PoseSE3::identity()) < 1e-15);
        }
        assert!(make_triplets(&[PoseSE3::identity(); 2], 1, 0.0).is_empty());
    }

    #[test]
    fn moving_plus_x_gives_minus_x_translation() {
        let poses: Vec<PoseSE3> = (0..3)
            .map(|i| PoseSE3::from_translation(Vector3::new(i as f64, 0.0, 0.0)))
            .collect();
        let ts = make_triplets(&poses, 1, 0.0);
        let fwd = ts[0].rel_poses[1].translation();
        assert!((fwd - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let back = ts[0].rel_poses[0].translation();
        assert!((back - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn stride_and_static_filter() {
        let poses: Vec<PoseSE3> = (0..7)
            .map(|i| PoseSE3::from_translation(Vector3::new(0.0, 0.0, 0.1 * i as f64)))
            .collect();
        let ts = make_triplets(&poses, 2, 0.0);
        assert_eq!(ts.iter().map(|t| t.target).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(ts[0].sources, [0, 4]);
        assert_eq!(make_triplets(&poses, 1, 0.15).len(), 0);
        assert_eq!(make_triplets(&poses, 2, 0.15).len(), 3);
    }

    #[test]
    fn missing_layout_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = Dataset::open(dir.path(), 0.01).unwrap_err();
        assert!(err.to_string().contains(IMAGE_LIST), "{err}");
    }
}
