//! TUM-format trajectories: `timestamp tx ty tz qx qy qz qw` per line, poses
//! stored world-from-camera.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, PoseSE3)>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Data(format!(
                "trajectory timestamps must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(Trajectory { entries })
    }

    pub fn entries(&self) -> &[(f64, PoseSE3)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Index of the entry closest in time to `t`.
    pub fn nearest(&self, t: f64) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let i = self.entries.partition_point(|e| e.0 < t);
        let candidates = [i.checked_sub(1), (i < self.entries.len()).then_some(i)];
        candidates
            .into_iter()
            .flatten()
            .min_by(|a, b| {
                (self.entries[*a].0 - t)
                    .abs()
                    .total_cmp(&(self.entries[*b].0 - t).abs())
            })
    }

    /// Left-multiplies every pose by `g` (a change of world frame).
    pub fn transformed(&self, g: &PoseSE3) -> Trajectory {
        Trajectory {
            entries: self.entries.iter().map(|(t, p)| (*t, g.compose(p))).collect(),
        }
    }

    pub fn to_tum_string(&self) -> String {
        let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (t, p) in &self.entries {
            let q = p.quaternion();
            let tr = p.translation();
            let _ = writeln!(
                s,
                "{t} {} {} {} {} {} {} {}",
                tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tum_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| err(format!("not a number: {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        if !fields.iter().all(|v| v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let q = Quaternion::new(fields[7], fields[4], fields[5], fields[6]);
        let norm = q.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(Error::Data(format!(
                "{}:{}: quaternion norm {norm} is not unit",
                path.display(),
                lineno + 1
            )));
        }
        let pose = PoseSE3::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(fields[1], fields[2], fields[3]),
        );
        entries.push((fields[0], pose));
    }
    Trajectory::new(entries).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, path)
}
