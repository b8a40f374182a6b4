use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::MapKind;
use crate::error::{Error, Result};
use crate::geometry::DepthRange;
use crate::losses::LossWeights;

pub const DESK_PROFILE: &str = include_str!("../../profiles/desk.profile");
pub const REFERENCE_PROFILE: &str = include_str!("../../profiles/reference.profile");

/// Prefix for environment overrides. Nested keys join with `__`, so
/// `SELFTUNE_WEIGHTS__DISTILL=0.01` sets `weights.distill`.
pub const ENV_PREFIX: &str = "SELFTUNE_";

/// How the raw student output is mapped into `[0, 1]` before the
/// disparity-to-depth conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-frame Min-Max rescaling.
    MinMax,
    /// Output used as is; the sigmoid already bounds it.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub distill: bool,
    pub consistency: bool,
    /// Start from the warmed-up student rather than random weights.
    pub pretrained: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            distill: true,
            consistency: true,
            pretrained: true,
        }
    }
}

/// Named ablation presets accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    Full,
    PhotoOnly,
    PhotoDistill,
    FromScratch,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 4] = [
        AblationPreset::Full,
        AblationPreset::PhotoOnly,
        AblationPreset::PhotoDistill,
        AblationPreset::FromScratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::Full => "full",
            AblationPreset::PhotoOnly => "photo-only",
            AblationPreset::PhotoDistill => "photo-distill",
            AblationPreset::FromScratch => "from-scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown ablation '{s}', expected one of {}", names.join(", ")))
            })
    }

    pub fn ablation(self) -> Ablation {
        match self {
            AblationPreset::Full => Ablation::default(),
            AblationPreset::PhotoOnly => Ablation {
                distill: false,
                consistency: false,
                pretrained: true,
            },
            AblationPreset::PhotoDistill => Ablation {
                distill: true,
                consistency: false,
                pretrained: true,
            },
            AblationPreset::FromScratch => Ablation {
                pretrained: false,
                ..Ablation::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSection {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSection {
    pub height: usize,
    pub width: usize,
    pub output_kind: MapKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Frame offset between a target and its two neighbors.
    pub stride: usize,
    /// Triplets whose neighbors moved less than this (meters) are dropped.
    pub min_translation: f64,
    /// Tolerance (seconds) when matching image and pose timestamps.
    pub max_dt: f64,
    pub normalization: Normalization,
    /// Every n-th triplet is held out for validation; 0 disables.
    pub validation_every: usize,
    /// Single-worker execution for bit-repeatable runs.
    pub deterministic: bool,
    /// Distillation-only warm-up epochs that stand in for a pre-trained
    /// student. Skipped when `ablation.pretrained` is false.
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    /// Depth (meters) the untrained student's head is biased towards.
    pub prior_depth: f64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub student: StudentSection,
    pub teacher: TeacherSection,
    pub depth_range: DepthRange,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self::from_toml(DESK_PROFILE).expect("shipped desk profile parses")
    }

    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_PROFILE).expect("shipped reference profile parses")
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "reference" => Ok(Self::reference()),
            other => Err(Error::Config(format!(
                "unknown profile '{other}', expected desk or reference"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Layers `overrides` (a partial TOML table) on top of `self`.
    pub fn merged(&self, overrides: &toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, overrides);
        let cfg: TrainConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `SELFTUNE_*` overrides from the given variables.
    pub fn with_env<I>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = toml::Table::new();
        for (key, value) in vars {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            insert_path(&mut table, &path, parse_scalar(&value));
        }
        if table.is_empty() {
            return Ok(self.clone());
        }
        self.merged(&table)
    }

    pub fn with_ablation(mut self, preset: AblationPreset) -> Self {
        self.ablation = preset.ablation();
        self
    }

    /// Weights actually used, with disabled terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            distill: if self.ablation.distill { self.weights.distill } else { 0.0 },
            smooth: self.weights.smooth,
            consistency: if self.ablation.consistency {
                self.weights.consistency
            } else {
                0.0
            },
        }
    }

    pub fn student_resolution(&self) -> Resolution {
        Resolution {
            height: self.student.height,
            width: self.student.width,
        }
    }

    pub fn teacher_resolution(&self) -> Resolution {
        Resolution {
            height: self.teacher.height,
            width: self.teacher.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if !(self.max_dt >= 0.0) || !(self.min_translation >= 0.0) {
            return bad("max_dt and min_translation must be non-negative");
        }
        let w = &self.weights;
        if [w.distill, w.smooth, w.consistency].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.teacher.height == 0 || self.teacher.width == 0 {
            return bad("teacher resolution must be positive");
        }
        self.depth_range.validate()?;
        if !(self.prior_depth > self.depth_range.d_min && self.prior_depth < self.depth_range.d_max) {
            return bad("prior_depth must lie inside the depth range");
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn insert_path(table: &mut toml::Table, path: &[String], value: toml::Value) {
    match path {
        [] => {}
        [last] => {
            table.insert(last.clone(), value);
        }
        [head, rest @ ..] => {
            let entry = table
                .entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if !entry.is_table() {
                *entry = toml::Value::Table(toml::Table::new());
            }
            if let toml::Value::Table(t) = entry {
                insert_path(t, rest, value);
            }
        }
    }
}

/// Interprets an environment value as a TOML scalar, falling back to a
/// bare string.
fn parse_scalar(s: &str) -> toml::Value {
    let probe = format!("v = {s}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(s.into())),
        Err(_) => toml::Value::String(s.into()),
    }
}
