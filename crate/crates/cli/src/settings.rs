//! Config-file fallbacks for command-line flags.
//!
//! A config file is TOML. Tables named after subcommands (`[synth_gen]`,
//! `[finetune]`, `[evaluate]`, `[export_cloud]`) hold flag defaults with the
//! flag's name in snake case. Everything else is training configuration,
//! layered over the selected profile. Flags always win.

use std::path::{Path, PathBuf};

use selftune::trainer::TrainConfig;

use crate::{CliResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    SynthGen,
    Finetune,
    Evaluate,
    ExportCloud,
}

impl Section {
    const ALL: [Section; 4] = [Section::SynthGen, Section::Finetune, Section::Evaluate, Section::ExportCloud];

    fn key(self) -> &'static str {
        match self {
            Section::SynthGen => "synth_gen",
            Section::Finetune => "finetune",
            Section::Evaluate => "evaluate",
            Section::ExportCloud => "export_cloud",
        }
    }
}

pub struct FileSettings {
    section: Section,
    flags: toml::Table,
    training: toml::Table,
}

impl FileSettings {
    pub fn empty(section: Section) -> Self {
        FileSettings {
            section,
            flags: toml::Table::new(),
            training: toml::Table::new(),
        }
    }

    pub fn load(path: &Path, section: Section) -> selftune::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            selftune::Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut root: toml::Table = toml::from_str(&text)
            .map_err(|e| selftune::Error::Config(format!("{}: {e}", path.display())))?;
        let mut flags = toml::Table::new();
        for s in Section::ALL {
            if let Some(v) = root.remove(s.key()) {
                let toml::Value::Table(t) = v else {
                    return Err(selftune::Error::Config(format!(
                        "{}: [{}] must be a table",
                        path.display(),
                        s.key()
                    )));
                };
                if s == section {
                    flags = t;
                }
            }
        }
        Ok(FileSettings {
            section,
            flags,
            training: root,
        })
    }

    fn missing(&self, key: &str) -> Failure {
        Failure::Usage(format!(
            "missing --{} (or `{key}` under [{}] in --config)",
            key.replace('_', "-"),
            self.section.key()
        ))
    }

    fn wrong_type(&self, key: &str, expected: &str) -> Failure {
        Failure::Usage(format!("[{}] {key} must be {expected}", self.section.key()))
    }

    pub fn string_or(&self, flag: Option<String>, key: &str) -> CliResult<Option<String>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.flags.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.wrong_type(key, "a string")),
        }
    }

    pub fn require_path(&self, flag: Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        if let Some(p) = flag {
            return Ok(p);
        }
        self.string_or(None, key)?
            .map(PathBuf::from)
            .ok_or_else(|| self.missing(key))
    }

    fn integer(&self, key: &str) -> CliResult<Option<i64>> {
        match self.flags.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(Some(*v)),
            Some(_) => Err(self.wrong_type(key, "a non-negative integer")),
        }
    }

    pub fn u64_or(&self, flag: Option<u64>, key: &str, default: u64) -> CliResult<u64> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.integer(key)?.map_or(default, |v| v as u64)),
        }
    }

    pub fn usize_or(&self, flag: Option<usize>, key: &str, default: usize) -> CliResult<usize> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.integer(key)?.map_or(default, |v| v as usize)),
        }
    }

    pub fn f64_or(&self, flag: Option<f64>, key: &str, default: f64) -> CliResult<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.flags.get(key) {
            None => Ok(default),
            Some(toml::Value::Float(v)) => Ok(*v),
            Some(toml::Value::Integer(v)) => Ok(*v as f64),
            Some(_) => Err(self.wrong_type(key, "a number")),
        }
    }

    /// Training configuration: `base` with the file's non-section keys on top.
    pub fn train_config(&self, base: TrainConfig) -> selftune::Result<TrainConfig> {
        if self.training.is_empty() {
            return Ok(base);
        }
        base.merged(&self.training)
    }
}
