//! Fine-tuning loop: batches triplets, assembles the weighted loss, updates
//! the student, checkpoints every epoch and logs a JSONL run manifest.

pub mod config;
pub mod objective;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{directory_checksums, scale_intrinsics, Dataset, FrameTriplet};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::losses::{LossBreakdown, LossWeights};
use crate::models::nn::Adam;
use crate::models::{StudentConfig, Teacher, TeacherPrediction, ToyStudent};
use crate::raster::{resize_image, Image};

pub use config::{Ablation, AblationPreset, Normalization, TrainConfig};
pub use objective::{Objective, TripletLoss, TripletView};

pub const CHECKPOINT_FORMAT: &str = "selftune-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BEST_CHECKPOINT: &str = "best.json";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_{epoch:03}.json")
}

/// Frames, teacher maps and triplets held in memory at student resolution.
pub struct TrainingData {
    pub intrinsics: CameraIntrinsics,
    pub images: Vec<Image>,
    pub teacher: Vec<TeacherPrediction>,
    pub triplets: Vec<FrameTriplet>,
    pub frame_ids: Vec<usize>,
}

impl TrainingData {
    pub fn load(dataset: &Dataset, teacher: &dyn Teacher, config: &TrainConfig) -> Result<Self> {
        let (h, w) = (config.student.height, config.student.width);
        let (th, tw) = (config.teacher.height, config.teacher.width);
        let intrinsics = scale_intrinsics(&dataset.intrinsics, w, h)?;
        let mut images = Vec::with_capacity(dataset.len());
        let mut maps = Vec::with_capacity(dataset.len());
        for (idx, frame) in dataset.frames.iter().enumerate() {
            let native = dataset.load_image(idx)?;
            let pred = teacher.predict(frame.id, resize_image(native.view(), th, tw).view())?;
            if pred.resolution() != (th, tw) {
                return Err(Error::Data(format!(
                    "teacher map for frame {} is {:?}, configured teacher resolution is {th}×{tw}",
                    frame.id,
                    pred.resolution()
                )));
            }
            if pred.kind() != config.teacher.output_kind {
                return Err(Error::Data(format!(
                    "teacher map for frame {} has kind {:?}, configured {:?}",
                    frame.id,
                    pred.kind(),
                    config.teacher.output_kind
                )));
            }
            maps.push(pred);
            images.push(if native.dim() == (3, h, w) {
                native
            } else {
                resize_image(native.view(), h, w)
            });
        }
        let triplets = dataset.triplets(config.stride, config.min_translation);
        Ok(TrainingData {
            intrinsics,
            images,
            teacher: maps,
            triplets,
            frame_ids: dataset.frames.iter().map(|f| f.id).collect(),
        })
    }

    /// Splits triplet indices into (training, validation). Every n-th
    /// triplet is held out; with no hold-out, validation reuses training.
    pub fn split(&self, validation_every: usize) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..self.triplets.len()).collect();
        if validation_every < 2 || self.triplets.len() < validation_every {
            return (all.clone(), all);
        }
        all.iter()
            .partition(|&&i| i % validation_every != validation_every - 1)
    }

    pub fn view(&self, triplet: usize) -> TripletView<'_> {
        let t = &self.triplets[triplet];
        TripletView {
            target: self.images[t.target].view(),
            sources: [self.images[t.sources[0]].view(), self.images[t.sources[1]].view()],
            rel_poses: &t.rel_poses,
            intrinsics: &self.intrinsics,
            teacher: &self.teacher[t.target],
        }
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Mean over the batch.
    pub breakdown: LossBreakdown,
    pub per_triplet: Vec<LossBreakdown>,
    pub automask_fraction: f64,
}

pub struct Trainer {
    pub student: ToyStudent,
    pub objective: Objective,
    optimizer: Adam,
    deterministic: bool,
}

impl Trainer {
    pub fn new(student: ToyStudent, config: &TrainConfig) -> Self {
        let optimizer = student.optimizer(config.learning_rate);
        Trainer {
            student,
            objective: Objective {
                weights: config.effective_weights(),
                range: config.depth_range,
                normalization: config.normalization,
            },
            optimizer,
            deterministic: config.deterministic,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.step
    }

    /// Loss terms and output gradients without touching the parameters.
    pub fn evaluate_batch(&self, data: &TrainingData, batch: &[usize]) -> Result<(Vec<TripletLoss>, Array3<f64>, crate::models::student::StudentCache)> {
        let b = batch.len();
        let mut inputs: Vec<ArrayView3<f64>> = Vec::with_capacity(3 * b);
        for &i in batch {
            inputs.push(data.images[data.triplets[i].target].view());
        }
        for &i in batch {
            let t = &data.triplets[i];
            inputs.push(data.images[t.sources[0]].view());
            inputs.push(data.images[t.sources[1]].view());
        }
        let (out, cache) = self.student.forward(&inputs)?;
        let eval = |n: usize| {
            let i = batch[n];
            self.objective.evaluate(
                data.view(i),
                [
                    out.index_axis(Axis(0), n),
                    out.index_axis(Axis(0), b + 2 * n),
                    out.index_axis(Axis(0), b + 2 * n + 1),
                ],
            )
        };
        let losses: Vec<TripletLoss> = if self.deterministic {
            (0..b).map(eval).collect::<Result<_>>()?
        } else {
            (0..b).into_par_iter().map(eval).collect::<Result<_>>()?
        };
        Ok((losses, out, cache))
    }

    /// Forward on targets and both neighbors, loss assembly, one Adam update.
    pub fn train_step(&mut self, data: &TrainingData, batch: &[usize]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let b = batch.len();
        let (losses, out, cache) = self.evaluate_batch(data, batch)?;
        let mut grad = Array3::zeros(out.raw_dim());
        let inv_b = 1.0 / b as f64;
        for (n, l) in losses.iter().enumerate() {
            grad.index_axis_mut(Axis(0), n).scaled_add(inv_b, &l.grad_target);
            grad.index_axis_mut(Axis(0), b + 2 * n).scaled_add(inv_b, &l.grad_sources[0]);
            grad.index_axis_mut(Axis(0), b + 2 * n + 1).scaled_add(inv_b, &l.grad_sources[1]);
        }
        let param_grads = self.student.backward(&cache, &grad);
        let finite = param_grads
            .iter()
            .all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::numerical("student backward", "non-finite parameter gradient"));
        }
        self.student.apply(&mut self.optimizer, &param_grads);
        let per_triplet: Vec<LossBreakdown> = losses.iter().map(|l| l.breakdown.clone()).collect();
        Ok(StepReport {
            breakdown: LossBreakdown::mean(&per_triplet).expect("non-empty batch"),
            automask_fraction: losses.iter().map(|l| l.automask_fraction).sum::<f64>() * inv_b,
            per_triplet,
        })
    }

    /// Mean photometric loss over `triplets` (skipped ones excluded).
    pub fn validation_photo(&self, data: &TrainingData, triplets: &[usize]) -> Result<Option<f64>> {
        photometric_score(&self.student, &self.objective, data, triplets)
    }
}

fn photometric_score(student: &ToyStudent, objective: &Objective, data: &TrainingData, triplets: &[usize]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in triplets {
        let s = student.predict(data.images[data.triplets[i].target].view())?;
        if let Some(v) = objective.photometric(data.view(i), s.view())? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Untrained student for `config`, head biased towards `prior_depth`.
pub fn initial_student(config: &TrainConfig) -> Result<ToyStudent> {
    ToyStudent::new(StudentConfig {
        base_channels: config.student.base_channels,
        height: config.student.height,
        width: config.student.width,
        initial_output: config.depth_range.normalized_disparity(config.prior_depth),
        seed: config.seed,
    })
}

/// Distillation-only warm-up on every frame. The loss is invariant to
/// affine changes of the output, so the result learns structure while its
/// scale stays arbitrary. Returns the per-epoch mean loss.
pub fn warm_up(student: &mut ToyStudent, data: &TrainingData, config: &TrainConfig) -> Result<Vec<f64>> {
    let objective = Objective {
        weights: LossWeights {
            distill: 1.0,
            smooth: 0.0,
            consistency: 0.0,
        },
        range: config.depth_range,
        normalization: config.normalization,
    };
    let mut opt = student.optimizer(config.pretrain_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let views: Vec<_> = batch.iter().map(|&f| data.images[f].view()).collect();
            let (out, cache) = student.forward(&views)?;
            let mut grad = Array3::zeros(out.raw_dim());
            for (n, &f) in batch.iter().enumerate() {
                if let Some((v, g)) = objective.distill_only(&data.teacher[f], out.index_axis(Axis(0), n))? {
                    if !v.is_finite() {
                        return Err(Error::numerical("warm-up distillation loss", "non-finite value"));
                    }
                    total += v;
                    count += 1;
                    grad.index_axis_mut(Axis(0), n).scaled_add(1.0 / batch.len() as f64, &g);
                }
            }
            let grads = student.backward(&cache, &grad);
            student.apply(&mut opt, &grads);
        }
        let mean = if count > 0 { total / count as f64 } else { 0.0 };
        info!("warm-up epoch {}/{}: distillation {mean:.5}", epoch + 1, config.pretrain_epochs);
        history.push(mean);
    }
    Ok(history)
}

/// Maps a student output to metric depth under the run's settings.
pub fn output_to_depth(config: &TrainConfig, output: ArrayView2<f64>) -> Result<DepthMap> {
    let objective = Objective {
        weights: config.effective_weights(),
        range: config.depth_range,
        normalization: config.normalization,
    };
    Ok(objective.to_depth(output)?.depth)
}

/// Versioned parameter container with the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub validation_photo: Option<f64>,
    pub config: TrainConfig,
    pub student: ToyStudent,
}

impl Checkpoint {
    pub fn new(epoch: usize, validation_photo: Option<f64>, config: &TrainConfig, student: &ToyStudent) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch,
            validation_photo,
            config: config.clone(),
            student: student.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Data(format!("{}: cannot write checkpoint: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Data(format!("{}: not a checkpoint: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn predict_depth(&self, image: ArrayView3<f64>) -> Result<DepthMap> {
        let (h, w) = (self.config.student.height, self.config.student.width);
        let out = if image.dim() == (3, h, w) {
            self.student.predict(image)?
        } else {
            self.student.predict(resize_image(image, h, w).view())?
        };
        output_to_depth(&self.config, out.view())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Option<LossBreakdown>,
    pub validation_photo: Option<f64>,
    pub wall_clock_s: f64,
}

/// One line of the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ManifestRecord {
    Start {
        code_version: String,
        config: TrainConfig,
        effective_weights: LossWeights,
        dataset: PathBuf,
        dataset_checksums: BTreeMap<String, String>,
        frames: usize,
        train_triplets: usize,
        validation_triplets: usize,
    },
    WarmUp {
        epoch: usize,
        distillation: f64,
    },
    Step {
        epoch: usize,
        step: u64,
        breakdown: LossBreakdown,
        automask_fraction: f64,
    },
    Epoch(EpochRecord),
    End {
        best_epoch: usize,
        best_validation_photo: Option<f64>,
        wall_clock_s: f64,
        student_checksum: String,
    },
}

/// Append-only JSONL writer.
pub struct Manifest {
    path: PathBuf,
    file: File,
}

impl Manifest {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Manifest {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &ManifestRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<ManifestRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub student: ToyStudent,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// One record per trained epoch (empty for a zero-epoch run).
    pub history: Vec<EpochRecord>,
    pub warm_up: Vec<f64>,
}

/// Full run: warm-up (unless training from scratch), epoch loop with
/// shuffled batches, a checkpoint per epoch and `best.json` chosen by
/// validation photometric loss.
pub fn fit(dataset: &Dataset, teacher: &dyn Teacher, config: &TrainConfig, out: &Path) -> Result<FitOutcome> {
    config.validate()?;
    let data = TrainingData::load(dataset, teacher, config)?;
    fit_loaded(&data, &dataset.root, config, out)
}

pub fn fit_loaded(data: &TrainingData, dataset_root: &Path, config: &TrainConfig, out: &Path) -> Result<FitOutcome> {
    let clock = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if data.triplets.is_empty() {
        return Err(Error::Data("dataset yields no training triplets".into()));
    }
    let (train_idx, val_idx) = data.split(config.validation_every);
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = Manifest::create(&manifest_path)?;
    manifest.append(&ManifestRecord::Start {
        code_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        effective_weights: config.effective_weights(),
        dataset: dataset_root.to_path_buf(),
        dataset_checksums: directory_checksums(dataset_root)?,
        frames: data.images.len(),
        train_triplets: train_idx.len(),
        validation_triplets: val_idx.len(),
    })?;

    let mut student = initial_student(config)?;
    let warm = if config.ablation.pretrained {
        warm_up(&mut student, data, config)?
    } else {
        Vec::new()
    };
    for (epoch, &d) in warm.iter().enumerate() {
        manifest.append(&ManifestRecord::WarmUp { epoch: epoch + 1, distillation: d })?;
    }

    let mut trainer = Trainer::new(student, config);
    let mut best_val = trainer.validation_photo(data, &val_idx)?;
    let mut best_epoch = 0;
    let mut best_student = trainer.student.clone();
    Checkpoint::new(0, best_val, config, &trainer.student).save(&out.join(checkpoint_name(0)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let report = trainer.train_step(data, batch)?;
            manifest.append(&ManifestRecord::Step {
                epoch,
                step: trainer.steps_taken(),
                breakdown: report.breakdown.clone(),
                automask_fraction: report.automask_fraction,
            })?;
            steps.extend(report.per_triplet);
        }
        let val = trainer.validation_photo(data, &val_idx)?;
        let record = EpochRecord {
            epoch,
            train: LossBreakdown::mean(&steps),
            validation_photo: val,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}/{}: train total {:.5} photo {:.5}, validation photo {}",
            config.epochs,
            record.train.as_ref().map_or(f64::NAN, |b| b.total),
            record.train.as_ref().map_or(f64::NAN, |b| b.photo),
            val.map_or("n/a".to_string(), |v| format!("{v:.5}"))
        );
        Checkpoint::new(epoch, val, config, &trainer.student).save(&out.join(checkpoint_name(epoch)))?;
        let improved = match (val, best_val) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_val = val;
            best_epoch = epoch;
            best_student = trainer.student.clone();
        }
        manifest.append(&ManifestRecord::Epoch(record.clone()))?;
        history.push(record);
    }
    if best_val.is_none() {
        warn!("no validation photometric loss could be computed; keeping the last epoch");
        best_epoch = config.epochs;
        best_student = trainer.student.clone();
    }

    let best_path = out.join(BEST_CHECKPOINT);
    Checkpoint::new(best_epoch, best_val, config, &best_student).save(&best_path)?;
    manifest.append(&ManifestRecord::End {
        best_epoch,
        best_validation_photo: best_val,
        wall_clock_s: clock.elapsed().as_secs_f64(),
        student_checksum: best_student.checksum(),
    })?;
    Ok(FitOutcome {
        student: best_student,
        best_epoch,
        best_checkpoint: best_path,
        manifest: manifest_path,
        history,
        warm_up: warm,
    })
}
