use std::path::Path;

use ndarray::Array2;

use selftune::dataio::{directory_checksums, Dataset};
use selftune::evaluator::ground_truth;
use selftune::geometry::DepthRange;
use selftune::losses::LossWeights;
use selftune::models::PrecomputedTeacher;
use selftune::synth::{generate_sequence, SequenceSpec};
use selftune::trainer::{
    checkpoint_name, fit, initial_student, AblationPreset, Checkpoint, Manifest, ManifestRecord, Normalization,
    Objective, TrainConfig, Trainer, TrainingData, BEST_CHECKPOINT,
};

fn corpus(dir: &Path, frames: usize) -> Dataset {
    generate_sequence(&SequenceSpec::desk(7, frames), dir).unwrap();
    Dataset::open(dir, TrainConfig::desk().max_dt).unwrap()
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.epochs = 1;
    c.pretrain_epochs = 1;
    c.batch_size = 2;
    c
}

fn step_totals(manifest: &Path) -> Vec<f64> {
    Manifest::read(manifest)
        .unwrap()
        .into_iter()
        .filter_map(|r| match r {
            ManifestRecord::Step { breakdown, .. } => Some(breakdown.total),
            _ => None,
        })
        .collect()
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(&dir.path().join("data"), 6);
    let teacher = PrecomputedTeacher::new(&ds.root.join("teacher")).unwrap();
    let mut config = small_config();
    config.epochs = 0;
    let out = dir.path().join("run");
    let r = fit(&ds, &teacher, &config, &out).unwrap();
    assert!(r.history.is_empty());
    assert!(out.join(checkpoint_name(0)).exists());
    assert!(!out.join(checkpoint_name(1)).exists());
    assert_eq!(r.best_epoch, 0);
    assert_eq!(r.best_checkpoint, out.join(BEST_CHECKPOINT));
    Checkpoint::load(&r.best_checkpoint).unwrap();
    assert!(step_totals(&r.manifest).is_empty());
}

#[test]
fn gt_outputs_leave_little_photometric_loss_or_scale_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(&dir.path().join("data"), 8);
    let teacher = PrecomputedTeacher::new(&ds.root.join("teacher")).unwrap();
    let config = TrainConfig::desk();
    let data = TrainingData::load(&ds, &teacher, &config).unwrap();
    let objective = Objective {
        weights: LossWeights {
            distill: 0.0,
            smooth: 0.0,
            consistency: 0.0,
        },
        range: DepthRange::default(),
        normalization: Normalization::Identity,
    };
    let output = |idx: usize, scale: f64| -> Array2<f64> {
        let gt = ground_truth(&ds, idx).unwrap();
        gt.values.mapv(|z| objective.range.normalized_disparity(z * scale))
    };
    // Derivative along a global rescaling of the target depth. The L1 part
    // keeps per-pixel gradients from vanishing, but at the true scale the
    // aggregate pull in either direction should cancel.
    let scale_derivative = |g: &Array2<f64>, x: &Array2<f64>| {
        g.iter()
            .zip(x.iter())
            .map(|(g, x)| g / objective.range.depth_derivative(*x) * objective.range.depth(*x))
            .sum::<f64>()
    };
    let run = |scale: f64| {
        let (mut loss, mut grad) = (0.0, 0.0);
        for (i, t) in data.triplets.iter().enumerate() {
            let outs = [output(t.target, scale), output(t.sources[0], scale), output(t.sources[1], scale)];
            let r = objective
                .evaluate(data.view(i), [outs[0].view(), outs[1].view(), outs[2].view()])
                .unwrap();
            loss += r.breakdown.total;
            grad += scale_derivative(&r.grad_target, &outs[0]);
        }
        (loss, grad)
    };
    let (loss_gt, grad_gt) = run(1.0);
    for scale in [0.7, 1.4] {
        let (loss, grad) = run(scale);
        assert!(loss_gt < 0.25 * loss, "loss {loss_gt} vs {loss} at ×{scale}");
        assert!(grad_gt.abs() < 0.1 * grad.abs(), "scale derivative {grad_gt} vs {grad} at ×{scale}");
        // Too near wants to grow, too far wants to shrink.
        assert_eq!(grad < 0.0, scale < 1.0);
    }
}

#[test]
fn teacher_is_untouched_by_a_hundred_steps() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(&dir.path().join("data"), 8);
    let teacher = PrecomputedTeacher::new(&ds.root.join("teacher")).unwrap();
    let before = directory_checksums(&ds.root.join("teacher")).unwrap();
    let mut config = small_config();
    config.batch_size = 1;
    let data = TrainingData::load(&ds, &teacher, &config).unwrap();
    let frozen: Vec<_> = data.teacher.iter().map(|t| t.values().clone()).collect();
    let mut trainer = Trainer::new(initial_student(&config).unwrap(), &config);
    let n = data.triplets.len();
    for step in 0..100 {
        trainer.train_step(&data, &[step % n]).unwrap();
    }
    assert_eq!(trainer.steps_taken(), 100);
    for (t, f) in data.teacher.iter().zip(&frozen) {
        assert_eq!(t.values(), f);
    }
    assert_eq!(directory_checksums(&ds.root.join("teacher")).unwrap(), before);
    // Reloading yields the same bits as well.
    let again = TrainingData::load(&ds, &teacher, &config).unwrap();
    for (t, f) in again.teacher.iter().zip(&frozen) {
        assert_eq!(t.values(), f);
    }
}

#[test]
fn same_seed_gives_the_same_trace_and_manifest_totals_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(&dir.path().join("data"), 10);
    let teacher = PrecomputedTeacher::new(&ds.root.join("teacher")).unwrap();
    let config = small_config();
    let a = fit(&ds, &teacher, &config, &dir.path().join("a")).unwrap();
    let b = fit(&ds, &teacher, &config, &dir.path().join("b")).unwrap();
    let (ta, tb) = (step_totals(&a.manifest), step_totals(&b.manifest));
    assert!(!ta.is_empty());
    assert_eq!(ta.len(), tb.len());
    for (x, y) in ta.iter().zip(&tb) {
        assert!((x - y).abs() <= 1e-6);
    }
    for r in Manifest::read(&a.manifest).unwrap() {
        if let ManifestRecord::Step { breakdown, .. } = r {
            assert!((breakdown.total - breakdown.reconstructed_total()).abs() <= 1e-12);
        }
    }
    // One checkpoint per epoch plus the initial one.
    assert!(dir.path().join("a").join(checkpoint_name(1)).exists());
}

#[test]
fn ablation_runs_record_their_effective_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus(&dir.path().join("data"), 6);
    let teacher = PrecomputedTeacher::new(&ds.root.join("teacher")).unwrap();
    let mut config = small_config().with_ablation(AblationPreset::PhotoOnly);
    config.epochs = 0;
    let r = fit(&ds, &teacher, &config, &dir.path().join("po")).unwrap();
    let start = Manifest::read(&r.manifest).unwrap().into_iter().next().unwrap();
    let ManifestRecord::Start { effective_weights, config: recorded, .. } = start else {
        panic!("manifest must open with a start record");
    };
    assert_eq!(effective_weights.distill, 0.0);
    assert_eq!(effective_weights.consistency, 0.0);
    assert_eq!(effective_weights.smooth, TrainConfig::desk().weights.smooth);
    assert_eq!(recorded, config);
}
