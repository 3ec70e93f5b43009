use ecn_core::dataset::features::{ModelInput, PathFeature, PathNode, Vocab};
use ecn_core::model::{Model, ModelConfig};
use ecn_core::paths::MetaPath;
use ecn_core::train::{
    Labeled, RunOptions, TrainConfig, TrainError, Trainer, BEST_CHECKPOINT, FINAL_CHECKPOINT, HISTORY_FILE,
};
use ecn_tensor::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab: Vocab {
            categories: 4,
            brands: 4,
            shops: 3,
            concepts: 3,
        },
        d_entity: 4,
        d_type: 2,
        d_day_gap: 2,
        d_output: 8,
        seq_len: 5,
        k_paths: 3,
        d_ff: 16,
        d_path: 6,
        mlp: vec![16, 8],
        ..ModelConfig::default()
    }
}

/// Concept 0 is always positive, everything else negative. The rest of the
/// input is noise, so the task is separable through the concept embedding.
fn separable(n: usize, seed: u64) -> (Vec<ModelInput>, Vec<u8>) {
    let cfg = tiny();
    let v = cfg.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let concept = i % v.concepts;
        let len = rng.random_range(0..=cfg.seq_len);
        let behaviors = (0..len)
            .map(|_| {
                [
                    rng.random_range(0..=v.categories),
                    rng.random_range(0..=v.brands),
                    rng.random_range(0..=v.shops),
                    rng.random_range(0..4),
                    rng.random_range(0..31),
                ]
            })
            .collect();
        let mut paths: [Vec<PathFeature>; 5] = Default::default();
        paths[MetaPath::Utc.index()] = (0..rng.random_range(0..=2))
            .map(|_| PathFeature {
                nodes: vec![PathNode::User, PathNode::Category(rng.random_range(0..v.categories)), PathNode::Concept(concept)],
            })
            .collect();
        inputs.push(ModelInput {
            behaviors,
            positions: (0..len).collect(),
            profile: [rng.random_range(0..3), 0, 2, 6],
            concept,
            schema: [2, 6, 7],
            paths,
        });
        labels.push(u8::from(concept == 0));
    }
    (inputs, labels)
}

fn config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 20,
        epochs,
        learning_rate: lr,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn epoch_losses(history: &ecn_core::train::TrainHistory) -> Vec<f64> {
    let epochs = history.steps.iter().map(|s| s.epoch).max().unwrap() + 1;
    (0..epochs)
        .map(|e| {
            let l: Vec<f64> = history.steps.iter().filter(|s| s.epoch == e).map(|s| s.loss).collect();
            l.iter().sum::<f64>() / l.len() as f64
        })
        .collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (x, y) = separable(100, 1);
    let (vx, vy) = separable(60, 2);
    let model: Model<f64> = Model::new(tiny(), 0).unwrap();
    let before = model.params().clone();
    let mut trainer = Trainer::new(model, config(0.0, 3)).unwrap();
    let history = trainer
        .run(Labeled::new(&x, &y).unwrap(), Some(Labeled::new(&vx, &vy).unwrap()), &RunOptions::default())
        .unwrap();
    assert_eq!(trainer.model().params(), &before);
    let aucs: Vec<f64> = history.steps.iter().filter_map(|s| s.val_auc).collect();
    assert_eq!(aucs.len(), 3);
    assert!(aucs.iter().all(|&a| a == aucs[0]));
    assert_eq!(trainer.step(), 15);
}

#[test]
fn loss_decreases_on_a_separable_toy() {
    let (x, y) = separable(200, 4);
    let (vx, vy) = separable(90, 5);
    let model: Model<f64> = Model::new(tiny(), 1).unwrap();
    let mut trainer = Trainer::new(model, config(0.01, 5)).unwrap();
    let history = trainer
        .run(Labeled::new(&x, &y).unwrap(), Some(Labeled::new(&vx, &vy).unwrap()), &RunOptions::default())
        .unwrap();
    let losses = epoch_losses(&history);
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "epoch losses {losses:?}");
    }
    assert!(losses[4] < 0.5 * 2f64.ln(), "{losses:?}");
    assert!(history.best.unwrap().1 > 0.99);
}

#[test]
fn training_is_deterministic() {
    let (x, y) = separable(80, 6);
    let run = || {
        let model: Model<f32> = Model::new(tiny(), 9).unwrap();
        let mut trainer = Trainer::new(model, config(0.005, 2)).unwrap();
        let h = trainer.run(Labeled::new(&x, &y).unwrap(), None, &RunOptions::default()).unwrap();
        (trainer.into_model().into_params(), h.steps)
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (x, y) = separable(90, 7);
    let (vx, vy) = separable(30, 8);
    let train = Labeled::new(&x, &y).unwrap();
    let val = Some(Labeled::new(&vx, &vy).unwrap());

    let mut straight = Trainer::new(Model::<f64>::new(tiny(), 2).unwrap(), config(0.01, 3)).unwrap();
    straight.run(train, val, &RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(Model::<f64>::new(tiny(), 2).unwrap(), config(0.01, 3)).unwrap();
    // 5 batches per epoch: step 7 is mid-way through the second epoch.
    let opts = RunOptions {
        checkpoint_dir: None,
        stop_at_step: Some(7),
    };
    first.run(train, val, &opts).unwrap();
    assert_eq!(first.step(), 7);
    first.checkpoint().unwrap().save(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::<f64>::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step(), 7);
    resumed.run(train, val, &RunOptions::default()).unwrap();
    assert_eq!(resumed.step(), 15);
    assert_eq!(resumed.model().params(), straight.model().params());
    assert_eq!(resumed.adam(), straight.adam());
}

#[test]
fn non_finite_loss_aborts_at_the_first_step() {
    let (x, y) = separable(40, 9);
    let mut model: Model<f64> = Model::new(tiny(), 3).unwrap();
    let id = model.params().id("mlp.2.bias").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(model, config(0.01, 1)).unwrap();
    let err = trainer.run(Labeled::new(&x, &y).unwrap(), None, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 1, .. }), "{err}");
    assert_eq!(trainer.step(), 0);
}

#[test]
fn run_writes_checkpoints_and_history() {
    let (x, y) = separable(60, 10);
    let (vx, vy) = separable(30, 11);
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(Model::<f32>::new(tiny(), 4).unwrap(), config(0.01, 2)).unwrap();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_at_step: None,
    };
    let history = trainer
        .run(Labeled::new(&x, &y).unwrap(), Some(Labeled::new(&vx, &vy).unwrap()), &opts)
        .unwrap();
    for f in [BEST_CHECKPOINT, FINAL_CHECKPOINT, HISTORY_FILE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + history.steps.len());
    let final_ckpt = Trainer::<f32>::from_checkpoint(Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap()).unwrap();
    assert_eq!(final_ckpt.model().params(), trainer.model().params());
    assert_eq!(final_ckpt.config(), trainer.config());
    assert_eq!(history.epoch_seconds.len(), 2);
}

#[test]
fn invalid_configs_are_rejected() {
    let model = || Model::<f32>::new(tiny(), 0).unwrap();
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(Trainer::new(model(), bad), Err(TrainError::Config { .. })));
    }
    let (x, _) = separable(3, 0);
    assert!(matches!(Labeled::new(&x, &[1]), Err(TrainError::LabelCount { .. })));
    let mut t = Trainer::new(model(), TrainConfig::default()).unwrap();
    assert!(matches!(t.run(Labeled::new(&[], &[]).unwrap(), None, &RunOptions::default()), Err(TrainError::EmptyTrainSet)));
}
