use scalcodec_core::pipelines::{BaseModel, EnhancementModel, Mode, PipelineConfig};
use scalcodec_core::synthetic::{generate_dataset, DatasetSpec};
use scalcodec_core::trainer::{train, TrainOutcome, TrainSchedule};

fn plateau_epoch(o: &TrainOutcome, max_epochs: usize) -> usize {
    o.first_plateau().unwrap_or(max_epochs + 1)
}

#[test]
fn tiny_base_loss_falls_over_twenty_epochs() {
    let data = generate_dataset(DatasetSpec { count: 256, crop_size: 64 }, 11).unwrap();
    let (train_set, val_set) = data.split(11);
    let cfg = PipelineConfig::tiny();
    let mut base = BaseModel::new(&cfg, 11).unwrap();
    let schedule = TrainSchedule {
        max_epochs: 20,
        seed: 11,
        ..TrainSchedule::default()
    };
    let out = train(&mut base, &train_set, &val_set, &schedule).unwrap();
    let first = out.history.first().unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(out.history.len(), 20);
    assert!(last.train.total < first.train.total, "{} vs {}", last.train.total, first.train.total);
    assert!(last.validation.total < first.validation.total);
}

#[test]
fn distortion_only_training_lowers_rmse_every_epoch() {
    let data = generate_dataset(DatasetSpec { count: 64, crop_size: 32 }, 5).unwrap();
    let (train_set, val_set) = data.split(5);
    let mut cfg = PipelineConfig::tiny();
    cfg.set_rate_weight(Mode::Standalone, 0.0);
    let mut enh = EnhancementModel::new(&cfg, Mode::Standalone, 5).unwrap();
    let schedule = TrainSchedule {
        learning_rate: 1e-3,
        max_epochs: 4,
        seed: 5,
        ..TrainSchedule::default()
    };
    let out = train(&mut enh, &train_set, &val_set, &schedule).unwrap();
    let rmse: Vec<f64> = out.history.iter().map(|r| r.validation.distortion).collect();
    assert!(rmse.windows(2).all(|w| w[1] < w[0]), "{rmse:?}");
}

#[test]
fn warm_start_from_low_rate_weight_plateaus_sooner() {
    let data = generate_dataset(DatasetSpec { count: 128, crop_size: 32 }, 21).unwrap();
    let (train_set, val_set) = data.split(21);
    let schedule = TrainSchedule {
        learning_rate: 1e-3,
        plateau_patience: 3,
        early_stop_patience: 6,
        max_epochs: 60,
        seed: 21,
        ..TrainSchedule::default()
    };
    let model = |lambda: f64| {
        let mut cfg = PipelineConfig::tiny();
        cfg.set_rate_weight(Mode::Standalone, lambda);
        EnhancementModel::new(&cfg, Mode::Standalone, 21).unwrap()
    };
    let mut low = model(0.002);
    let seeded = train(&mut low, &train_set, &val_set, &schedule).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("low.ckpt");
    std::fs::write(&ckpt, &seeded.checkpoint).unwrap();

    let mut cold = model(0.032);
    let cold_out = train(&mut cold, &train_set, &val_set, &schedule).unwrap();
    let mut warm = model(0.032);
    let warm_schedule = TrainSchedule {
        warm_start: Some(ckpt),
        ..schedule.clone()
    };
    let warm_out = train(&mut warm, &train_set, &val_set, &warm_schedule).unwrap();
    let (w, c) = (plateau_epoch(&warm_out, 60), plateau_epoch(&cold_out, 60));
    assert!(w < c, "warm start plateaued at epoch {w}, cold start at {c}");
}
