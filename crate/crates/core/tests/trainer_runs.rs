use superlora::adapter::{init_adapter, Rank, SuperLoraConfig};
use superlora::factorization::CoreKind;
use superlora::grouping::GroupMode;
use superlora::projection::ProjectionMode;
use superlora::trainer::{forward, train, SyntheticTask, ToyModel, TrainConfig};

fn default_run(cfg: &SuperLoraConfig, train_cfg: &TrainConfig) -> superlora::trainer::TrainReport {
    let model = ToyModel::new(train_cfg.model.clone(), train_cfg.seed).unwrap();
    let task = SyntheticTask::new(&model, &train_cfg.task, train_cfg.seed + 1).unwrap();
    let mut state = init_adapter(cfg, &model.manifest(), train_cfg.seed + 2).unwrap();
    let checksum = model.checksum();
    let report = train(&mut state, &model, &task, train_cfg).unwrap();
    assert_eq!(model.checksum(), checksum);
    report
}

#[test]
fn lora_rank2_halves_default_toy_loss() {
    let report = default_run(&SuperLoraConfig::lora(4, 2, 2.0), &TrainConfig::default());
    assert!(report.loss_ratio() < 0.5, "ratio {}", report.loss_ratio());
}

#[test]
fn traces_are_bitwise_reproducible() {
    let cfg = TrainConfig {
        steps: 60,
        ..TrainConfig::default()
    };
    let mut sl = SuperLoraConfig::lora(1, 2, 2.0);
    sl.group_mode = GroupMode::GroupWise;
    sl.order = 3;
    sl.reshape = true;
    sl.core = CoreKind::Full;
    sl.rank = Rank::Uniform(2);
    sl.projection = ProjectionMode::Nonlinear;
    sl.rho = 0.5;
    let a = default_run(&sl, &cfg);
    let b = default_run(&sl, &cfg);
    let bits = |r: &superlora::trainer::TrainReport| {
        r.history
            .iter()
            .map(|h| h.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    let mut out = Vec::new();
    a.write_metrics(&mut out).unwrap();
    let first = String::from_utf8(out)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(v.get("step").is_some() && v.get("loss").is_some() && v.get("eval_acc").is_some());
}

#[test]
fn step_zero_loss_is_the_frozen_baseline() {
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let model = ToyModel::new(cfg.model.clone(), 0).unwrap();
    let task = SyntheticTask::new(&model, &cfg.task, 1).unwrap();
    let base = forward(&model, &model.zero_deltas(), &task.target.train)
        .unwrap()
        .0;
    let mut state = init_adapter(&SuperLoraConfig::lora(4, 2, 2.0), &model.manifest(), 2).unwrap();
    let report = train(&mut state, &model, &task, &cfg).unwrap();
    assert_eq!(report.history[0].loss, base);
    assert_eq!(report.initial_loss, base);
}

#[test]
fn train_config_json() {
    let cfg =
        TrainConfig::from_json(r#"{"steps": 10, "batch_size": 4, "learning_rate": 0.05}"#).unwrap();
    assert_eq!(cfg.grad_check_interval, 0);
    assert!(
        TrainConfig::from_json(r#"{"steps": 0, "batch_size": 4, "learning_rate": 0.05}"#).is_err()
    );
    assert!(TrainConfig::from_json(
        r#"{"steps": 1, "batch_size": 4, "learning_rate": 0.05, "momentum": 0.9}"#
    )
    .is_err());
}
