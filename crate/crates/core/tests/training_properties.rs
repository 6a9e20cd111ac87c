use ldn_core::layer::{layer_forward, layer_kernels};
use ldn_core::model::{encode_input, ModelConfig, ModelParams};
use ldn_core::training::{
    adam_step, batch_loss_and_grad, generate_task, train, AdamState, Checkpoint, Task, TrainConfig,
};
use ldn_core::{Error, SeededRng};

fn small_model(task: Task) -> ModelConfig {
    ModelConfig {
        vocab_size: task.vocab_size(),
        num_classes: task.num_classes(),
        d: 8,
        psi_hidden: 4,
        t_max: 16,
        ..ModelConfig::default()
    }
}

fn short_run(task: Task, seq_len: usize, steps: u64) -> TrainConfig {
    TrainConfig {
        task,
        seq_len,
        steps,
        batch_size: 4,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn labels_follow_the_rules() {
    for (task, t_len) in [(Task::Majority, 15), (Task::CopyFirst, 16), (Task::Parity, 16)] {
        let batch = generate_task(task, t_len, 10_000, &mut SeededRng::new(5)).unwrap();
        for (seq, &label) in batch.sequences.iter().zip(&batch.labels) {
            assert_eq!(seq.len(), t_len);
            assert!(seq.iter().all(|&x| x < task.vocab_size()));
            let ones = seq.iter().filter(|&&x| x == 1).count();
            let expect = match task {
                Task::Majority => usize::from(ones > t_len / 2),
                Task::CopyFirst => seq[0],
                Task::Parity => ones % 2,
            };
            assert_eq!(label, expect);
        }
    }
}

#[test]
fn task_lengths_are_validated() {
    let mut rng = SeededRng::new(0);
    assert!(matches!(
        generate_task(Task::Majority, 16, 1, &mut rng),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        generate_task(Task::Parity, 1, 1, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn training_is_seed_deterministic() {
    let model = small_model(Task::Majority);
    let run = || train(&model, &short_run(Task::Majority, 7, 12), |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let steps: Vec<u64> = a.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 12]);

    let other = train(
        &model,
        &TrainConfig {
            seed: 43,
            ..short_run(Task::Majority, 7, 12)
        },
        |_| {},
    )
    .unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn zero_steps_logs_once_and_keeps_the_initialization() {
    let model = small_model(Task::Majority);
    let mut seen = Vec::new();
    let out = train(&model, &short_run(Task::Majority, 7, 0), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].step, 0);
    assert_eq!(out.log, seen);
    let init = Checkpoint::from_params(&ModelParams::init(&model).unwrap(), 0);
    assert_eq!(out.checkpoint, init);
}

#[test]
fn initial_loss_is_near_ln_two() {
    let model = small_model(Task::Majority);
    let out = train(&model, &short_run(Task::Majority, 15, 0), |_| {}).unwrap();
    let loss = out.log[0].loss;
    assert!((loss - 2f64.ln()).abs() <= 0.3, "{loss}");
    assert_eq!(out.log[0].dt_per_layer.len(), 2);
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let model = small_model(Task::Majority);
    let cfg = TrainConfig {
        lr: 1e300,
        ..short_run(Task::Majority, 7, 10)
    };
    match train(&model, &cfg, |_| {}) {
        Err(Error::Divergence(report)) => {
            assert!(report.step >= 1);
            assert_eq!(report.sequences.len(), 4);
            assert_eq!(report.dt_per_layer.len(), 2);
            assert!(report.to_string().contains("dt per layer"));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e300 should diverge"),
    }
}

#[test]
fn cosine_schedule() {
    let cfg = TrainConfig {
        cosine_lr: true,
        steps: 100,
        lr: 1.0,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.lr_at(1), 1.0);
    assert!((cfg.lr_at(51) - 0.5).abs() < 1e-12);
    assert!(cfg.lr_at(100) < 1e-3);
    assert_eq!(TrainConfig::default().lr_at(77), 3e-3);
}

/// Replays the optimizer loop by hand and inspects the realized kernels of
/// every layer after every update.
#[test]
fn kernels_stay_stable_throughout_training() {
    let model = small_model(Task::CopyFirst);
    let cfg = short_run(Task::CopyFirst, 10, 40);
    let mut params = ModelParams::init(&model).unwrap();
    let mut states: Vec<AdamState> = params
        .named_tensors()
        .iter()
        .map(|(_, m)| AdamState::zeros_like(m))
        .collect();
    let mut rng = SeededRng::new(cfg.seed);
    let hyper = cfg.hyper();
    for step in 1..=cfg.steps {
        let batch = generate_task(cfg.task, cfg.seq_len, cfg.batch_size, &mut rng).unwrap();
        let (_, grads) = batch_loss_and_grad(&batch, &params, &model).unwrap();
        params
            .update_each(|i, _, p| adam_step(p, &grads[i], &mut states[i], step, 0.05, &hyper))
            .unwrap();
        let (mut h, e) = encode_input(&batch.sequences[0], &params, &model).unwrap();
        for layer in &params.layers {
            let (kd, ka) = layer_kernels(&h, layer, model.use_norm).unwrap();
            for k in [&kd, &ka] {
                assert!(k.max_row_sum() <= 1.0 + 1e-9, "step {step}");
                assert!(k.delta_t_eff > 0.0 && k.delta_t_eff < 1.0);
            }
            h = layer_forward(&h, &e, layer, model.use_norm).unwrap();
        }
    }
}
