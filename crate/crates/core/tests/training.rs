mod common;

use common::desk_backbone;
use promptlab::pretrain::copy_token_accuracy;
use promptlab::probe::probe_run;
use promptlab::prompt::{InitOptions, PromptDims, PromptKind, PromptParams};
use promptlab::tasks::{generate, TaskKind, TaskSpec};
use promptlab::trainer::{train_full, train_prompt, Method, ParameterPartition, TrainConfig};
use promptlab::{Error, Tape};

fn desk_dims() -> PromptDims {
    PromptDims::new(32, 16).with_bottleneck(4).with_hidden(16)
}

fn init(kind: PromptKind, seed: u64) -> PromptParams {
    PromptParams::init(kind, desk_dims(), Some(&desk_backbone().embedding), InitOptions::default(), seed).unwrap()
}

fn short(kind: PromptKind, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::desk(Method::Prompt(kind))
    }
}

#[test]
fn pretrained_backbone_copies_held_out_strings() {
    let backbone = desk_backbone();
    assert!(backbone.is_frozen());
    let acc = copy_token_accuracy(backbone, 300, 12345).unwrap();
    assert!(acc > 0.95, "copy token accuracy {acc}");
}

#[test]
fn prompt_tuning_leaves_backbone_untouched() {
    let backbone = desk_backbone();
    let before = backbone.checksum();
    let (train, dev) = generate(&TaskSpec::new(TaskKind::Majority, 16, 8, 0)).unwrap();
    for kind in PromptKind::ALL {
        let mut params = init(kind, 0);
        let partition = ParameterPartition::for_prompt(backbone, &params);
        assert!(partition.is_disjoint());
        assert_eq!(partition.trainable.len(), params.tensors().len());
        train_prompt(backbone, &mut params, &train, &dev, &short(kind, 0, 2), None).unwrap();
        assert_eq!(backbone.checksum(), before, "{kind}");
    }
}

#[test]
fn unfrozen_backbone_is_rejected() {
    let mut backbone = desk_backbone().clone();
    backbone.set_frozen(false);
    let (train, dev) = generate(&TaskSpec::new(TaskKind::Majority, 4, 4, 0)).unwrap();
    let mut params = init(PromptKind::Vanilla, 0);
    let err = train_prompt(&backbone, &mut params, &train, &dev, &short(PromptKind::Vanilla, 0, 1), None);
    assert!(matches!(err, Err(Error::Invariant(_))));
}

#[test]
fn identical_runs_produce_identical_logs() {
    let backbone = desk_backbone();
    let (train, dev) = generate(&TaskSpec::new(TaskKind::Parity, 24, 16, 3)).unwrap();
    let run = |seed| {
        let mut params = init(PromptKind::Decomposed, seed);
        train_prompt(backbone, &mut params, &train, &dev, &short(PromptKind::Decomposed, seed, 3), None).unwrap()
    };
    assert_eq!(run(1).to_csv(), run(1).to_csv());
    assert_ne!(run(1).losses(), run(2).losses());
}

#[test]
fn losses_stay_finite_for_every_method_and_seed() {
    let backbone = desk_backbone();
    let (train, dev) = generate(&TaskSpec::new(TaskKind::PairMatch, 16, 8, 0)).unwrap();
    for kind in PromptKind::ALL {
        for seed in 0..3 {
            let mut params = init(kind, seed);
            let mut config = short(kind, seed, 2);
            config.lr = TrainConfig::default().lr;
            let log = train_prompt(backbone, &mut params, &train, &dev, &config, None).unwrap();
            assert!(!log.aborted);
            assert!(log.steps.iter().all(|s| s.loss.is_finite()), "{kind} seed {seed}");
            assert!(log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        }
    }
}

#[test]
fn vanilla_prompt_learns_majority() {
    let backbone = desk_backbone();
    let (train, dev) = generate(&TaskSpec::new(TaskKind::Majority, 64, 200, 0)).unwrap();
    let mut params = init(PromptKind::Vanilla, 0);
    let config = TrainConfig {
        epochs: 200,
        eval_every: 10,
        ..TrainConfig::desk(Method::Prompt(PromptKind::Vanilla))
    };
    let log = train_prompt(backbone, &mut params, &train, &dev, &config, None).unwrap();
    let best = log.epochs.iter().map(|e| e.accuracy).fold(0.0, f64::max);
    assert!(best > 0.9, "best dev accuracy {best}");
}

#[test]
fn rank_probe_sigma_stays_diagonal() {
    let backbone = desk_backbone();
    let (train, dev) = generate(&TaskSpec::new(TaskKind::Majority, 8, 4, 1)).unwrap();
    let mut params = init(PromptKind::RankProbe, 1);
    let mut seen = 0;
    let mut check = |step: usize, p: &PromptParams| {
        let PromptParams::RankProbe(rp) = p else { unreachable!() };
        let sigma = rp.sigma_matrix();
        for i in 0..sigma.rows() {
            for j in 0..sigma.cols() {
                if i != j {
                    assert_eq!(sigma.at(i, j).to_bits(), 0, "step {step}");
                }
            }
        }
        // U · ReLU(Σ) · V recomputed from the dense Σ.
        let mut t = Tape::new();
        let (u, s, v) = (t.param(&rp.u), t.param(&sigma), t.param(&rp.v));
        let s = t.relu(s);
        let us = t.matmul(u, s).unwrap();
        let prod = t.matmul(us, v).unwrap();
        assert_eq!(t.to_tensor(prod), p.materialize());
        seen = step;
        Ok(())
    };
    let config = TrainConfig {
        lr: 0.3,
        ..short(PromptKind::RankProbe, 1, 100)
    };
    train_prompt(backbone, &mut params, &train, &dev, &config, Some(&mut check)).unwrap();
    assert_eq!(seen, 100);
}

#[test]
fn probe_records_respect_invariants() {
    let backbone = desk_backbone();
    let (train, dev) = generate(&TaskSpec::new(TaskKind::Majority, 32, 8, 2)).unwrap();
    let mut params = init(PromptKind::RankProbe, 2);
    let config = TrainConfig {
        lr: 0.3,
        ..short(PromptKind::RankProbe, 2, 5)
    };
    let (records, log) = probe_run(backbone, &mut params, &train, &dev, &config, 4).unwrap();
    assert_eq!(records[0].step, 0);
    assert_eq!(records[0].pos_count, 16);
    assert_eq!(records.last().unwrap().step, 20);
    assert_eq!(log.probes, records);
    for r in &records {
        assert_eq!(r.pos_count + r.neg_count + r.zero_count, 16);
        assert!(r.numerical_rank <= r.pos_count);
    }

    let mut vanilla = init(PromptKind::Vanilla, 0);
    assert!(matches!(
        probe_run(backbone, &mut vanilla, &train, &dev, &config, 4),
        Err(Error::Usage(_))
    ));
}

#[test]
fn full_fine_tuning_separates_every_task() {
    for (task, size) in [
        (TaskKind::Copy, 3000),
        (TaskKind::Majority, 500),
        (TaskKind::Parity, 600),
        (TaskKind::PairMatch, 3000),
    ] {
        let mut backbone = desk_backbone().clone();
        let (train, dev) = generate(&TaskSpec::new(task, size, 200, 0)).unwrap();
        let log = train_full(&mut backbone, &train, &dev, &TrainConfig::desk(Method::FullFineTune)).unwrap();
        assert!(backbone.is_frozen());
        assert!(log.final_accuracy > 0.95, "{}: {}", task.name(), log.final_accuracy);
    }
}
