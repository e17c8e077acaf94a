use super::*;
use crate::synthdata::{generate, GenConfig};

fn tiny_data(n: usize) -> Dataset {
    let gen = GenConfig {
        height: 16,
        width: 16,
        n_samples: n,
        ..GenConfig::default()
    };
    generate(&gen, Execution::Sequential).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs_stage1: 2,
        epochs_stage2: 2,
        iterations: 2,
        clicks_per_iter: 2,
        batch_size: 3,
        lr: 1e-3,
        model: SegModelConfig {
            base_width: 2,
            depth: 2,
            num_heads: 2,
            ..SegModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let a = split_indices(50, 3, 0.2);
    assert_eq!(a, split_indices(50, 3, 0.2));
    assert_ne!(a, split_indices(50, 4, 0.2));
    assert_eq!(a.val.len(), 10);
    let mut all: Vec<usize> = a.train.iter().chain(&a.val).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(split_indices(3, 0, 0.2).val.len(), 1);
    assert!(split_indices(1, 0, 0.2).val.is_empty());
    assert!(split_indices(10, 0, 0.0).val.is_empty());
}

#[test]
fn record_line_round_trip() {
    let e = EpochRecord {
        epoch: 7,
        loss_ce: 0.1,
        loss_ceu: 1.0 / 3.0,
        loss_kl: 2e-17,
        loss_dice: 0.5,
        val_dice: 0.9,
        val_jaccard: 0.8,
        val_hd95: 3.25,
        auroc: f64::NAN,
    };
    let line = e.to_line();
    assert!(line.starts_with("epoch=7 loss_ce=0.1 loss_ceu="));
    let back = EpochRecord::parse(&line).unwrap();
    assert_eq!(back.to_line(), line);
    assert_eq!(back.loss_ceu.to_bits(), e.loss_ceu.to_bits());
    assert!(EpochRecord::parse("epoch=1 bogus=2").is_err());
    assert!(EpochRecord::parse("epoch").is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { iterations: 0, ..tiny_cfg() },
        TrainConfig { batch_size: 0, ..tiny_cfg() },
        TrainConfig { lr: 0.0, ..tiny_cfg() },
        TrainConfig { val_fraction: 1.0, ..tiny_cfg() },
        TrainConfig { epochs_stage1: 0, epochs_stage2: 0, ..tiny_cfg() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn training_logs_every_epoch() {
    let data = tiny_data(10);
    let cfg = tiny_cfg();
    let mut seen = Vec::new();
    let mut hook = |e: &EpochRecord| seen.push(e.epoch);
    let mut t = Trainer::new(&data, &cfg, Execution::default());
    t.hook = Some(&mut hook);
    let out = t.run().unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(out.record.epochs.len(), 4);
    for e in &out.record.epochs {
        assert!(e.loss_ce.is_finite() && e.loss_dice.is_finite() && e.val_dice.is_finite());
        assert!((0.0..=1.0).contains(&e.val_dice));
    }
    assert_eq!(out.views.len(), out.split.train.len());
}

#[test]
fn stage2_clicks_are_disjoint_and_counted() {
    let data = tiny_data(8);
    let cfg = tiny_cfg();
    let out = train(&data, &cfg, Execution::Sequential).unwrap();
    for rounds in &out.last_epoch_clicks {
        assert_eq!(rounds.len(), cfg.iterations);
        let mut all = ClickSet::new();
        for r in rounds {
            assert_eq!(r.len(), cfg.clicks_per_iter);
            for p in r.points() {
                assert!(all.push(*p), "click repeated across iterations");
            }
        }
    }
}

#[test]
fn schedules_agree_bitwise() {
    let data = tiny_data(7);
    let cfg = tiny_cfg();
    let a = train(&data, &cfg, Execution::Sequential).unwrap();
    let b = train(&data, &cfg, Execution::default()).unwrap();
    assert_eq!(a.model.export_weights(), b.model.export_weights());
    assert_eq!(a.record.to_log(), b.record.to_log());
}

#[test]
fn stage_one_only() {
    let data = tiny_data(6);
    let cfg = tiny_cfg();
    let s1 = Trainer::new(&data, &cfg, Execution::Sequential).stage1().unwrap();
    assert_eq!(s1.record.epochs.len(), 2);
    for v in &s1.views {
        assert!(v.uncertainty.iter().all(|u| *u > 0.0 && *u <= 1.0));
    }
}

#[test]
fn non_finite_input_aborts_with_location() {
    let mut data = tiny_data(4);
    for s in &mut data.samples {
        s.image[0] = f64::NAN;
    }
    let cfg = TrainConfig { val_fraction: 0.0, ..tiny_cfg() };
    let err = train(&data, &cfg, Execution::Sequential).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn evaluation_table_shape() {
    let data = tiny_data(6);
    let model = SegModel::init(tiny_cfg().model_config()).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let opts = InferenceOptions::default();
    let cells = evaluate(&model, &data, &idx, SamplerKind::RandomError, &[1, 3, 5], &[1], &[0, 1], &opts, Execution::default())
        .unwrap();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells.iter().map(|c| c.budget).collect::<Vec<_>>(), vec![1, 3, 5]);
    for c in &cells {
        assert_eq!(c.per_seed.len(), 2);
        assert!(c.dice.1 >= 0.0);
    }
    assert!(evaluate(&model, &data, &idx, SamplerKind::TopK, &[], &[1], &[0], &opts, Execution::default()).is_err());
}

#[test]
fn interaction_respects_budget() {
    let data = tiny_data(2);
    let model = SegModel::init(tiny_cfg().model_config()).unwrap();
    let s = &data.samples[0];
    let view = zero_click_view(&model, s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = InferenceOptions::default();
    let none = interactive_predict(&model, s, &view, SamplerKind::TopK, 0, 3, &opts, &mut rng).unwrap();
    assert!(none.clicks.is_empty());
    assert_eq!(none.pred, view.pred);
    let some = interactive_predict(&model, s, &view, SamplerKind::TopK, 3, 2, &opts, &mut rng).unwrap();
    assert_eq!(some.clicks.len(), 6);
    assert_eq!(some.rounds.len(), 2);
}

#[test]
fn inference_head_prefers_low_uncertainty() {
    let t = Tape::new();
    let mk = |e: f64| {
        let logits = DiffArray::constant(&[2, 1, 2], vec![e, e, 0.0, 0.0]).unwrap();
        evidential_output(&t, &logits, crate::evidential::EvidenceActivation::Relu).unwrap()
    };
    assert_eq!(inference_head(&[mk(1.0), mk(5.0), mk(5.0)]), 1);
    assert_eq!(inference_head(&[mk(2.0), mk(2.0)]), 0);
}

#[test]
fn config_hash_is_stable_hex() {
    let h = config_hash("a=1\n");
    assert_eq!(h.len(), 64);
    assert_eq!(h, config_hash("a=1\n"));
    assert_ne!(h, config_hash("a=2\n"));
}
