use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::ModelConfig;
use crate::data::Sample;
use crate::schema::{Attribute, AttributeSchema};

fn schema() -> AttributeSchema {
    let attrs = (0..3)
        .map(|i| Attribute {
            name: format!("a{i}"),
            classes: 2 + i % 2,
        })
        .collect();
    AttributeSchema::in_order(attrs).unwrap()
}

/// Identities differ by a colour offset; attributes are a function of identity.
fn dataset(train_ids: usize, per_id: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut samples = Vec::new();
    for id in 0..train_ids + 2 {
        for j in 0..per_id {
            let base = [id % 3, (id / 3) % 3, (id + 1) % 2].map(|v| 0.2 + 0.25 * v as f64);
            let data = (0..3 * 16 * 12).map(|i| (base[i / 192] + rng.random_range(-0.1..0.1)).clamp(0.0, 0.99)).collect();
            samples.push(Sample {
                filename: format!("{id}_{j}.ppm"),
                split: if id < train_ids {
                    Split::Train
                } else if j == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                },
                identity: id,
                camera: j % 2,
                attributes: vec![id % 2, id % 3, (id / 2) % 2],
                image: Tensor::new(&[3, 16, 12], data).unwrap(),
            });
        }
    }
    Dataset {
        schema: schema(),
        samples,
    }
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: vec![2, 3, 2],
        seed: 5,
        ..TrainConfig::default()
    }
}

fn model(branches: Branches, num_ids: usize) -> Model {
    let mut cfg = ModelConfig::tiny();
    cfg.branches = branches;
    Model::new(cfg, schema(), num_ids, 3).unwrap()
}

#[test]
fn weighted_sum() {
    assert_eq!(total_loss(1.0, 0.5, 2.0), 2.0);
    assert_eq!(total_loss(1.25, 7.0, 0.0), 1.25);
    let uniform = 10.0 * 4f64.ln() + 2.0 * 12.0 * 2f64.ln();
    assert!((total_loss(10.0 * 4f64.ln(), 12.0 * 2f64.ln(), 2.0) - 30.499).abs() < 1e-3);
    assert!((uniform - 30.4985).abs() < 1e-3);
}

#[test]
fn learning_rate_drops_for_last_quarter() {
    let c = TrainConfig::default();
    let lrs: Vec<f64> = (0..20).map(|e| c.learning_rate_at(20, e)).collect();
    assert!(lrs[..15].iter().all(|&l| l == 0.01));
    assert!(lrs[15..].iter().all(|&l| (l - 0.001).abs() < 1e-18));
}

#[test]
fn config_round_trip_and_validation() {
    let mut c = quick_config();
    c.stage_overrides.insert(
        2,
        StageSpec {
            appearance_loss: true,
            attribute_loss: true,
            trainable: vec![ParamGroup::Attribute],
        },
    );
    assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    for (k, v) in [("batch_size", "1"), ("lambda", "-1"), ("epochs", "1,2"), ("stages", "4"), ("stage2.losses", "xyz")] {
        let mut kv = c.to_kv();
        kv.set(k, v);
        assert!(TrainConfig::from_kv(&kv).is_err(), "{k} = {v}");
    }
}

#[test]
fn log_text_round_trips() {
    let log = TrainLog {
        rows: vec![
            LogRow {
                stage: 1,
                epoch: 1,
                step: 1,
                l_app: Some(13.862943611198906),
                l_att: None,
                l_total: 13.862943611198906,
                lr: 0.01,
            },
            LogRow {
                stage: 2,
                epoch: 3,
                step: 2,
                l_app: Some(0.1 + 0.2),
                l_att: Some(1.0 / 3.0),
                l_total: 0.1 + 0.2 + 2.0 / 3.0,
                lr: 0.001,
            },
        ],
    };
    let text = log.render();
    assert!(text.starts_with(LOG_HEADER));
    assert_eq!(TrainLog::parse(&text).unwrap(), log);
    assert_eq!(log.render_stage(2).lines().count(), 2);
}

#[test]
fn memorizes_a_single_batch() {
    let ds = dataset(4, 2);
    let cfg = TrainConfig {
        augment: AugmentConfig::disabled(),
        ..quick_config()
    };
    let mut t = Trainer::new(model(Branches::Both, 4), cfg, &ds).unwrap();
    let batch: Vec<usize> = (0..8).collect();
    let rows: Vec<LogRow> = (1..=50).map(|i| t.train_step(1, 1, i, &batch, 0.01).unwrap()).collect();
    let (first, last) = (rows[0].l_total, rows[49].l_total);
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn logged_total_is_weighted_sum() {
    let ds = dataset(4, 3);
    let mut t = Trainer::new(model(Branches::Both, 4), quick_config(), &ds).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let mut joint = 0;
    for r in &t.log.rows {
        match (r.l_app, r.l_att) {
            (Some(a), Some(b)) => {
                joint += 1;
                assert!((r.l_total - total_loss(a, b, 2.0)).abs() < 1e-10);
            }
            (Some(a), None) => assert_eq!(r.l_total, a),
            _ => panic!("unexpected row {r:?}"),
        }
    }
    assert!(joint > 0);
    assert!(t.is_finished());
    assert_eq!(t.log.rows.iter().map(|r| r.stage).max(), Some(3));
}

#[test]
fn stage_one_leaves_attribute_branch_untouched() {
    let ds = dataset(4, 3);
    let m = model(Branches::Both, 4);
    let before = m.store.clone();
    let mut t = Trainer::new(m, TrainConfig { stages: 1, ..quick_config() }, &ds).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let after = &t.model.store;
    let mut changed_stem = false;
    for (name, p) in before.params() {
        let q = after.get(name).unwrap();
        if name.starts_with("att.") {
            assert_eq!(p.data(), q.data(), "{name}");
        } else if name.starts_with("stem.") && p.data() != q.data() {
            changed_stem = true;
        }
    }
    for (name, b) in before.buffers().filter(|(n, _)| n.starts_with("att.")) {
        assert_eq!(after.buffer(name).unwrap(), b, "{name}");
    }
    assert!(changed_stem);
    assert!(t.log.rows.iter().all(|r| r.stage == 1 && r.l_att.is_none()));
}

#[test]
fn replay_is_bit_identical() {
    let ds = dataset(4, 3);
    let run = || {
        let mut t = Trainer::new(model(Branches::Both, 4), quick_config(), &ds).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        (t.log.render(), t.model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn resume_mid_joint_stage_matches_uninterrupted() {
    let ds = dataset(4, 3);
    let mut cfg = quick_config();
    cfg.early_stop_window = 0;
    let mut full = Trainer::new(model(Branches::Both, 4), cfg.clone(), &ds).unwrap();
    let mut partial = Trainer::new(model(Branches::Both, 4), cfg, &ds).unwrap();
    while partial.progress().stage != 1 || partial.progress().epoch != 1 {
        partial.run_epoch().unwrap();
    }
    let bytes = partial.checkpoint().to_bytes();
    let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &ds).unwrap();
    assert_eq!(resumed.progress(), partial.progress());
    full.run(|_, _| Ok(())).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();
    let k = partial.log.rows.len();
    let (next_full, next_resumed) = (full.log.rows[k], resumed.log.rows[k]);
    assert_eq!((next_resumed.stage, next_resumed.epoch, next_resumed.step), (2, 2, 1));
    assert!((next_full.l_total - next_resumed.l_total).abs() <= 1e-12);
    assert_eq!(full.log, resumed.log);
    assert_eq!(full.model.store, resumed.model.store);
}

#[test]
fn zero_lambda_matches_appearance_only_model() {
    let ds = dataset(4, 3);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..quick_config()
    };
    let mut both = Trainer::new(model(Branches::Both, 4), cfg.clone(), &ds).unwrap();
    let mut app = Trainer::new(model(Branches::AppearanceOnly, 4), cfg, &ds).unwrap();
    both.run(|_, _| Ok(())).unwrap();
    app.run(|_, _| Ok(())).unwrap();
    for (name, p) in app.model.store.params() {
        assert_eq!(both.model.store.get(name).unwrap().data(), p.data(), "{name}");
    }
    assert_eq!(both.log, app.log);
}

#[test]
fn attribute_only_model_trains_attribute_loss() {
    let ds = dataset(4, 3);
    let mut t = Trainer::new(model(Branches::AttributeOnly, 4), quick_config(), &ds).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    assert!(t.log.rows.iter().all(|r| r.l_app.is_none() && r.l_att.is_some()));
    let lambda0 = TrainConfig {
        lambda: 0.0,
        ..quick_config()
    };
    assert!(matches!(
        Trainer::new(model(Branches::AttributeOnly, 4), lambda0, &ds),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_rolls_back_to_last_good_epoch() {
    let ds = dataset(4, 3);
    let mut t = Trainer::new(model(Branches::AppearanceOnly, 4), quick_config(), &ds).unwrap();
    t.run_epoch().unwrap();
    let good = t.checkpoint();
    t.data.images[2].data_mut()[5] = f64::NAN;
    let err = t.run(|_, _| Ok(()));
    assert!(matches!(err, Err(Error::Divergence { stage: 1, epoch: 2, .. })), "{err:?}");
    assert_eq!(t.checkpoint(), good);
    assert!(t.model.store.buffers().all(|(_, b)| b.iter().all(|v| v.is_finite())));
}

#[test]
fn rejects_mismatched_dataset() {
    let ds = dataset(4, 3);
    assert!(matches!(
        Trainer::new(model(Branches::Both, 5), quick_config(), &ds),
        Err(Error::Config(_))
    ));
}
