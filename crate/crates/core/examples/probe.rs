//! Scratch probe: pipeline timing and condition comparison on synthetic data.

use simview_core::data::{generate_synthetic_multiview, split_dataset};
use simview_core::encoder::{EncoderModel, Profile};
use simview_core::evaluation::{evaluate_map, representation_score};
use simview_core::registry::build_store;
use simview_core::trainer::{train, TrainCondition, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let classes: Vec<String> = ["chair", "tv", "plant", "couch"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let ds = generate_synthetic_multiview(8, &classes, 24, 64, 7).unwrap();
    println!("gen: {:?} items={} ", t0.elapsed(), ds.len());

    let (train_ds, test_ds) = split_dataset(&ds, 0.5, 7).unwrap();
    println!("split: train={} test={}", train_ds.len(), test_ds.len());

    // Untrained baseline.
    let t = Instant::now();
    let model: EncoderModel<f32> = EncoderModel::new(Profile::Small, 8, 1);
    let store = build_store(&model, &train_ds, &ds.positions).unwrap();
    println!("build_store: {:?} (dim={:?})", t.elapsed(), store.dim);
    let t = Instant::now();
    let rep_tr = representation_score(&model, &train_ds, 3, 4).unwrap();
    let rep_te = representation_score(&model, &test_ds, 3, 4).unwrap();
    let eval = evaluate_map(&store, &model, &test_ds, 10, 3, 11).unwrap();
    println!(
        "untrained: ari_train={:.3} ari_test={:.3} map={:.3} (eval {:?})",
        rep_tr.ari,
        rep_te.ari,
        eval.map_score,
        t.elapsed()
    );

    for cond in TrainCondition::ALL {
        let t = Instant::now();
        let mut cfg = TrainConfig {
            epochs: 12,
            seed: 5,
            ..TrainConfig::default()
        };
        cond.apply(&mut cfg);
        cfg.epochs = 12; // equal epochs for the probe
        let model: EncoderModel<f32> = EncoderModel::new(Profile::Small, 8, 1);
        let (model, report) = train(model, &train_ds, &cfg).unwrap();
        let train_time = t.elapsed();
        let rep_tr = representation_score(&model, &train_ds, 3, 4).unwrap();
        let rep_te = representation_score(&model, &test_ds, 3, 4).unwrap();
        let store = build_store(&model, &train_ds, &ds.positions).unwrap();
        let eval = evaluate_map(&store, &model, &test_ds, 10, 3, 11).unwrap();
        println!(
            "{:<20} train={:?} loss {:.3}->{:.3} (ce {:.3}->{:.3}) ari_tr={:.3} ari_te={:.3} map={:.3}",
            cond.label(),
            train_time,
            report.loss_history.first().unwrap(),
            report.loss_history.last().unwrap(),
            report.ce_history.first().unwrap(),
            report.ce_history.last().unwrap(),
            rep_tr.ari,
            rep_te.ari,
            eval.map_score,
        );
    }
    println!("total: {:?}", t0.elapsed());
}
