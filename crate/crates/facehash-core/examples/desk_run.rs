//! Desk-scale training experiment: train the tiny backbone on synthetic data
//! and print retrieval quality per stage, for the full objective and the
//! ablated variants.
//!
//! Run: cargo run -p facehash-core --example desk_run

use std::time::Instant;

use facehash_core::augment::AugmentationPolicy;
use facehash_core::datapipe::{batch_iterator, make_synthetic_dataset, split_protocol};
use facehash_core::evalkit::{mean_quantization_error, run_protocol, EvalSettings, ProtocolMode};
use facehash_core::netcore::ModelConfig;
use facehash_core::trainer::{train_step, TermMask, TrainConfig, TrainState};

fn main() {
    let t0 = Instant::now();
    let ds = make_synthetic_dataset(10, 50, 32, 7).unwrap();
    let (db, query) = split_protocol(&ds, 5, 11).unwrap();
    println!("dataset ready: db {} query {} ({:?})", db.len(), query.len(), t0.elapsed());

    let model_cfg = ModelConfig::tiny(32, 16, 10);
    let policy = AugmentationPolicy::default();
    let settings = EvalSettings::default();

    let variants: Vec<(&str, TermMask)> = vec![
        ("full", TermMask::default()),
        ("no_sp", TermMask { sp: false, ..TermMask::default() }),
        ("no_sq", TermMask { sq: false, ..TermMask::default() }),
    ];

    for (name, terms) in variants {
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 64,
            seed: 7,
            terms,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model_cfg, cfg).unwrap();
        let t = Instant::now();
        for epoch in 0..cfg.epochs {
            state.epoch = epoch;
            for batch in batch_iterator(&db, cfg.batch_size, cfg.seed, epoch).unwrap() {
                train_step(&mut state, &batch, &policy).unwrap();
            }
            state.epoch = epoch + 1;
            if (epoch + 1) % 5 == 0 || epoch < 3 {
                let report =
                    run_protocol(&state.params, &db, &query, ProtocolMode::Closed, &settings)
                        .unwrap();
                let qe = mean_quantization_error(&state.params, &db, 64).unwrap();
                let last = state.history.last().unwrap();
                println!(
                    "[{name}] epoch {:>3} ({:>6.1?}) mAP@50 {:.4} P@H<=2 {:.4} qerr {:.4} | L_SP {:.3} L_sQ {:.3} L_cls {:.3}",
                    epoch + 1,
                    t.elapsed(),
                    report.map_at_50,
                    report.precision_at_hamming2,
                    qe,
                    last.sp,
                    last.sq,
                    last.cls,
                );
            }
        }
        println!("[{name}] done in {:?}", t.elapsed());
    }
}
