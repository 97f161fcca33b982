//! Regenerates `expected/end_to_end.csv`: tia_full and source_only on the
//! default benchmark for seeds 0..5.
//!
//! cargo run --release -p tia-core --example end_to_end > crates/core/expected/end_to_end.csv

use std::time::Instant;

use tia_core::synth::fmt_f64;
use tia_core::trainer::{run_experiment, ExperimentConfig, Mode};

fn main() -> tia_core::Result<()> {
    println!("seed,mode,tgt_acc,tgt_loc_mse,tgt_mean_iou,src_acc,seconds");
    for seed in 0..5u64 {
        for mode in [Mode::SourceOnly, Mode::TiaFull] {
            let cfg = ExperimentConfig {
                mode,
                seed,
                ..ExperimentConfig::default()
            };
            let start = Instant::now();
            let r = run_experiment(&cfg)?;
            let e = &r.final_eval;
            println!(
                "{seed},{mode},{},{},{},{},{:.1}",
                fmt_f64(e.target.accuracy),
                fmt_f64(e.target.loc_mse),
                fmt_f64(e.target.mean_iou),
                fmt_f64(e.source.accuracy),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
