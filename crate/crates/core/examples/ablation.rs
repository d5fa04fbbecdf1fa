//! A miniature objective ablation: rows land in `results.csv`.
//!
//! `cargo run --release --example ablation [out_dir]`

use anyhow::Result;
use smit::harness::experiment::num_workers;
use smit::harness::pipeline::DataConfig;
use smit::harness::{run_experiment, ExperimentKind, ExperimentSpec, PipelineConfig};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("smit-ablation"), Into::into);
    let mut base = PipelineConfig {
        data: DataConfig {
            n_unlabeled: 8,
            n_train: 2,
            n_test: 2,
            ..DataConfig::default()
        },
        ..PipelineConfig::default()
    };
    base.pretrain.schedule.epochs = 2;
    base.pretrain.schedule.warmup_epochs = 1;
    base.pretrain.schedule.tau_t_warmup_epochs = 1;
    base.finetune.epochs = 5;
    base.finetune.warmup_epochs = 1;
    let spec = ExperimentSpec {
        kind: ExperimentKind::ObjectiveAblation,
        values: vec!["MIP".into(), "ALL".into(), "NONE".into()],
        seeds: vec![0],
        base_config: None,
    };
    for r in run_experiment(&spec, &base, &out, num_workers())? {
        println!("{:<5} seed {}: Dice {:.4}, held-out MSE {:?}", r.value, r.seed, r.mean_dice, r.mip_mse);
    }
    println!("rows appended to {}", out.join("results.csv").display());
    Ok(())
}
