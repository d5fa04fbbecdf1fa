//! Short self-supervised pre-training run on synthetic phantoms.
//!
//! `cargo run --release --example pretrain [out_dir]`

use anyhow::Result;
use smit::distiller::metrics::read_metrics;
use smit::distiller::schedule::ScheduleConfig;
use smit::distiller::{pretrain, PretrainConfig, RunLayout, RunOptions};
use smit::volume_io::{generate_phantoms, PhantomSpec};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("smit-pretrain"), Into::into);
    let specs: Vec<PhantomSpec> = (0..8)
        .map(|seed| PhantomSpec {
            size: [40; 3],
            num_blobs: 4,
            seed,
            noise_std: 0.08,
            bias_field: true,
        })
        .collect();
    let volumes: Vec<_> = generate_phantoms(&specs)?.into_iter().map(|(v, _)| v).collect();
    let cfg = PretrainConfig {
        schedule: ScheduleConfig {
            epochs: 3,
            warmup_epochs: 1,
            tau_t_warmup_epochs: 1,
            lr0: 1e-3,
            ..ScheduleConfig::default()
        },
        ..PretrainConfig::default()
    };
    let _ = std::fs::remove_dir_all(&out);
    let run = pretrain(&cfg, &volumes, &out, &RunOptions::default())?;
    for r in read_metrics(RunLayout::new(&out).metrics())? {
        println!(
            "step {:>2} epoch {} lr {:.2e} momentum {:.5} total {:.4} (mip {:.4}, mpd {:.4}, itd {:.4})",
            r.step, r.epoch, r.lr, r.lambda_m, r.report.l_total, r.report.l_mip, r.report.l_mpd, r.report.l_itd
        );
    }
    println!("checkpoint {}", run.checkpoint.display());
    Ok(())
}
