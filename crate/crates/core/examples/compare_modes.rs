//! Trains every mode on the default synthetic dataset and prints a summary.

use std::time::Instant;

use pal_core::model::TinySegNet;
use pal_core::par::Exec;
use pal_core::scheduler::{run_experiment, Dataset, Mode, NullSink, SyntheticConfig};
use pal_core::Hyperparams;

fn main() -> pal_core::Result<()> {
    // optional JSON overrides, e.g. PAL_HP='{"r":0.02}'
    let hp: Hyperparams = match std::env::var("PAL_HP") {
        Ok(json) => serde_json::from_str(&json)?,
        Err(_) => Hyperparams::default(),
    };
    let cfg = SyntheticConfig {
        seed: hp.seed,
        ..SyntheticConfig::default()
    };
    let exec = Exec::default();
    let data = Dataset::synthetic(&cfg, exec)?;
    let modes: Vec<Mode> = match std::env::args().nth(1) {
        Some(m) => vec![m.parse()?],
        None => Mode::ALL.to_vec(),
    };
    for mode in modes {
        let start = Instant::now();
        let mut net = TinySegNet::<f32>::new(hp.seed, hp.learning_rate, hp.weight_decay);
        let report = run_experiment(&data, &hp, mode, &mut net, &mut NullSink, exec)?;
        let m = report.final_metrics;
        println!(
            "{:<17} iou {:.3} niou {:.3} pd {:.3} fa {:.2e} easy {} label_iou {:?} {:.1}s",
            mode.name(),
            m.iou,
            m.niou,
            m.pd,
            m.fa,
            report.easy_after_epg,
            report.epochs.last().and_then(|r| r.label_iou_gt),
            start.elapsed().as_secs_f64()
        );
        if std::env::var_os("PAL_CSV").is_some() {
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}
