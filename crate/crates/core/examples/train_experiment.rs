//! A short incremental run of several variants with CSV reports.
//!
//! `cargo run --release --example train_experiment -- /tmp/runs`

use cafseg::data::{generate, DatasetSpec};
use cafseg::metrics::fmt_metric;
use cafseg::protocol::{build_scenario, Setting};
use cafseg::report::write_reports;
use cafseg::train::{run_experiment, TrainConfig, Variant};

fn main() -> cafseg::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs".into()));
    let train = generate(&DatasetSpec::with_classes(7, 100, 3))?;
    let val = generate(&DatasetSpec::with_classes(1007, 40, 3))?;
    let scenario = build_scenario(&[1, 2, 3], "2-1", Setting::Disjoint)?;
    let cfg = TrainConfig {
        epochs_first: 20,
        epochs_later: 12,
        snapshot_epochs: vec![1],
        ..TrainConfig::desk(0)
    };
    for name in ["ft", "baseline+kd", "full", "joint"] {
        let variant: Variant = name.parse()?;
        let res = run_experiment(&scenario, &train, &val, &cfg, &variant)?;
        let last = res.last();
        println!(
            "{name:>12}: old {} new {} all {}",
            fmt_metric(last.old),
            fmt_metric(last.new),
            fmt_metric(last.all)
        );
        write_reports(&out.join(name), &res, &[("variant", name.to_string())])?;
    }
    println!("reports under {}", out.display());
    Ok(())
}
