//! Incremental scenarios: class splits, per-step configs and label
//! remapping under the disjoint and overlapped settings.

use cafseg::data::{generate, DatasetSpec};
use cafseg::protocol::{build_scenario, filter_step, remap_labels, Setting};

fn main() -> cafseg::Result<()> {
    let ds = generate(&DatasetSpec::with_classes(7, 60, 5))?;
    for spec in ["4-1", "2-1", "3-2"] {
        for setting in [Setting::Disjoint, Setting::Overlapped] {
            let sc = build_scenario(&[1, 2, 3, 4, 5], spec, setting)?;
            let counts: Vec<usize> = (1..=sc.num_steps())
                .map(|s| filter_step(&ds, &sc, s).map(|v| v.len()))
                .collect::<cafseg::Result<_>>()?;
            println!("{spec} {setting}: steps {:?}, images per step {counts:?}", sc.steps);
        }
    }

    let sc = build_scenario(&[1, 2, 3, 4, 5], "4-1", Setting::Disjoint)?;
    let cfg = sc.step_config(2)?;
    println!("step 2 old {:?} new {:?}", cfg.old_classes(), cfg.new_classes());
    let idx = filter_step(&ds, &sc, 2)?[0];
    let mask = &ds.samples[idx].mask;
    let labels = remap_labels(mask, &sc, 2)?;
    println!("image {idx}: classes {:?} become {:?} at step 2", mask.classes(), {
        let mut v = labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    });
    Ok(())
}
