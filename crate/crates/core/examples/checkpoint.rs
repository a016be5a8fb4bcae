//! Save a model, load it back and compare every weight.

use cafseg::checkpoint::{load_checkpoint, save_checkpoint};
use cafseg::model::ModelState;
use cafseg::protocol::{build_scenario, Setting};
use cafseg::train::TrainConfig;

fn main() -> cafseg::Result<()> {
    let scenario = build_scenario(&[1, 2, 3, 4, 5], "4-1", Setting::Disjoint)?;
    let model = ModelState::new(TrainConfig::default().model_config(true), &scenario.step_config(1)?, 1, 42)?;
    let path = std::env::temp_dir().join("cafseg_example.ckpt");
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;

    let mut worst: f64 = 0.0;
    let mut n = 0;
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        n += a.value.data().len();
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("{n} values, {bytes} bytes, worst round-trip error {worst:.2e}");
    println!("metadata preserved: {}", model.meta == back.meta);
    std::fs::remove_file(&path).ok();
    Ok(())
}
