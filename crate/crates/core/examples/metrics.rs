//! Confusion-matrix IoU and group means.

use cafseg::metrics::{fmt_metric, ConfusionMatrix};

fn main() -> cafseg::Result<()> {
    let gt: Vec<u8> = vec![0, 0, 1, 1, 2, 2, 255, 3];
    let pred: Vec<u8> = vec![0, 1, 1, 1, 2, 0, 2, 0];
    let mut cm = ConfusionMatrix::new(4);
    cm.update(&pred, &gt)?;
    for c in 0..4 {
        println!("class {c}: IoU {}", fmt_metric(cm.iou(c)));
    }
    println!("old {{1,2}}: {}", fmt_metric(cm.miou(&[1, 2])));
    println!("all: {}", fmt_metric(cm.miou(&[0, 1, 2, 3])));
    println!("counted pixels: {} (ignore label skipped)", cm.total());
    Ok(())
}
