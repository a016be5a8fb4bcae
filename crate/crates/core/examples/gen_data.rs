//! Generate a small corpus, write it as PPM/PGM and read it back.
//!
//! `cargo run --release --example gen_data -- /tmp/shapes`

use cafseg::data::{self, DatasetSpec};

fn main() -> cafseg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes".into());
    let spec = DatasetSpec::with_classes(7, 40, 5);
    let ds = data::generate(&spec)?;
    data::save(&ds, out.as_ref())?;

    let mut images_with = [0usize; 6];
    for s in &ds.samples {
        for c in s.mask.classes() {
            if (c as usize) < images_with.len() {
                images_with[c as usize] += 1;
            }
        }
    }
    for (c, n) in images_with.iter().enumerate().skip(1) {
        println!("class {c}: in {n} of {} images", ds.len());
    }
    let back = data::load(out.as_ref())?;
    assert_eq!(back.len(), ds.len());
    println!("wrote and reloaded {} images in {out}", back.len());
    Ok(())
}
