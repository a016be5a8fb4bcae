//! Attentive distillation between an unchanged and a drifted feature map,
//! with the gradient reaching the current side only.

use cafseg::attentive::{ad_spatial, loss_ad, SEWeights};
use cafseg::autodiff::{Graph, ParamStore};
use cafseg::init::Rng;

fn main() -> cafseg::Result<()> {
    let (c, h, w) = (8, 4, 4);
    let mut rng = Rng::new(5);
    let mut store = ParamStore::new();
    SEWeights::register(&mut store, "se_z", c, &mut rng)?;
    SEWeights::register(&mut store, "se_h", c, &mut rng)?;
    let z = rng.tensor_normal(&[c, h, w], 1.0);
    let hf = rng.tensor_normal(&[c, h, w], 1.0);

    for drift in [0.0, 0.1, 0.5, 1.0] {
        let noise = rng.tensor_normal(&[c, h, w], drift);
        let moved = z.zip_map(&noise, "add", |a, b| a + b)?;
        let mut g = Graph::new();
        let se_z = SEWeights::bind(&mut g, &store, "se_z", true)?;
        let se_h = SEWeights::bind(&mut g, &store, "se_h", true)?;
        let z_new = g.input(moved);
        let z_old = g.input(z.clone());
        let h_new = g.input(hf.clone());
        let h_old = g.input(hf.clone());
        let loss = loss_ad(&mut g, z_new, z_old, h_new, h_old, &se_z, &se_h)?;
        println!("drift {drift:.1}: L_AD = {:.6}", g.value(loss).data()[0]);
    }

    let mut g = Graph::new();
    let ones = g.input(cafseg::tensor::Tensor::full(&[4, 2, 2], 1.0));
    let sp = ad_spatial(&mut g, ones)?;
    println!("spatial attention of an all-ones map: {:?}", g.value(sp).data());
    Ok(())
}
