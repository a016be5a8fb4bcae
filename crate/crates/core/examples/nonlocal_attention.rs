//! Non-local block on a random feature map: attention rows are
//! distributions over positions.

use cafseg::autodiff::{Graph, ParamStore};
use cafseg::init::Rng;
use cafseg::nonlocal::{nonlocal_with_attention, NonLocalWeights};

fn main() -> cafseg::Result<()> {
    let (c, h, w) = (8, 4, 4);
    let mut rng = Rng::new(1);
    let mut store = ParamStore::new();
    NonLocalWeights::register(&mut store, "nl", c, &mut rng)?;

    let mut g = Graph::new();
    let weights = NonLocalWeights::bind(&mut g, &store, "nl", false)?;
    let z = g.input(rng.tensor_normal(&[c, h, w], 1.0));
    let (v, attn) = nonlocal_with_attention(&mut g, z, &weights)?;

    let a = g.value(attn);
    let n = h * w;
    let row_sums: Vec<f64> = a.data().chunks(n).map(|r| r.iter().sum()).collect();
    let worst = row_sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    println!("output shape {:?}, attention {:?}", g.value(v).shape(), a.shape());
    println!("largest deviation of a row sum from 1: {worst:.1e}");
    println!("row 0: {:?}", a.data()[..n].iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
    Ok(())
}
