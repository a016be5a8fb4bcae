//! The CAF block under each evaluation-time fusion mode.

use cafseg::autodiff::{Graph, ParamStore};
use cafseg::caf::{caf_forward, CafWeights, FusionMode, PreviousBranch};
use cafseg::init::Rng;
use cafseg::nonlocal::NonLocalWeights;

fn main() -> cafseg::Result<()> {
    let (c, h, w) = (8, 6, 6);
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    NonLocalWeights::register(&mut store, "nl", c, &mut rng)?;
    CafWeights::register(&mut store, "caf", c, &mut rng)?;
    let mut old = ParamStore::new();
    NonLocalWeights::register(&mut old, "nl", c, &mut rng)?;
    let z_new = rng.tensor_normal(&[c, h, w], 1.0);
    let z_old = rng.tensor_normal(&[c, h, w], 1.0);

    for mode in [FusionMode::TestSkip, FusionMode::TestZeroPad, FusionMode::TestConcat] {
        let mut g = Graph::new();
        let nl = NonLocalWeights::bind(&mut g, &store, "nl", false)?;
        let nl_old = NonLocalWeights::bind(&mut g, &old, "nl", false)?;
        let caf = CafWeights::bind(&mut g, &store, "caf", false)?;
        let a = g.input(z_new.clone());
        let b = g.input(z_old.clone());
        let prev = mode.needs_previous().then_some(PreviousBranch { z: b, nonlocal: &nl_old });
        let (z_bar, att) = caf_forward(&mut g, a, prev, &nl, &caf, mode)?;
        let out = g.value(z_bar);
        let gate = att.values(&g);
        println!(
            "{:>8}: mean |z_bar| {:.4}, structured attention range [{:.4}, {:.4}]",
            mode.to_string(),
            out.data().iter().map(|x| x.abs()).sum::<f64>() / out.data().len() as f64,
            gate.a_str.data().iter().cloned().fold(f64::INFINITY, f64::min),
            gate.a_str.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok(())
}
