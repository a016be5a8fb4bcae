mod common;

use cafseg::autodiff::{Graph, ParamStore};
use cafseg::attentive::{ad_channel, ad_combine, loss_ad, SEWeights};
use cafseg::init::Rng;
use cafseg::nonlocal::{nonlocal_forward, NonLocalWeights};
use cafseg::tensor::Tensor;

#[test]
fn spot_values_are_exact() {
    for (name, got, want) in common::spot_values() {
        assert!((got - want).abs() <= common::SPOT_TOL, "{name}: {got} vs {want}");
    }
}

fn zeroed(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        let z = Tensor::zeros(store.value(id).shape());
        store.set_value(id, z);
    }
}

#[test]
fn zero_se_gives_half_and_closed_form_combine() {
    let mut store = ParamStore::new();
    SEWeights::register(&mut store, "se", 3, &mut Rng::new(0)).unwrap();
    zeroed(&mut store);
    let m = Rng::new(9).tensor_uniform(&[3, 2, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let se = SEWeights::bind(&mut g, &store, "se", false).unwrap();
    let mv = g.input(m.clone());
    let ch = ad_channel(&mut g, mv, &se).unwrap();
    assert!(g.value(ch).data().iter().all(|&v| v == 0.5));
    let out = ad_combine(&mut g, mv, &se).unwrap();
    let sp = common::naive_ad_spatial(&common::to_map(&m));
    for (i, &v) in g.value(out).data().iter().enumerate() {
        let (pix, c) = (i % 8, i / 8);
        let want = (0.5 * sp[pix / 4][pix % 4] + 1.0) * m.data()[c * 8 + pix];
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn single_element_difference() {
    // zero old map: its transform is zero. A lone entry has spatial
    // attention 1 at its pixel, so the new side becomes (1 + ch) * 0.7.
    let mut store = ParamStore::new();
    SEWeights::register(&mut store, "se", 2, &mut Rng::new(0)).unwrap();
    let mut d = vec![0.0; 18];
    d[5] = 0.7;
    let lone = Tensor::new(&[2, 3, 3], d).unwrap();
    let ch = common::naive_ad_channel(&common::to_map(&lone), &common::SeValues::read(&store, "se"))[0];
    let mut g = Graph::new();
    let se = SEWeights::bind(&mut g, &store, "se", false).unwrap();
    let z_new = g.input(lone);
    let zero = g.input(Tensor::zeros(&[2, 3, 3]));
    let l = loss_ad(&mut g, z_new, zero, zero, zero, &se, &se).unwrap();
    let want = ((1.0 + ch) * 0.7f64).powi(2) / 18.0;
    assert!((g.value(l).item() - want).abs() < 1e-15);
}

#[test]
fn zero_projections_give_uniform_attention() {
    let mut store = ParamStore::new();
    NonLocalWeights::register(&mut store, "nl", 2, &mut Rng::new(0)).unwrap();
    for name in ["nl.theta.w", "nl.theta.b", "nl.phi.w"] {
        let id = store.require(name).unwrap();
        let z = Tensor::zeros(store.value(id).shape());
        store.set_value(id, z);
    }
    let z = Rng::new(3).tensor_uniform(&[2, 3, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let nl = NonLocalWeights::bind(&mut g, &store, "nl", false).unwrap();
    let zv = g.input(z.clone());
    let v = nonlocal_forward(&mut g, zv, &nl).unwrap();
    let gz = common::naive_conv1x1(
        &common::to_map(&z),
        store.value(store.require("nl.g.w").unwrap()),
        store.value(store.require("nl.g.b").unwrap()),
    );
    for c in 0..2 {
        let mean: f64 = gz[c].iter().flatten().sum::<f64>() / 9.0;
        for i in 0..9 {
            assert!((g.value(v).data()[c * 9 + i] - mean).abs() < 1e-14);
        }
    }
}
