//! Non-local feature projection: position-wise self-attention over a
//! `[C,H,W]` map built from three 1x1 convolutions.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::init::{register_conv1x1, Rng};
use crate::tensor::Tensor;

/// Width of the query/key embedding for `c` input channels.
pub fn embed_width(c: usize) -> usize {
    (c / 2).max(1)
}

/// The three projection convolutions of one non-local block, bound into a
/// graph.
#[derive(Clone, Copy, Debug)]
pub struct NonLocalWeights {
    pub theta_w: Var,
    pub theta_b: Var,
    pub phi_w: Var,
    pub g_w: Var,
    pub g_b: Var,
}

impl NonLocalWeights {
    /// Creates `{prefix}.theta.*`, `{prefix}.phi.w` and `{prefix}.g.*`.
    ///
    /// The key projection has no bias: a constant added to every key logit
    /// of a row cancels in the softmax. `phi` starts as a copy of `theta`,
    /// so the initial logits are a similarity and each position attends
    /// mostly to positions with features like its own.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Rng) -> Result<()> {
        let ce = embed_width(channels);
        let (theta, _) = register_conv1x1(store, &format!("{prefix}.theta"), ce, channels, rng)?;
        let w = store.value(theta).clone();
        store.insert(format!("{prefix}.phi.w"), w)?;
        register_conv1x1(store, &format!("{prefix}.g"), channels, channels, rng)?;
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str, trainable: bool) -> Result<Self> {
        let mut b = |name: &str| -> Result<Var> {
            let id = store.require(&format!("{prefix}.{name}"))?;
            Ok(g.bind(store, id, trainable))
        };
        Ok(Self {
            theta_w: b("theta.w")?,
            theta_b: b("theta.b")?,
            phi_w: b("phi.w")?,
            g_w: b("g.w")?,
            g_b: b("g.b")?,
        })
    }
}

/// Projected features `v` and the `[P,P]` attention matrix (rows = query
/// positions, each summing to one).
pub fn nonlocal_with_attention(g: &mut Graph, z: Var, w: &NonLocalWeights) -> Result<(Var, Var)> {
    let (c, h, wd) = g.value(z).chw("nonlocal_forward")?;
    let p = h * wd;
    let theta = g.conv1x1(z, w.theta_w, w.theta_b)?;
    let no_bias = g.input(Tensor::zeros(&[g.shape(w.phi_w)[0]]));
    let phi = g.conv1x1(z, w.phi_w, no_bias)?;
    let gz = g.conv1x1(z, w.g_w, w.g_b)?;
    let ce = g.shape(theta)[0];
    let theta = g.reshape(theta, &[ce, p])?;
    let phi = g.reshape(phi, &[ce, p])?;
    let gz = g.reshape(gz, &[c, p])?;
    let theta_t = g.transpose(theta)?;
    let logits = g.matmul(theta_t, phi)?;
    let attn = g.softmax(logits, 1)?;
    // v[:, p] = sum_q A[p, q] g[:, q]  ==  g A^T
    let attn_t = g.transpose(attn)?;
    let v = g.matmul(gz, attn_t)?;
    let v = g.reshape(v, &[c, h, wd])?;
    Ok((v, attn))
}

/// `z -> v`: softmax(theta^T phi) over key positions, applied to `g`.
/// No residual and no output projection.
pub fn nonlocal_forward(g: &mut Graph, z: Var, w: &NonLocalWeights) -> Result<Var> {
    nonlocal_with_attention(g, z, w).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        NonLocalWeights::register(&mut store, "nl", c, &mut Rng::new(seed)).unwrap();
        store
    }

    #[test]
    fn widths() {
        assert_eq!(embed_width(1), 1);
        assert_eq!(embed_width(3), 1);
        assert_eq!(embed_width(32), 16);
        let store = setup(5, 0);
        assert_eq!(store.value(store.id("nl.theta.w").unwrap()).shape(), &[2, 5]);
        assert_eq!(store.value(store.id("nl.g.w").unwrap()).shape(), &[5, 5]);
    }

    #[test]
    fn zero_query_key_gives_spatial_mean_of_g() {
        let mut store = setup(3, 1);
        for name in ["nl.theta.w", "nl.phi.w"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut rng = Rng::new(9);
        let z = rng.tensor_uniform(&[3, 2, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let w = NonLocalWeights::bind(&mut g, &store, "nl", false).unwrap();
        let zv = g.input(z);
        let (v, attn) = nonlocal_with_attention(&mut g, zv, &w).unwrap();
        assert!(g.value(attn).data().iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
        let gz = g.conv1x1(zv, w.g_w, w.g_b).unwrap();
        let gv = g.value(gz).clone();
        let out = g.value(v);
        for c in 0..3 {
            let mean: f64 = gv.data()[c * 6..(c + 1) * 6].iter().sum::<f64>() / 6.0;
            for p in 0..6 {
                assert!((out.data()[c * 6 + p] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_position_returns_g() {
        let store = setup(4, 2);
        let z = Tensor::new(&[4, 1, 1], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut g = Graph::new();
        let w = NonLocalWeights::bind(&mut g, &store, "nl", false).unwrap();
        let zv = g.input(z);
        let v = nonlocal_forward(&mut g, zv, &w).unwrap();
        let gz = g.conv1x1(zv, w.g_w, w.g_b).unwrap();
        assert_eq!(g.value(v).data(), g.value(gz).data());
    }

    #[test]
    fn shape_is_preserved() {
        for (c, h, w) in [(1, 1, 1), (2, 3, 5), (6, 4, 4)] {
            let store = setup(c, 3);
            let mut g = Graph::new();
            let wts = NonLocalWeights::bind(&mut g, &store, "nl", true).unwrap();
            let z = g.input(Tensor::full(&[c, h, w], 0.5));
            let v = nonlocal_forward(&mut g, z, &wts).unwrap();
            assert_eq!(g.shape(v), &[c, h, w]);
        }
    }
}
