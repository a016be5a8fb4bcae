//! Attentive feature distillation.
//!
//! A feature map `m` is reweighted by `(AD_ch (x) AD_sp + 1) * m`, where
//! `AD_ch` is a squeeze-and-excitation vector and `AD_sp` the Frobenius
//! normalised per-pixel energy `sum_c m_c^2`. The loss compares reweighted
//! current and previous features at two sites (`z` and `h`).

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::init::{register_conv1x1, Rng};

/// Squeeze width for `c` channels (reduction ratio 4).
pub fn se_width(c: usize) -> usize {
    (c / 4).max(1)
}

/// Squeeze-and-excitation weights for one distillation site.
#[derive(Clone, Copy, Debug)]
pub struct SEWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SEWeights {
    /// Creates `{prefix}.fc1.*` `[C_r, C]` and `{prefix}.fc2.*` `[C, C_r]`.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Rng) -> Result<()> {
        let cr = se_width(channels);
        register_conv1x1(store, &format!("{prefix}.fc1"), cr, channels, rng)?;
        register_conv1x1(store, &format!("{prefix}.fc2"), channels, cr, rng)?;
        Ok(())
    }

    /// Same values, no gradient.
    pub fn detached(&self, g: &mut Graph) -> Self {
        Self {
            w1: g.detach(self.w1),
            b1: g.detach(self.b1),
            w2: g.detach(self.w2),
            b2: g.detach(self.b2),
        }
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str, trainable: bool) -> Result<Self> {
        let mut b = |name: &str| -> Result<Var> {
            let id = store.require(&format!("{prefix}.{name}"))?;
            Ok(g.bind(store, id, trainable))
        };
        Ok(Self {
            w1: b("fc1.w")?,
            b1: b("fc1.b")?,
            w2: b("fc2.w")?,
            b2: b("fc2.b")?,
        })
    }
}

/// `sigmoid(w2 relu(w1 avgpool(m) + b1) + b2)`, shape `[C]`.
pub fn ad_channel(g: &mut Graph, m: Var, se: &SEWeights) -> Result<Var> {
    let c = g.value(m).chw("ad_channel")?.0;
    let pooled = g.global_avg_pool(m)?;
    let pooled = g.reshape(pooled, &[c, 1, 1])?;
    let hidden = g.conv1x1(pooled, se.w1, se.b1)?;
    let hidden = g.relu(hidden);
    let out = g.conv1x1(hidden, se.w2, se.b2)?;
    let out = g.sigmoid(out);
    g.reshape(out, &[c])
}

/// `s / ||s||_F` with `s[h,w] = sum_c m[c,h,w]^2`, shape `[H,W]`. A zero map
/// yields zeros and a graph degeneracy flag.
pub fn ad_spatial(g: &mut Graph, m: Var) -> Result<Var> {
    let c = g.value(m).chw("ad_spatial")?.0;
    let sq = g.square(m);
    let mean = g.channel_avg(sq)?;
    let energy = g.scale(mean, c as f64);
    Ok(g.frob_normalize(energy))
}

/// `(AD_ch(m) (x) AD_sp(m) + 1) * m`.
pub fn ad_combine(g: &mut Graph, m: Var, se: &SEWeights) -> Result<Var> {
    let ch = ad_channel(g, m, se)?;
    let sp = ad_spatial(g, m)?;
    let att = g.outer(ch, sp)?;
    let gate = g.add_scalar(att, 1.0);
    g.mul(gate, m)
}

/// Mean-square distance between the attentive transforms of one pair.
fn site_term(g: &mut Graph, new: Var, old: Var, se: &SEWeights, se_old: &SEWeights) -> Result<Var> {
    let old = g.detach(old);
    let a = ad_combine(g, new, se)?;
    let b = ad_combine(g, old, se_old)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `mean ||AD(z_new) - AD(z_old)||^2 + mean ||AD(h_new) - AD(h_old)||^2`.
///
/// Each squared distance is averaged over its element count. The previous
/// model's tensors are detached. `se_z` and `se_h` weight both sides of
/// their site but receive gradient through the current side only.
pub fn loss_ad(
    g: &mut Graph,
    z_new: Var,
    z_old: Var,
    h_new: Var,
    h_old: Var,
    se_z: &SEWeights,
    se_h: &SEWeights,
) -> Result<Var> {
    let frozen_z = se_z.detached(g);
    let frozen_h = se_h.detached(g);
    loss_ad_split(g, [z_new, z_old, h_new, h_old], [se_z, se_h], [&frozen_z, &frozen_h])
}

/// [`loss_ad`] with separate SE weights for the previous-model side, which
/// are used as given. `features` is `[z_new, z_old, h_new, h_old]`.
pub fn loss_ad_split(
    g: &mut Graph,
    features: [Var; 4],
    se: [&SEWeights; 2],
    se_old: [&SEWeights; 2],
) -> Result<Var> {
    let [z_new, z_old, h_new, h_old] = features;
    let tz = site_term(g, z_new, z_old, se[0], se_old[0])?;
    let th = site_term(g, h_new, h_old, se[1], se_old[1])?;
    g.add(tz, th)
}
