//! Continual attentive fusion.
//!
//! Projected features of the current and the frozen previous model are
//! fused by a 1x1 convolution, two 3x3 convolutions turn the fused map into
//! a spatial map `A_sp` (channel mean) and a channel vector `A_ch` (spatial
//! mean), and their outer product reweights the fused features residually:
//! `z_bar = (1 + A_ch (x) A_sp) * v`, elementwise.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::{he_normal, Rng};
use crate::nonlocal::{nonlocal_forward, NonLocalWeights};
use crate::tensor::Tensor;

/// How the fusion convolution is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Training at step >= 2: fuse current and previous projected features.
    TrainFuse,
    /// Bypass the fusion convolution and use the current features directly.
    TestSkip,
    /// Fuse the current features with zeros in place of the previous ones.
    TestZeroPad,
    /// Run the previous model and fuse exactly as in training.
    TestConcat,
}

impl FusionMode {
    pub fn needs_previous(self) -> bool {
        matches!(self, FusionMode::TrainFuse | FusionMode::TestConcat)
    }

    pub const EVAL_MODES: [FusionMode; 3] =
        [FusionMode::TestSkip, FusionMode::TestZeroPad, FusionMode::TestConcat];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::TrainFuse => "train",
            FusionMode::TestSkip => "skip",
            FusionMode::TestZeroPad => "zeropad",
            FusionMode::TestConcat => "concat",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(FusionMode::TestSkip),
            "zeropad" => Ok(FusionMode::TestZeroPad),
            "concat" => Ok(FusionMode::TestConcat),
            "train" => Ok(FusionMode::TrainFuse),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected skip, zeropad or concat)"
            ))),
        }
    }
}

/// Fusion and attention convolutions, bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct CafWeights {
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub sp_w: Var,
    pub sp_b: Var,
    pub ch_w: Var,
    pub ch_b: Var,
}

/// Initial fusion weight: the average of the previous and current halves,
/// `0.5 * [I | I]`.
pub fn initial_fuse_weight(channels: usize) -> Tensor {
    Tensor::from_fn(&[channels, 2 * channels], |i| {
        let (row, col) = (i / (2 * channels), i % (2 * channels));
        if col % channels == row {
            0.5
        } else {
            0.0
        }
    })
}

/// Attention convolutions start at a tenth of He scale so that `A_str`
/// begins small but non-zero (both heads at zero would be a fixed point).
const ATTENTION_INIT_SCALE: f64 = 0.1;

impl CafWeights {
    /// Creates `{prefix}.fuse.*`, `{prefix}.sp.*`, `{prefix}.ch.*`.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Rng) -> Result<()> {
        let c = channels;
        store.insert(format!("{prefix}.fuse.w"), initial_fuse_weight(c))?;
        store.insert(format!("{prefix}.fuse.b"), Tensor::zeros(&[c]))?;
        for head in ["sp", "ch"] {
            let w = he_normal(rng, &[c, c, 3, 3], 9 * c).map(|x| x * ATTENTION_INIT_SCALE);
            store.insert(format!("{prefix}.{head}.w"), w)?;
            store.insert(format!("{prefix}.{head}.b"), Tensor::zeros(&[c]))?;
        }
        Ok(())
    }

    /// Resets the fusion convolution to [`initial_fuse_weight`].
    pub fn reset_fusion(store: &mut ParamStore, prefix: &str) -> Result<()> {
        let w = store.require(&format!("{prefix}.fuse.w"))?;
        let b = store.require(&format!("{prefix}.fuse.b"))?;
        let c = store.value(b).numel();
        store.set_value(w, initial_fuse_weight(c));
        store.set_value(b, Tensor::zeros(&[c]));
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str, trainable: bool) -> Result<Self> {
        let mut b = |name: &str| -> Result<Var> {
            let id = store.require(&format!("{prefix}.{name}"))?;
            Ok(g.bind(store, id, trainable))
        };
        Ok(Self {
            fuse_w: b("fuse.w")?,
            fuse_b: b("fuse.b")?,
            sp_w: b("sp.w")?,
            sp_b: b("sp.b")?,
            ch_w: b("ch.w")?,
            ch_b: b("ch.b")?,
        })
    }
}

/// Channel vector, spatial map, and their outer product.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPack {
    pub a_ch: Var,
    pub a_sp: Var,
    pub a_str: Var,
}

/// Concrete values of an [`AttentionPack`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionValues {
    pub a_ch: Tensor,
    pub a_sp: Tensor,
    pub a_str: Tensor,
}

impl AttentionPack {
    pub fn values(&self, g: &Graph) -> AttentionValues {
        AttentionValues {
            a_ch: g.value(self.a_ch).clone(),
            a_sp: g.value(self.a_sp).clone(),
            a_str: g.value(self.a_str).clone(),
        }
    }
}

/// `conv1x1(concat(v_old, v_new))`. The previous features are detached.
pub fn fuse(g: &mut Graph, v_new: Var, v_old: Var, w: &CafWeights) -> Result<Var> {
    let (c, h, wd) = g.value(v_new).chw("fuse")?;
    let (co, ho, wo) = g.value(v_old).chw("fuse")?;
    for (axis, a, b) in [("channels", c, co), ("height", h, ho), ("width", wd, wo)] {
        if a != b {
            return Err(Error::Dimension {
                op: "fuse",
                axis,
                expected: a,
                actual: b,
            });
        }
    }
    let old = g.detach(v_old);
    let cat = g.concat_channels(old, v_new)?;
    g.conv1x1(cat, w.fuse_w, w.fuse_b)
}

/// `A_sp[h,w] = mean_c (w_sp * v)[c,h,w]`, no activation.
pub fn spatial_attention(g: &mut Graph, v: Var, w: &CafWeights) -> Result<Var> {
    let conv = g.conv3x3(v, w.sp_w, w.sp_b)?;
    g.channel_avg(conv)
}

/// `A_ch[c] = mean_{h,w} (w_ch * v)[c,h,w]`, no activation.
pub fn channel_attention(g: &mut Graph, v: Var, w: &CafWeights) -> Result<Var> {
    let conv = g.conv3x3(v, w.ch_w, w.ch_b)?;
    g.global_avg_pool(conv)
}

/// `A_str[c,h,w] = A_ch[c] * A_sp[h,w]`.
pub fn structured_attention(g: &mut Graph, a_ch: Var, a_sp: Var) -> Result<Var> {
    g.outer(a_ch, a_sp)
}

/// Previous-model inputs to the fusion branch.
#[derive(Clone, Copy, Debug)]
pub struct PreviousBranch<'a> {
    /// Encoder features of the frozen model.
    pub z: Var,
    /// The frozen model's own non-local projection.
    pub nonlocal: &'a NonLocalWeights,
}

/// Full CAF block: non-local projection, fusion according to `mode`, the
/// two attention heads, and the residual reweighting.
pub fn caf_forward(
    g: &mut Graph,
    z_new: Var,
    previous: Option<PreviousBranch<'_>>,
    nonlocal: &NonLocalWeights,
    w: &CafWeights,
    mode: FusionMode,
) -> Result<(Var, AttentionPack)> {
    let v_new = nonlocal_forward(g, z_new, nonlocal)?;
    let v_in = match mode {
        FusionMode::TrainFuse | FusionMode::TestConcat => {
            let prev = previous.ok_or_else(|| {
                Error::Protocol(format!("fusion mode `{mode}` needs the previous model's features"))
            })?;
            let z_old = g.detach(prev.z);
            let v_old = nonlocal_forward(g, z_old, prev.nonlocal)?;
            fuse(g, v_new, v_old, w)?
        }
        FusionMode::TestZeroPad | FusionMode::TestSkip => {
            if previous.is_some() {
                log::warn!("fusion mode `{mode}` ignores the previous model's features");
            }
            if mode == FusionMode::TestZeroPad {
                let zeros = g.input(Tensor::zeros(g.shape(v_new)));
                fuse(g, v_new, zeros, w)?
            } else {
                v_new
            }
        }
    };
    let a_sp = spatial_attention(g, v_in, w)?;
    let a_ch = channel_attention(g, v_in, w)?;
    let a_str = structured_attention(g, a_ch, a_sp)?;
    let gate = g.add_scalar(a_str, 1.0);
    let z_bar = g.mul(gate, v_in)?;
    Ok((z_bar, AttentionPack { a_ch, a_sp, a_str }))
}
