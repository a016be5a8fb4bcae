//! Background-aware probability remapping and the output-level losses.
//!
//! Channels of a step-`l` classifier are ordered as the previous classes
//! `S_{l-1}` (background included) followed by the new classes `U_l`.
//! Two remappings bridge the background shift:
//!
//! * [`tilde_phi`] folds every previous class into the background, giving a
//!   distribution over `{bg} + U_l` that matches the current annotations;
//! * [`hat_phi`] folds every new class into the background, giving a
//!   distribution over `S_{l-1}` comparable with the frozen model.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Class id of the persistent background.
pub const BACKGROUND: usize = 0;
/// Mask value for pixels that are never scored.
pub const IGNORE: u8 = 255;
/// Floor applied before every `log` on probabilities.
pub const LOG_FLOOR: f64 = 1e-12;
/// Default upper bound for the balancing ratio.
pub const DEFAULT_GAMMA_MAX: f64 = 1e4;

/// Previous and new classes of one incremental step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepConfig {
    background: usize,
    old_classes: Vec<usize>,
    new_classes: Vec<usize>,
}

impl StepConfig {
    /// `old_classes` must contain the background; the two sets must be
    /// disjoint and free of duplicates.
    pub fn new(old_classes: Vec<usize>, new_classes: Vec<usize>) -> Result<Self> {
        if !old_classes.contains(&BACKGROUND) {
            return Err(Error::Protocol("background must be among the previous classes".into()));
        }
        if new_classes.contains(&BACKGROUND) {
            return Err(Error::Protocol("background cannot be a new class".into()));
        }
        let mut all: Vec<usize> = old_classes.iter().chain(&new_classes).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::Protocol(format!(
                "previous {old_classes:?} and new {new_classes:?} classes overlap"
            )));
        }
        Ok(Self {
            background: BACKGROUND,
            old_classes,
            new_classes,
        })
    }

    /// First step: only the background is known beforehand.
    pub fn first(new_classes: Vec<usize>) -> Result<Self> {
        Self::new(vec![BACKGROUND], new_classes)
    }

    pub fn background(&self) -> usize {
        self.background
    }

    pub fn old_classes(&self) -> &[usize] {
        &self.old_classes
    }

    /// Previous classes without the background: the "old" group of every
    /// report.
    pub fn old_foreground(&self) -> Vec<usize> {
        self.old_classes.iter().copied().filter(|&c| c != self.background).collect()
    }

    pub fn new_classes(&self) -> &[usize] {
        &self.new_classes
    }

    /// Classifier channel order: previous classes, then new ones.
    pub fn classes(&self) -> Vec<usize> {
        self.old_classes.iter().chain(&self.new_classes).copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.old_classes.len() + self.new_classes.len()
    }

    pub fn channel_of(&self, class: usize) -> Option<usize> {
        self.old_classes
            .iter()
            .chain(&self.new_classes)
            .position(|&c| c == class)
    }

    fn bg_channel(&self) -> usize {
        self.channel_of(self.background).expect("background checked in new()")
    }

    /// Channel groups of [`tilde_phi`]: all previous channels, then one per
    /// new class.
    pub fn tilde_groups(&self) -> Vec<Vec<usize>> {
        let n_old = self.old_classes.len();
        let mut groups = vec![(0..n_old).collect::<Vec<_>>()];
        groups.extend((0..self.new_classes.len()).map(|i| vec![n_old + i]));
        groups
    }

    /// Channel groups of [`hat_phi`]: one per previous class, with every new
    /// channel added to the background.
    pub fn hat_groups(&self) -> Vec<Vec<usize>> {
        let n_old = self.old_classes.len();
        let bg = self.bg_channel();
        (0..n_old)
            .map(|k| {
                if k == bg {
                    std::iter::once(k)
                        .chain(n_old..n_old + self.new_classes.len())
                        .collect()
                } else {
                    vec![k]
                }
            })
            .collect()
    }

    /// Index into the [`tilde_phi`] output for a current label, `None` for
    /// ignored pixels. Previous and future classes are errors here: labels
    /// must already be remapped.
    pub fn tilde_target(&self, label: u8) -> Result<Option<usize>, usize> {
        if label == IGNORE {
            return Ok(None);
        }
        let l = label as usize;
        if l == self.background {
            return Ok(Some(0));
        }
        match self.new_classes.iter().position(|&c| c == l) {
            Some(i) => Ok(Some(1 + i)),
            None => Err(l),
        }
    }
}

/// Per-pixel class probabilities `[K,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

/// Tolerance on per-pixel mass for [`ProbMap::new`].
pub const PROB_TOL: f64 = 1e-9;

impl ProbMap {
    /// Checks non-negativity and unit per-pixel mass.
    pub fn new(t: Tensor) -> Result<Self> {
        let (k, h, w) = t.chw("ProbMap")?;
        let p = h * w;
        for pix in 0..p {
            let mut total = 0.0;
            for c in 0..k {
                let v = t.data()[c * p + pix];
                if v < 0.0 {
                    return Err(Error::Contract(format!("negative probability {v} at pixel {pix}")));
                }
                total += v;
            }
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::Contract(format!("pixel {pix} has mass {total}")));
            }
        }
        Ok(Self(t))
    }

    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Self(tensor::softmax(logits, 0)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn aggregate(t: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(t.clone());
    let y = g.channel_group_sum(x, groups.to_vec())?;
    Ok(g.value(y).clone())
}

fn expect_channels(t: &Tensor, k: usize, op: &'static str) -> Result<()> {
    let c = t.chw(op)?.0;
    if c != k {
        return Err(Error::Dimension {
            op,
            axis: "classes",
            expected: k,
            actual: c,
        });
    }
    Ok(())
}

/// Distribution over `S_l` -> distribution over `{bg} + U_l`. Mass is
/// preserved even for unnormalised input.
pub fn tilde_phi(p: &Tensor, cfg: &StepConfig) -> Result<Tensor> {
    expect_channels(p, cfg.num_classes(), "tilde_phi")?;
    aggregate(p, &cfg.tilde_groups())
}

/// Distribution over `S_l` -> distribution over `S_{l-1}`.
pub fn hat_phi(p: &Tensor, cfg: &StepConfig) -> Result<Tensor> {
    expect_channels(p, cfg.num_classes(), "hat_phi")?;
    aggregate(p, &cfg.hat_groups())
}

/// Graph version of [`hat_phi`] applied to softmax probabilities.
pub fn hat_phi_var(g: &mut Graph, probs: Var, cfg: &StepConfig) -> Result<Var> {
    expect_channels(g.value(probs), cfg.num_classes(), "hat_phi")?;
    g.channel_group_sum(probs, cfg.hat_groups())
}

/// Pixel-wise cross-entropy at the ground-truth label over `tilde_phi` of
/// the softmax. Ignored pixels (255) are skipped; the mean is over the
/// remaining pixels.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8], cfg: &StepConfig) -> Result<Var> {
    expect_channels(g.value(logits), cfg.num_classes(), "seg_loss")?;
    let targets = labels
        .iter()
        .enumerate()
        .map(|(pix, &l)| {
            cfg.tilde_target(l).map_err(|id| {
                Error::Protocol(format!(
                    "pixel {pix} has label {id}, not background or one of {:?}",
                    cfg.new_classes()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let probs = g.softmax(logits, 0)?;
    let tilde = g.channel_group_sum(probs, cfg.tilde_groups())?;
    let logp = g.log_clamped(tilde, LOG_FLOOR);
    g.nll_at_labels(logp, targets)
}

/// Background and non-background parts of the distillation cross-entropy:
/// `L_B = beta sum_p old[bg] log new[bg]` and
/// `L_N = beta sum_p sum_{s != bg} old[s] log new[s]`, `beta = -1/(HW)`.
///
/// `p_new_hat` and `p_old` are distributions over `S_{l-1}`; `p_old` is
/// detached.
pub fn kd_terms(g: &mut Graph, p_new_hat: Var, p_old: Var, cfg: &StepConfig) -> Result<(Var, Var)> {
    let k = cfg.old_classes().len();
    expect_channels(g.value(p_new_hat), k, "kd_terms")?;
    expect_channels(g.value(p_old), k, "kd_terms")?;
    let (_, h, w) = g.value(p_new_hat).chw("kd_terms")?;
    let beta = -1.0 / (h * w) as f64;
    let old = g.detach(p_old);
    let logp = g.log_clamped(p_new_hat, LOG_FLOOR);
    let prod = g.mul(logp, old)?;
    let bg = cfg.bg_channel();
    let others: Vec<usize> = (0..k).filter(|&c| c != bg).collect();
    let b = g.channel_group_sum(prod, vec![vec![bg]])?;
    let b = g.sum(b);
    let l_b = g.scale(b, beta);
    let n = g.channel_group_sum(prod, vec![others])?;
    let n = g.sum(n);
    let l_n = g.scale(n, beta);
    Ok((l_b, l_n))
}

/// Balancing ratio and whether it had to be clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gamma {
    pub value: f64,
    pub degenerate: bool,
}

/// `gamma = sum_{s != bg} q[s] / q[bg]` with `q = softmax(avgpool(p_old))`
/// over the class axis. Plain values: no gradient ever flows through it.
pub fn gamma(p_old: &Tensor, cfg: &StepConfig, gamma_max: f64) -> Result<Gamma> {
    expect_channels(p_old, cfg.old_classes().len(), "gamma")?;
    let pooled = tensor::global_avg_pool(p_old)?;
    let q = tensor::softmax(&pooled, 0)?;
    let bg = cfg.bg_channel();
    let q_bg = q.data()[bg];
    if q_bg < LOG_FLOOR {
        return Ok(Gamma {
            value: gamma_max,
            degenerate: true,
        });
    }
    let rest: f64 = q
        .data()
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != bg)
        .map(|(_, v)| v)
        .sum();
    Ok(Gamma {
        value: rest / q_bg,
        degenerate: false,
    })
}

/// `gamma L_B + L_N` with `gamma` a constant. `gamma = 1` is the unbiased
/// distillation loss.
pub fn balanced_kd(g: &mut Graph, p_new_hat: Var, p_old: Var, cfg: &StepConfig, gamma: f64) -> Result<Var> {
    let (l_b, l_n) = kd_terms(g, p_new_hat, p_old, cfg)?;
    let weighted = g.scale(l_b, gamma);
    g.add(weighted, l_n)
}

/// Weights of the two distillation terms in the overall objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ad: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ad: 1000.0,
            lambda_d: 10.0,
        }
    }
}

/// `seg + lambda_ad * ad + lambda_d * d`; absent terms count as zero.
pub fn total_loss(g: &mut Graph, seg: Var, ad: Option<Var>, d: Option<Var>, w: LossWeights) -> Result<Var> {
    let mut total = seg;
    if let Some(ad) = ad {
        let t = g.scale(ad, w.lambda_ad);
        total = g.add(total, t)?;
    }
    if let Some(d) = d {
        let t = g.scale(d, w.lambda_d);
        total = g.add(total, t)?;
    }
    Ok(total)
}
