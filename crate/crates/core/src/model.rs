//! Toy segmentation network: encoder, CAF, refinement, classifier.
//!
//! ```text
//! image [3,H,W]
//!   -> conv3x3+relu -> pool -> conv3x3+relu -> pool -> conv3x3+relu = z   [C,H/4,W/4]
//!   -> CAF (non-local projection, fusion, structured attention)  = z_bar
//!   -> conv3x3+relu -> conv3x3+relu                                = h
//!   -> conv1x1 -> bilinear upsample                                = logits [K,H,W]
//! ```
//!
//! Without CAF the block is the identity (`z_bar = z`).

use serde::{Deserialize, Serialize};

use crate::attentive::SEWeights;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::background::StepConfig;
use crate::caf::{caf_forward, AttentionPack, CafWeights, FusionMode, PreviousBranch};
use crate::error::{Error, Result};
use crate::init::{register_conv1x1, register_conv3x3, Rng};
use crate::nonlocal::NonLocalWeights;
use crate::tensor::{self, Tensor};

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Widths of the first two encoder stages.
    pub enc_widths: [usize; 2],
    /// Feature channels `C` of `z`, `z_bar` and `h`.
    pub channels: usize,
    /// Whether the CAF block is present.
    pub caf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_widths: [16, 32],
            channels: 32,
            caf: true,
        }
    }
}

/// Everything about a model besides its weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub step: usize,
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub config: ModelConfig,
}

/// Weights plus metadata of one incremental-step network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub meta: ModelMeta,
}

/// Standard deviation of freshly added classifier rows.
pub const NEW_ROW_STD: f64 = 0.01;

impl ModelState {
    /// Fresh step-`step` model for the classes of `cfg`.
    pub fn new(config: ModelConfig, cfg: &StepConfig, step: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::stream(seed, 0x5eed_0000 + step as u64);
        let mut params = ParamStore::new();
        let [w0, w1] = config.enc_widths;
        let c = config.channels;
        register_conv3x3(&mut params, "enc.0", w0, 3, &mut rng)?;
        register_conv3x3(&mut params, "enc.1", w1, w0, &mut rng)?;
        register_conv3x3(&mut params, "enc.2", c, w1, &mut rng)?;
        NonLocalWeights::register(&mut params, "nl", c, &mut rng)?;
        CafWeights::register(&mut params, "caf", c, &mut rng)?;
        register_conv3x3(&mut params, "ref.0", c, c, &mut rng)?;
        register_conv3x3(&mut params, "ref.1", c, c, &mut rng)?;
        register_conv1x1(&mut params, "cls", cfg.num_classes(), c, &mut rng)?;
        SEWeights::register(&mut params, "se_z", c, &mut rng)?;
        SEWeights::register(&mut params, "se_h", c, &mut rng)?;
        Ok(Self {
            params,
            meta: ModelMeta {
                step,
                old_classes: cfg.old_classes().to_vec(),
                new_classes: cfg.new_classes().to_vec(),
                config,
            },
        })
    }

    pub fn step_config(&self) -> Result<StepConfig> {
        StepConfig::new(self.meta.old_classes.clone(), self.meta.new_classes.clone())
    }

    /// Classifier channel order.
    pub fn classes(&self) -> Vec<usize> {
        self.meta.old_classes.iter().chain(&self.meta.new_classes).copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.old_classes.len() + self.meta.new_classes.len()
    }

    /// Appends one classifier row per class in `added` (Gaussian weights
    /// with std [`NEW_ROW_STD`], zero bias); existing rows are untouched.
    pub fn grow_classifier(&mut self, added: &[usize], rng: &mut Rng) -> Result<()> {
        let wid = self.params.require("cls.w")?;
        let bid = self.params.require("cls.b")?;
        let w = self.params.value(wid).clone();
        let (k, c) = (w.shape()[0], w.shape()[1]);
        let mut data = w.into_data();
        data.extend((0..added.len() * c).map(|_| NEW_ROW_STD * rng.normal()));
        let mut bias = self.params.value(bid).clone().into_data();
        bias.extend(std::iter::repeat(0.0).take(added.len()));
        self.params.set_value(wid, Tensor::new(&[k + added.len(), c], data)?);
        self.params.set_value(bid, Tensor::new(&[k + added.len()], bias)?);
        Ok(())
    }

    /// Re-draws a parameter group (every parameter whose name starts with
    /// `prefix.`) with He-normal weights and zero biases.
    pub fn reinit_group(&mut self, prefix: &str, rng: &mut Rng) -> Result<()> {
        let ids: Vec<_> = self
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with(&format!("{prefix}.")))
            .map(|(id, _)| id)
            .collect();
        if ids.is_empty() {
            return Err(Error::Contract(format!("no parameters under `{prefix}`")));
        }
        for id in ids {
            let p = self.params.get(id);
            let shape = p.value.shape().to_vec();
            let fresh = if p.name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1..].iter().product();
                crate::init::he_normal(rng, &shape, fan_in)
            };
            self.params.set_value(id, fresh);
        }
        Ok(())
    }
}

/// Outputs of the frozen previous model (all constants).
#[derive(Clone, Copy, Debug)]
pub struct PreviousOutputs {
    pub z: Var,
    pub z_bar: Var,
    pub h: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub z: Var,
    pub z_bar: Var,
    pub h: Var,
    pub pack: Option<AttentionPack>,
    pub previous: Option<PreviousOutputs>,
}

fn conv3(g: &mut Graph, store: &ParamStore, name: &str, x: Var, trainable: bool) -> Result<Var> {
    let w = g.bind(store, store.require(&format!("{name}.w"))?, trainable);
    let b = g.bind(store, store.require(&format!("{name}.b"))?, trainable);
    g.conv3x3(x, w, b)
}

fn encode(g: &mut Graph, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
    let a = conv3(g, store, "enc.0", x, trainable)?;
    let a = g.relu(a);
    let a = g.avg_pool2(a)?;
    let a = conv3(g, store, "enc.1", a, trainable)?;
    let a = g.relu(a);
    let a = g.avg_pool2(a)?;
    let a = conv3(g, store, "enc.2", a, trainable)?;
    Ok(g.relu(a))
}

struct Head {
    z: Var,
    z_bar: Var,
    h: Var,
    logits: Var,
    pack: Option<AttentionPack>,
}

fn run(
    g: &mut Graph,
    model: &ModelState,
    previous: Option<(&ModelState, Var)>,
    image: Var,
    mode: FusionMode,
    trainable: bool,
) -> Result<Head> {
    let store = &model.params;
    let (_, height, width) = g.value(image).chw("forward")?;
    let z = encode(g, store, image, trainable)?;
    let (z_bar, pack) = if model.meta.config.caf {
        let nl = NonLocalWeights::bind(g, store, "nl", trainable)?;
        let caf = CafWeights::bind(g, store, "caf", trainable)?;
        let prev_nl = match previous {
            Some((pm, _)) if mode.needs_previous() => {
                Some(NonLocalWeights::bind(g, &pm.params, "nl", false)?)
            }
            _ => None,
        };
        let branch = match (previous, prev_nl.as_ref()) {
            (Some((_, z_old)), Some(nonlocal)) => Some(PreviousBranch { z: z_old, nonlocal }),
            _ => None,
        };
        let (zb, pack) = caf_forward(g, z, branch, &nl, &caf, mode)?;
        (zb, Some(pack))
    } else {
        (z, None)
    };
    let h = conv3(g, store, "ref.0", z_bar, trainable)?;
    let h = g.relu(h);
    let h = conv3(g, store, "ref.1", h, trainable)?;
    let h = g.relu(h);
    let cw = g.bind(store, store.require("cls.w")?, trainable);
    let cb = g.bind(store, store.require("cls.b")?, trainable);
    let small = g.conv1x1(h, cw, cb)?;
    let logits = g.upsample_bilinear(small, height, width)?;
    Ok(Head { z, z_bar, h, logits, pack })
}

/// Forward pass of `model` (trainable) with the frozen `previous` model run
/// alongside when given. The previous model runs its own pipeline with the
/// fusion skipped; its encoder features feed this model's CAF when `mode`
/// fuses.
pub fn forward(
    g: &mut Graph,
    model: &ModelState,
    previous: Option<&ModelState>,
    image: &Tensor,
    mode: FusionMode,
) -> Result<Forward> {
    forward_with(g, model, previous, image, mode, true)
}

/// [`forward`] with the current model's weights bound as constants.
pub fn forward_frozen(
    g: &mut Graph,
    model: &ModelState,
    previous: Option<&ModelState>,
    image: &Tensor,
    mode: FusionMode,
) -> Result<Forward> {
    forward_with(g, model, previous, image, mode, false)
}

fn forward_with(
    g: &mut Graph,
    model: &ModelState,
    previous: Option<&ModelState>,
    image: &Tensor,
    mode: FusionMode,
    trainable: bool,
) -> Result<Forward> {
    let x = g.input(image.clone());
    let prev = match previous {
        Some(pm) => {
            let head = run(g, pm, None, x, FusionMode::TestSkip, false)?;
            let probs = g.softmax(head.logits, 0)?;
            Some(PreviousOutputs {
                z: head.z,
                z_bar: head.z_bar,
                h: head.h,
                logits: head.logits,
                probs,
            })
        }
        None => None,
    };
    let head = run(
        g,
        model,
        previous.zip(prev.map(|p| p.z)),
        x,
        mode,
        trainable,
    )?;
    Ok(Forward {
        logits: head.logits,
        z: head.z,
        z_bar: head.z_bar,
        h: head.h,
        pack: head.pack,
        previous: prev,
    })
}

/// Per-pixel predicted class ids (row-major) under `mode`.
pub fn predict(
    model: &ModelState,
    previous: Option<&ModelState>,
    image: &Tensor,
    mode: FusionMode,
) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let prev = if mode.needs_previous() { previous } else { None };
    let out = forward_frozen(&mut g, model, prev, image, mode)?;
    let logits = g.value(out.logits);
    Ok(argmax_classes(logits, &model.classes()))
}

/// Channel-wise argmax mapped through `classes`.
pub fn argmax_classes(logits: &Tensor, classes: &[usize]) -> Vec<u8> {
    let (k, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let p = h * w;
    let d = logits.data();
    (0..p)
        .map(|pix| {
            let mut best = 0;
            for c in 1..k {
                if d[c * p + pix] > d[best * p + pix] {
                    best = c;
                }
            }
            classes[best] as u8
        })
        .collect()
}

/// Softmax probabilities of `model` alone (skip fusion), as plain values.
pub fn probabilities(model: &ModelState, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = forward_frozen(&mut g, model, None, image, FusionMode::TestSkip)?;
    tensor::softmax(g.value(out.logits), 0)
}
