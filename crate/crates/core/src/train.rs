//! Training loop, evaluation and experiment orchestration.

use std::fmt;
use std::str::FromStr;

use crate::attentive::{loss_ad, SEWeights};
use crate::autodiff::{Graph, Var};
use crate::background::{
    balanced_kd, gamma, hat_phi_var, seg_loss, total_loss, LossWeights, StepConfig, BACKGROUND,
    DEFAULT_GAMMA_MAX, IGNORE,
};
use crate::caf::FusionMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::Rng;
use crate::metrics::ConfusionMatrix;
use crate::model::{forward, predict, ModelConfig, ModelState};
use crate::optim::{clip_grad_norm, poly_lr, Sgd};
use crate::protocol::{advance_step, filter_step, remap_labels, ModelLineage, Scenario};
use crate::tensor::Tensor;

/// Output-distillation flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distill {
    None,
    /// Unweighted background term (`gamma = 1`).
    Plain,
    /// Background term weighted by the balancing ratio.
    Balanced,
}

/// Which components are switched on for a run.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub name: String,
    /// The CAF block is part of the network.
    pub caf: bool,
    /// From step 2 on, the previous model's features feed the fusion.
    pub fuse: bool,
    pub ad: bool,
    pub distill: Distill,
    /// One training run over every class.
    pub joint: bool,
}

impl Variant {
    fn plain(name: &str, caf: bool) -> Self {
        Self {
            name: name.to_string(),
            caf,
            fuse: false,
            ad: false,
            distill: Distill::None,
            joint: false,
        }
    }

    /// Whether training needs the frozen previous model at all.
    pub fn uses_previous(&self) -> bool {
        self.fuse || self.ad || self.distill != Distill::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `ft`, `joint`, `full` (alias `method`), or `baseline` followed by any
    /// of `+kd`, `+bkd`, `+ad`, `+caf`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "ft" => return Ok(Variant::plain("ft", true)),
            "joint" => {
                let mut v = Variant::plain("joint", true);
                v.joint = true;
                return Ok(v);
            }
            "full" | "method" => return "baseline+caf+ad+bkd".parse().map(|mut v: Variant| {
                v.name = s.to_string();
                v
            }),
            _ => {}
        }
        let mut parts = s.split('+');
        if parts.next() != Some("baseline") {
            return Err(Error::Config(format!("unknown variant `{s}`")));
        }
        let mut v = Variant::plain(s, false);
        for tok in parts {
            match tok {
                "caf" => {
                    v.caf = true;
                    v.fuse = true;
                }
                "ad" => v.ad = true,
                "kd" | "bkd" => {
                    if v.distill != Distill::None {
                        return Err(Error::Config(format!("variant `{s}` sets distillation twice")));
                    }
                    v.distill = if tok == "kd" { Distill::Plain } else { Distill::Balanced };
                }
                other => return Err(Error::Config(format!("unknown component `{other}` in `{s}`"))),
            }
        }
        Ok(v)
    }
}

/// Hyper-parameters of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub batch_size: usize,
    pub lr_first: f64,
    pub lr_later: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub lambda_ad: f64,
    pub lambda_d: f64,
    pub gamma_max: f64,
    /// Global gradient-norm cap per update (0 disables).
    pub grad_clip: f64,
    pub eval_mode: FusionMode,
    pub enc_widths: [usize; 2],
    pub channels: usize,
    /// Epochs of steps >= 2 after which every fusion mode is evaluated.
    pub snapshot_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_first: 30,
            epochs_later: 30,
            batch_size: 8,
            lr_first: 1e-2,
            lr_later: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            lambda_ad: 1000.0,
            lambda_d: 10.0,
            gamma_max: DEFAULT_GAMMA_MAX,
            grad_clip: 0.0,
            eval_mode: FusionMode::TestSkip,
            enc_widths: [16, 32],
            channels: 32,
            snapshot_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Settings for the 32x32, 200-image benchmark on one core.
    ///
    /// Single-image steps with a clipped gradient; the attentive term is
    /// scaled down because at full weight it freezes the new classes at this
    /// network size.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            epochs_first: 60,
            epochs_later: 20,
            batch_size: 1,
            lr_later: 1e-2,
            lambda_ad: 0.1,
            grad_clip: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs_first", self.epochs_first as f64),
            ("epochs_later", self.epochs_later as f64),
            ("batch_size", self.batch_size as f64),
            ("lr_first", self.lr_first),
            ("lr_later", self.lr_later),
            ("gamma_max", self.gamma_max),
            ("channels", self.channels as f64),
            ("enc_widths[0]", self.enc_widths[0] as f64),
            ("enc_widths[1]", self.enc_widths[1] as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("poly_power", self.poly_power),
            ("lambda_ad", self.lambda_ad),
            ("lambda_d", self.lambda_d),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("`{name}` must be non-negative, got {v}")));
            }
        }
        if self.eval_mode == FusionMode::TrainFuse {
            return Err(Error::Config("`eval_mode` must be skip, zeropad or concat".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, caf: bool) -> ModelConfig {
        ModelConfig {
            enc_widths: self.enc_widths,
            channels: self.channels,
            caf,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ad: self.lambda_ad,
            lambda_d: self.lambda_d,
        }
    }
}

/// Loss components of one update (or their average over several).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub ad: f64,
    pub d: f64,
    pub total: f64,
    pub gamma: f64,
}

impl LossReport {
    fn accumulate(&mut self, other: &LossReport, weight: f64) {
        self.seg += weight * other.seg;
        self.ad += weight * other.ad;
        self.d += weight * other.d;
        self.total += weight * other.total;
        self.gamma += weight * other.gamma;
    }
}

/// One training example: image tensor and labels already remapped for the
/// step.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor,
    pub labels: Vec<u8>,
}

/// Forward pass, losses and gradient accumulation for one image. Gradients
/// of `total / scale_by` are added to `model.params`.
pub fn accumulate_example(
    model: &mut ModelState,
    previous: Option<&ModelState>,
    example: &Example,
    step_cfg: &StepConfig,
    variant: &Variant,
    cfg: &TrainConfig,
    scale_by: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let (total, report) = build_loss(&mut g, model, previous, example, step_cfg, variant, cfg)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is not finite: seg={} ad={} d={} gamma={} total={}",
            report.seg, report.ad, report.d, report.gamma, report.total
        )));
    }
    let root = g.scale(total, 1.0 / scale_by);
    g.backward(root, &mut model.params)?;
    Ok(report)
}

/// Builds the full objective for one image. Returns the total node and the
/// component values.
pub fn build_loss(
    g: &mut Graph,
    model: &ModelState,
    previous: Option<&ModelState>,
    example: &Example,
    step_cfg: &StepConfig,
    variant: &Variant,
    cfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let prev = previous.filter(|_| variant.uses_previous());
    let mode = if prev.is_some() && variant.fuse && model.meta.config.caf {
        FusionMode::TrainFuse
    } else {
        FusionMode::TestSkip
    };
    let out = forward(g, model, prev, &example.image, mode)?;
    let seg = seg_loss(g, out.logits, &example.labels, step_cfg)?;
    let mut report = LossReport {
        seg: g.value(seg).item(),
        gamma: 1.0,
        ..LossReport::default()
    };
    let mut ad = None;
    let mut d = None;
    if let Some(old) = out.previous {
        if variant.ad {
            let store = &model.params;
            let se_z = SEWeights::bind(g, store, "se_z", true)?;
            let se_h = SEWeights::bind(g, store, "se_h", true)?;
            let term = loss_ad(g, out.z_bar, old.z_bar, out.h, old.h, &se_z, &se_h)?;
            report.ad = g.value(term).item();
            ad = Some(term);
        }
        if variant.distill != Distill::None {
            let probs = g.softmax(out.logits, 0)?;
            let hat = hat_phi_var(g, probs, step_cfg)?;
            let gm = match variant.distill {
                Distill::Balanced => gamma(g.value(old.probs), step_cfg, cfg.gamma_max)?.value,
                _ => 1.0,
            };
            let term = balanced_kd(g, hat, old.probs, step_cfg, gm)?;
            report.d = g.value(term).item();
            report.gamma = gm;
            d = Some(term);
        }
    }
    let total = total_loss(g, seg, ad, d, cfg.loss_weights())?;
    report.total = g.value(total).item();
    Ok((total, report))
}

/// One optimizer update over `batch`: per-image gradients averaged over the
/// batch, then an SGD step at learning rate `lr`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ModelState,
    previous: Option<&ModelState>,
    batch: &[&Example],
    step_cfg: &StepConfig,
    variant: &Variant,
    cfg: &TrainConfig,
    opt: &mut Sgd,
    lr: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    model.params.zero_grad();
    let n = batch.len() as f64;
    let mut mean = LossReport::default();
    for ex in batch {
        let r = accumulate_example(model, previous, ex, step_cfg, variant, cfg, n)?;
        mean.accumulate(&r, 1.0 / n);
    }
    let norm = clip_grad_norm(&mut model.params, cfg.grad_clip);
    log::trace!("grad norm {norm:.4e}");
    opt.step(&mut model.params, lr);
    Ok(mean)
}

/// Ground truth as seen by a model knowing `known`: unknown classes become
/// background.
fn eval_labels(mask: &[u8], known: &[bool; 256]) -> Vec<u8> {
    mask.iter()
        .map(|&v| if v == IGNORE || known[v as usize] { v } else { BACKGROUND as u8 })
        .collect()
}

/// Confusion matrix of `model` on `val` under `mode`, over class ids
/// `0..num_ids`.
pub fn evaluate(
    model: &ModelState,
    previous: Option<&ModelState>,
    val: &[(Tensor, Vec<u8>)],
    mode: FusionMode,
    num_ids: usize,
) -> Result<ConfusionMatrix> {
    let mut known = [false; 256];
    for c in model.classes() {
        known[c] = true;
    }
    let mut cm = ConfusionMatrix::new(num_ids);
    for (img, mask) in val {
        let pred = predict(model, previous, img, mode)?;
        cm.update(&pred, &eval_labels(mask, &known))?;
    }
    Ok(cm)
}

/// Evaluation of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepEval {
    pub step: usize,
    /// `(class id, IoU)` for background and every class seen so far.
    pub per_class: Vec<(usize, Option<f64>)>,
    /// Previous foreground classes; undefined at step 1.
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

impl StepEval {
    fn from_cm(step: usize, cm: &ConfusionMatrix, cfg: &StepConfig) -> Self {
        let classes = cfg.classes();
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        Self {
            step,
            per_class: sorted.iter().map(|&c| (c, cm.iou(c))).collect(),
            old: cm.miou(&cfg.old_foreground()),
            new: cm.miou(cfg.new_classes()),
            all: cm.miou(&classes),
        }
    }

    /// Mean of the defined IoUs of `group`.
    pub fn group_miou(&self, group: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_class
            .iter()
            .filter(|(c, _)| group.contains(c))
            .filter_map(|&(_, v)| v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Old/new/all mIoU of a step model under one fusion mode after an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRow {
    pub step: usize,
    pub epoch: usize,
    pub mode: FusionMode,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

/// Epoch-averaged losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossReport,
}

/// Everything a finished step leaves behind.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub lineage: ModelLineage,
    pub eval: StepEval,
    pub losses: Vec<LossRow>,
    pub fusion: Vec<FusionRow>,
    /// Previous-model checksum before and after training (equal).
    pub frozen_checksum: Option<u64>,
}

/// Results of a whole run.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub steps: Vec<StepEval>,
    pub losses: Vec<LossRow>,
    pub fusion: Vec<FusionRow>,
    pub lineage: ModelLineage,
    /// Models after each step, oldest first.
    pub models: Vec<ModelState>,
}

impl ExperimentResult {
    pub fn last(&self) -> &StepEval {
        self.steps.last().expect("at least one step")
    }
}

fn val_tensors(val: &Dataset) -> Vec<(Tensor, Vec<u8>)> {
    val.samples
        .iter()
        .map(|s| (s.image.to_tensor(), s.mask.data.clone()))
        .collect()
}

/// Largest class id in `scenario` plus one.
fn id_space(scenario: &Scenario) -> usize {
    scenario.all_classes().into_iter().max().unwrap_or(0) + 1
}

/// Trains `lineage.current` on `examples` for `epochs`, returning per-epoch
/// losses and fusion-mode snapshots.
#[allow(clippy::too_many_arguments)]
fn fit(
    lineage: &mut ModelLineage,
    examples: &[Example],
    step_cfg: &StepConfig,
    variant: &Variant,
    cfg: &TrainConfig,
    epochs: usize,
    base_lr: f64,
    snapshot: Option<(&[(Tensor, Vec<u8>)], usize)>,
) -> Result<(Vec<LossRow>, Vec<FusionRow>)> {
    let step = lineage.step;
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_iters = per_epoch * epochs;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut fusion = Vec::new();
    let mut iter = 0;
    for epoch in 1..=epochs {
        let mut rng = Rng::stream(cfg.seed, ((step as u64) << 32) | epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.int_in(0, i));
        }
        let mut mean = LossReport::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let lr = poly_lr(base_lr, iter, total_iters, cfg.poly_power);
            let r = train_step(
                &mut lineage.current,
                lineage.previous.as_ref(),
                &batch,
                step_cfg,
                variant,
                cfg,
                &mut opt,
                lr,
            )?;
            log::trace!("{variant} step {step} iter {iter} lr {lr:.2e}: {r:?}");
            mean.accumulate(&r, chunk.len() as f64 / examples.len() as f64);
            iter += 1;
        }
        log::debug!(
            "{variant} step {step} epoch {epoch}: seg {:.4} ad {:.4} d {:.4} total {:.4}",
            mean.seg,
            mean.ad,
            mean.d,
            mean.total
        );
        losses.push(LossRow { step, epoch, loss: mean });
        if let Some((val, num_ids)) = snapshot {
            if cfg.snapshot_epochs.contains(&epoch) {
                for mode in FusionMode::EVAL_MODES {
                    let cm = evaluate(&lineage.current, lineage.previous.as_ref(), val, mode, num_ids)?;
                    fusion.push(FusionRow {
                        step,
                        epoch,
                        mode,
                        old: cm.miou(&step_cfg.old_foreground()),
                        new: cm.miou(step_cfg.new_classes()),
                        all: cm.miou(&step_cfg.classes()),
                    });
                }
            }
        }
    }
    Ok((losses, fusion))
}

fn step_examples(train: &Dataset, scenario: &Scenario, step: usize) -> Result<Vec<Example>> {
    filter_step(train, scenario, step)?
        .into_iter()
        .map(|i| {
            let s = &train.samples[i];
            Ok(Example {
                image: s.image.to_tensor(),
                labels: remap_labels(&s.mask, scenario, step)?,
            })
        })
        .collect()
}

/// Step 1 of an incremental run, shared by every non-joint variant with the
/// same `caf` setting.
pub fn train_first_step(
    scenario: &Scenario,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    caf: bool,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let step_cfg = scenario.step_config(1)?;
    let model = ModelState::new(cfg.model_config(caf), &step_cfg, 1, cfg.seed)?;
    let mut lineage = ModelLineage::first(model);
    let examples = step_examples(train, scenario, 1)?;
    log::info!("step 1: {} training images, classes {:?}", examples.len(), step_cfg.new_classes());
    let variant = Variant::plain("step1", caf);
    let (losses, _) = fit(&mut lineage, &examples, &step_cfg, &variant, cfg, cfg.epochs_first, cfg.lr_first, None)?;
    let vt = val_tensors(val);
    let cm = evaluate(&lineage.current, None, &vt, cfg.eval_mode, id_space(scenario))?;
    Ok(StepOutcome {
        eval: StepEval::from_cm(1, &cm, &step_cfg),
        lineage,
        losses,
        fusion: Vec::new(),
        frozen_checksum: None,
    })
}

/// Advances `prev` to the next step and trains it under `variant`.
pub fn train_next_step(
    prev: &StepOutcome,
    scenario: &Scenario,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    variant: &Variant,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if prev.lineage.current.meta.config.caf != variant.caf {
        return Err(Error::Config(format!(
            "variant `{variant}` and the previous model disagree on the CAF block"
        )));
    }
    let mut lineage = advance_step(prev.lineage.clone(), scenario, cfg.seed)?;
    let step = lineage.step;
    let step_cfg = scenario.step_config(step)?;
    let examples = step_examples(train, scenario, step)?;
    log::info!(
        "{variant} step {step}: {} training images, classes {:?}",
        examples.len(),
        step_cfg.new_classes()
    );
    let frozen = lineage.previous.as_ref().map(|p| p.params.checksum());
    let vt = val_tensors(val);
    let num_ids = id_space(scenario);
    let snapshot = (variant.caf && !cfg.snapshot_epochs.is_empty()).then_some((vt.as_slice(), num_ids));
    let (losses, fusion) = fit(
        &mut lineage,
        &examples,
        &step_cfg,
        variant,
        cfg,
        cfg.epochs_later,
        cfg.lr_later,
        snapshot,
    )?;
    let after = lineage.previous.as_ref().map(|p| p.params.checksum());
    if frozen != after {
        return Err(Error::Contract(format!(
            "previous model changed during step {step}: checksum {frozen:?} -> {after:?}"
        )));
    }
    let cm = evaluate(&lineage.current, lineage.previous.as_ref(), &vt, cfg.eval_mode, num_ids)?;
    Ok(StepOutcome {
        eval: StepEval::from_cm(step, &cm, &step_cfg),
        lineage,
        losses,
        fusion,
        frozen_checksum: frozen,
    })
}

/// Single training run over every class of `scenario`, evaluated with the
/// last step's old/new grouping.
pub fn train_joint(scenario: &Scenario, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<StepOutcome> {
    cfg.validate()?;
    let joint_cfg = scenario.joint_config()?;
    let last = scenario.num_steps();
    let model = ModelState::new(cfg.model_config(true), &joint_cfg, 1, cfg.seed)?;
    let mut lineage = ModelLineage::first(model);
    let examples: Vec<Example> = train
        .samples
        .iter()
        .filter(|s| s.mask.data.iter().any(|&v| v != BACKGROUND as u8 && v != IGNORE))
        .map(|s| Example {
            image: s.image.to_tensor(),
            labels: s.mask.data.clone(),
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::Protocol("no labelled images for the joint run".into()));
    }
    log::info!("joint: {} training images", examples.len());
    let variant = Variant::plain("joint", true);
    let (losses, _) = fit(&mut lineage, &examples, &joint_cfg, &variant, cfg, cfg.epochs_first, cfg.lr_first, None)?;
    let cm = evaluate(&lineage.current, None, &val_tensors(val), FusionMode::TestSkip, id_space(scenario))?;
    let report_cfg = scenario.step_config(last)?;
    Ok(StepOutcome {
        eval: StepEval::from_cm(last, &cm, &report_cfg),
        lineage,
        losses,
        fusion: Vec::new(),
        frozen_checksum: None,
    })
}

/// Continues an incremental run from an already trained step-1 outcome.
pub fn run_from_first(
    first: &StepOutcome,
    scenario: &Scenario,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    variant: &Variant,
) -> Result<ExperimentResult> {
    let mut steps = vec![first.eval.clone()];
    let mut losses = first.losses.clone();
    let mut fusion = Vec::new();
    let mut models = vec![first.lineage.current.clone()];
    let mut cur = first.clone();
    for _ in 1..scenario.num_steps() {
        cur = train_next_step(&cur, scenario, train, val, cfg, variant)?;
        steps.push(cur.eval.clone());
        losses.extend(cur.losses.iter().cloned());
        fusion.extend(cur.fusion.iter().cloned());
        models.push(cur.lineage.current.clone());
    }
    Ok(ExperimentResult {
        variant: variant.clone(),
        steps,
        losses,
        fusion,
        lineage: cur.lineage,
        models,
    })
}

/// Runs every step of `scenario` under `variant`.
pub fn run_experiment(
    scenario: &Scenario,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    variant: &Variant,
) -> Result<ExperimentResult> {
    if variant.joint {
        let out = train_joint(scenario, train, val, cfg)?;
        return Ok(ExperimentResult {
            variant: variant.clone(),
            steps: vec![out.eval],
            losses: out.losses,
            fusion: Vec::new(),
            models: vec![out.lineage.current.clone()],
            lineage: out.lineage,
        });
    }
    let first = train_first_step(scenario, train, val, cfg, variant.caf)?;
    run_from_first(&first, scenario, train, val, cfg, variant)
}
