//! Finite-difference verification of every differentiable op, module and
//! loss.
//!
//! Each case draws a small random problem (inputs in `[-1, 1]`) from a
//! seed, runs `backward`, and compares every parameter gradient with
//! [`finite_diff_grad`] using [`max_relative_error`].

use std::fmt;

use crate::attentive::{ad_channel, ad_combine, ad_spatial, loss_ad_split, SEWeights};
use crate::autodiff::{finite_diff_grad, max_relative_error, Graph, ParamStore, Var, FD_EPS};
use crate::background::{balanced_kd, gamma, hat_phi_var, kd_terms, seg_loss, total_loss, StepConfig, DEFAULT_GAMMA_MAX};
use crate::caf::{caf_forward, CafWeights, FusionMode, PreviousBranch};
use crate::error::Result;
use crate::init::Rng;
use crate::nonlocal::{nonlocal_forward, NonLocalWeights};
use crate::tensor::{self, Tensor};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-4;

type LossFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;

/// A random differentiable problem: parameters plus a scalar loss builder.
pub struct Problem {
    pub store: ParamStore,
    pub loss: LossFn,
}

/// A named family of problems.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    /// Only meaningful from step 2 on.
    pub distillation: bool,
    pub build: fn(&mut Rng) -> Result<Problem>,
}

impl fmt::Debug for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradCase").field("name", &self.name).finish()
    }
}

/// Outcome of one case over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    /// Worst error over seeds; `None` when skipped.
    pub max_rel_err: Option<f64>,
    pub passed: bool,
}

/// Worst relative error of `problem`. `corrupt` scales the analytic
/// gradients before the comparison (a test fixture for the checker itself).
pub fn check_problem(problem: &mut Problem, corrupt: Option<f64>) -> Result<f64> {
    let store = &mut problem.store;
    store.zero_grad();
    let mut g = Graph::new();
    let root = (problem.loss)(&mut g, store)?;
    g.backward(root, store)?;
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let mut analytic = store.grad(id).clone();
        if let Some(f) = corrupt {
            analytic = analytic.map(|a| a * f);
        }
        let loss = &problem.loss;
        let numeric = finite_diff_grad(
            |s| {
                let mut g = Graph::new();
                let v = loss(&mut g, s)?;
                Ok(g.value(v).item())
            },
            store,
            id,
            FD_EPS,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.tensor_uniform(shape, -1.0, 1.0)
}

/// Stores `x` as parameter `x` and returns a loss builder that contracts
/// `op(x)` with a fixed random tensor of the output shape.
fn unary(rng: &mut Rng, x: Tensor, op: fn(&mut Graph, Var) -> Result<Var>) -> Result<Problem> {
    let mut store = ParamStore::new();
    let id = store.insert("x", x)?;
    let out_shape = {
        let mut g = Graph::new();
        let xv = g.param(&store, id);
        let y = op(&mut g, xv)?;
        g.shape(y).to_vec()
    };
    let r = uniform(rng, &out_shape);
    Ok(Problem {
        store,
        loss: Box::new(move |g, s| {
            let xv = g.param(s, id);
            let y = op(g, xv)?;
            let rv = g.input(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        }),
    })
}

/// Two parameters `a`, `b` combined by `op`, contracted with a random tensor.
fn binary(
    rng: &mut Rng,
    a: Tensor,
    b: Tensor,
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Problem> {
    let mut store = ParamStore::new();
    let ia = store.insert("a", a)?;
    let ib = store.insert("b", b)?;
    let out_shape = {
        let mut g = Graph::new();
        let (va, vb) = (g.param(&store, ia), g.param(&store, ib));
        let y = op(&mut g, va, vb)?;
        g.shape(y).to_vec()
    };
    let r = uniform(rng, &out_shape);
    Ok(Problem {
        store,
        loss: Box::new(move |g, s| {
            let (va, vb) = (g.param(s, ia), g.param(s, ib));
            let y = op(g, va, vb)?;
            let rv = g.input(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        }),
    })
}

/// Conv-like op with input `x` and weights `w`, `b` all trainable.
fn conv_case(rng: &mut Rng, w_shape: &[usize], op: fn(&mut Graph, Var, Var, Var) -> Result<Var>) -> Result<Problem> {
    let (co, ci) = (w_shape[0], w_shape[1]);
    let mut store = ParamStore::new();
    let ix = store.insert("x", uniform(rng, &[ci, 4, 3]))?;
    let iw = store.insert("w", uniform(rng, w_shape))?;
    let ib = store.insert("b", uniform(rng, &[co]))?;
    let r = uniform(rng, &[co, 4, 3]);
    Ok(Problem {
        store,
        loss: Box::new(move |g, s| {
            let (x, w, b) = (g.param(s, ix), g.param(s, iw), g.param(s, ib));
            let y = op(g, x, w, b)?;
            let rv = g.input(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        }),
    })
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.tensor_uniform(shape, 0.2, 1.0)
}

/// Step-2 class configuration used by the loss cases: old `{0,1,2}`, new
/// `{3,4}`.
fn loss_cfg() -> Result<StepConfig> {
    StepConfig::new(vec![0, 1, 2], vec![3, 4])
}

fn old_probs(rng: &mut Rng, h: usize, w: usize) -> Result<Tensor> {
    tensor::softmax(&rng.tensor_uniform(&[3, h, w], -2.0, 2.0), 0)
}

fn op_cases() -> Vec<GradCase> {
    fn c(name: &'static str, build: fn(&mut Rng) -> Result<Problem>) -> GradCase {
        GradCase {
            name,
            distillation: false,
            build,
        }
    }
    vec![
        c("add", |r| {
            let (a, b) = (uniform(r, &[2, 3, 3]), uniform(r, &[2, 3, 3]));
            binary(r, a, b, |g, a, b| g.add(a, b))
        }),
        c("sub", |r| {
            let (a, b) = (uniform(r, &[2, 3, 3]), uniform(r, &[2, 3, 3]));
            binary(r, a, b, |g, a, b| g.sub(a, b))
        }),
        c("mul", |r| {
            let (a, b) = (uniform(r, &[2, 3, 3]), uniform(r, &[2, 3, 3]));
            binary(r, a, b, |g, a, b| g.mul(a, b))
        }),
        c("scale", |r| {
            let x = uniform(r, &[2, 3]);
            unary(r, x, |g, x| Ok(g.scale(x, -1.7)))
        }),
        c("add_scalar", |r| {
            let x = uniform(r, &[2, 3]);
            unary(r, x, |g, x| {
                let y = g.add_scalar(x, 0.3);
                Ok(g.square(y))
            })
        }),
        c("relu", |r| {
            let x = uniform(r, &[2, 3, 3]);
            unary(r, x, |g, x| Ok(g.relu(x)))
        }),
        c("sigmoid", |r| {
            let x = uniform(r, &[2, 3, 3]);
            unary(r, x, |g, x| Ok(g.sigmoid(x)))
        }),
        c("square", |r| {
            let x = uniform(r, &[2, 3, 3]);
            unary(r, x, |g, x| Ok(g.square(x)))
        }),
        c("log_clamped", |r| {
            let x = positive(r, &[2, 3, 3]);
            unary(r, x, |g, x| Ok(g.log_clamped(x, 1e-12)))
        }),
        c("sum", |r| {
            let x = uniform(r, &[2, 3, 3]);
            unary(r, x, |g, x| {
                let s = g.sum(x);
                Ok(g.square(s))
            })
        }),
        c("mean", |r| {
            let x = uniform(r, &[2, 3, 3]);
            unary(r, x, |g, x| {
                let s = g.mean(x);
                Ok(g.square(s))
            })
        }),
        c("reshape", |r| {
            let x = uniform(r, &[2, 3, 2]);
            unary(r, x, |g, x| g.reshape(x, &[3, 4]))
        }),
        c("transpose", |r| {
            let x = uniform(r, &[3, 4]);
            unary(r, x, |g, x| g.transpose(x))
        }),
        c("matmul", |r| {
            let (a, b) = (uniform(r, &[3, 4]), uniform(r, &[4, 2]));
            binary(r, a, b, |g, a, b| g.matmul(a, b))
        }),
        c("conv1x1", |r| conv_case(r, &[3, 2], |g, x, w, b| g.conv1x1(x, w, b))),
        c("conv3x3", |r| conv_case(r, &[3, 2, 3, 3], |g, x, w, b| g.conv3x3(x, w, b))),
        c("softmax_axis0", |r| {
            let x = uniform(r, &[3, 2, 2]);
            unary(r, x, |g, x| g.softmax(x, 0))
        }),
        c("softmax_axis1", |r| {
            let x = uniform(r, &[3, 4]);
            unary(r, x, |g, x| g.softmax(x, 1))
        }),
        c("global_avg_pool", |r| {
            let x = uniform(r, &[3, 3, 2]);
            unary(r, x, |g, x| g.global_avg_pool(x))
        }),
        c("channel_avg", |r| {
            let x = uniform(r, &[3, 3, 2]);
            unary(r, x, |g, x| g.channel_avg(x))
        }),
        c("outer", |r| {
            let (a, b) = (uniform(r, &[3]), uniform(r, &[2, 3]));
            binary(r, a, b, |g, a, b| g.outer(a, b))
        }),
        c("concat_channels", |r| {
            let (a, b) = (uniform(r, &[2, 2, 3]), uniform(r, &[1, 2, 3]));
            binary(r, a, b, |g, a, b| g.concat_channels(a, b))
        }),
        c("avg_pool2", |r| {
            let x = uniform(r, &[2, 4, 6]);
            unary(r, x, |g, x| g.avg_pool2(x))
        }),
        c("upsample_bilinear", |r| {
            let x = uniform(r, &[2, 2, 3]);
            unary(r, x, |g, x| g.upsample_bilinear(x, 5, 7))
        }),
        c("frob_normalize", |r| {
            let x = uniform(r, &[3, 3]);
            unary(r, x, |g, x| Ok(g.frob_normalize(x)))
        }),
        c("channel_group_sum", |r| {
            let x = uniform(r, &[4, 2, 2]);
            unary(r, x, |g, x| g.channel_group_sum(x, vec![vec![0, 2], vec![1], vec![3, 1]]))
        }),
        c("nll_at_labels", |r| {
            let x = uniform(r, &[3, 2, 2]);
            unary(r, x, |g, x| {
                let y = g.square(x);
                g.nll_at_labels(y, vec![Some(0), None, Some(2), Some(1)])
            })
        }),
    ]
}

fn module_cases() -> Vec<GradCase> {
    fn c(name: &'static str, build: fn(&mut Rng) -> Result<Problem>) -> GradCase {
        GradCase {
            name,
            distillation: false,
            build,
        }
    }
    fn caf_case(rng: &mut Rng, mode: FusionMode) -> Result<Problem> {
        let ch = 4;
        let mut store = ParamStore::new();
        NonLocalWeights::register(&mut store, "nl", ch, rng)?;
        CafWeights::register(&mut store, "caf", ch, rng)?;
        // full-range attention weights instead of the small training init,
        // so the attention gradients are not tiny
        for name in ["caf.sp.w", "caf.sp.b", "caf.ch.w", "caf.ch.b"] {
            let id = store.require(name)?;
            store.set_value(id, uniform(rng, store.value(id).shape()));
        }
        let iz = store.insert("z", uniform(rng, &[ch, 3, 3]))?;
        let mut old = ParamStore::new();
        NonLocalWeights::register(&mut old, "nl", ch, rng)?;
        let z_old = uniform(rng, &[ch, 3, 3]);
        let r = uniform(rng, &[ch, 3, 3]);
        Ok(Problem {
            store,
            loss: Box::new(move |g, s| {
                let nl = NonLocalWeights::bind(g, s, "nl", true)?;
                let w = CafWeights::bind(g, s, "caf", true)?;
                let onl = NonLocalWeights::bind(g, &old, "nl", false)?;
                let zo = g.input(z_old.clone());
                let prev = mode.needs_previous().then_some(PreviousBranch { z: zo, nonlocal: &onl });
                let z = g.param(s, iz);
                let (zb, _) = caf_forward(g, z, prev, &nl, &w, mode)?;
                let rv = g.input(r.clone());
                let p = g.mul(zb, rv)?;
                Ok(g.sum(p))
            }),
        })
    }
    fn se_case(rng: &mut Rng, which: u8) -> Result<Problem> {
        let ch = 4;
        let mut store = ParamStore::new();
        SEWeights::register(&mut store, "se", ch, rng)?;
        let im = store.insert("m", uniform(rng, &[ch, 3, 3]))?;
        let shape: Vec<usize> = match which {
            0 => vec![ch],
            1 => vec![3, 3],
            _ => vec![ch, 3, 3],
        };
        let r = uniform(rng, &shape);
        Ok(Problem {
            store,
            loss: Box::new(move |g, s| {
                let se = SEWeights::bind(g, s, "se", true)?;
                let m = g.param(s, im);
                let y = match which {
                    0 => ad_channel(g, m, &se)?,
                    1 => ad_spatial(g, m)?,
                    _ => ad_combine(g, m, &se)?,
                };
                let rv = g.input(r.clone());
                let p = g.mul(y, rv)?;
                Ok(g.sum(p))
            }),
        })
    }
    vec![
        c("nonlocal", |r| {
            let ch = 4;
            let mut store = ParamStore::new();
            NonLocalWeights::register(&mut store, "nl", ch, r)?;
            let iz = store.insert("z", uniform(r, &[ch, 3, 2]))?;
            let rt = uniform(r, &[ch, 3, 2]);
            Ok(Problem {
                store,
                loss: Box::new(move |g, s| {
                    let nl = NonLocalWeights::bind(g, s, "nl", true)?;
                    let z = g.param(s, iz);
                    let v = nonlocal_forward(g, z, &nl)?;
                    let rv = g.input(rt.clone());
                    let p = g.mul(v, rv)?;
                    Ok(g.sum(p))
                }),
            })
        }),
        c("caf_train_fuse", |r| caf_case(r, FusionMode::TrainFuse)),
        c("caf_test_skip", |r| caf_case(r, FusionMode::TestSkip)),
        c("caf_test_zero_pad", |r| caf_case(r, FusionMode::TestZeroPad)),
        c("caf_test_concat", |r| caf_case(r, FusionMode::TestConcat)),
        c("ad_channel", |r| se_case(r, 0)),
        c("ad_spatial", |r| se_case(r, 1)),
        c("ad_combine", |r| se_case(r, 2)),
    ]
}

fn loss_cases() -> Vec<GradCase> {
    fn seg(rng: &mut Rng) -> Result<Problem> {
        let cfg = loss_cfg()?;
        let mut store = ParamStore::new();
        let il = store.insert("logits", uniform(rng, &[5, 3, 3]))?;
        let labels: Vec<u8> = (0..9).map(|i| [0u8, 3, 4, 0, 255, 0, 3, 0, 4][i]).collect();
        Ok(Problem {
            store,
            loss: Box::new(move |g, s| {
                let l = g.param(s, il);
                seg_loss(g, l, &labels, &cfg)
            }),
        })
    }
    fn distill(rng: &mut Rng, kind: u8) -> Result<Problem> {
        let cfg = loss_cfg()?;
        let mut store = ParamStore::new();
        let il = store.insert("logits", uniform(rng, &[5, 3, 3]))?;
        let old = old_probs(rng, 3, 3)?;
        let gm = gamma(&old, &cfg, DEFAULT_GAMMA_MAX)?.value;
        Ok(Problem {
            store,
            loss: Box::new(move |g, s| {
                let l = g.param(s, il);
                let p = g.softmax(l, 0)?;
                let hat = hat_phi_var(g, p, &cfg)?;
                let o = g.input(old.clone());
                match kind {
                    0 => {
                        let (b, n) = kd_terms(g, hat, o, &cfg)?;
                        g.add(b, n)
                    }
                    _ => balanced_kd(g, hat, o, &cfg, gm),
                }
            }),
        })
    }
    fn ad(rng: &mut Rng) -> Result<Problem> {
        let ch = 4;
        let mut store = ParamStore::new();
        SEWeights::register(&mut store, "se_z", ch, rng)?;
        SEWeights::register(&mut store, "se_h", ch, rng)?;
        let iz = store.insert("z_new", uniform(rng, &[ch, 2, 2]))?;
        let ih = store.insert("h_new", uniform(rng, &[ch, 2, 2]))?;
        let z_old = uniform(rng, &[ch, 2, 2]);
        let h_old = uniform(rng, &[ch, 2, 2]);
        let snapshot = store.clone();
        Ok(Problem {
            store,
            loss: Box::new(move |g, s| {
                let se_z = SEWeights::bind(g, s, "se_z", true)?;
                let se_h = SEWeights::bind(g, s, "se_h", true)?;
                let old_z = SEWeights::bind(g, &snapshot, "se_z", false)?;
                let old_h = SEWeights::bind(g, &snapshot, "se_h", false)?;
                let (z, h) = (g.param(s, iz), g.param(s, ih));
                let (zo, ho) = (g.input(z_old.clone()), g.input(h_old.clone()));
                loss_ad_split(g, [z, zo, h, ho], [&se_z, &se_h], [&old_z, &old_h])
            }),
        })
    }
    /// Weighted sum of all three terms with the default weights; the
    /// classifier logits, both current-model feature maps and the SE
    /// weights are the parameters.
    fn total(rng: &mut Rng) -> Result<Problem> {
        let cfg = loss_cfg()?;
        let ch = 4;
        let mut store = ParamStore::new();
        SEWeights::register(&mut store, "se_z", ch, rng)?;
        SEWeights::register(&mut store, "se_h", ch, rng)?;
        let il = store.insert("logits", uniform(rng, &[5, 3, 3]))?;
        // current features near the previous ones, as in training, so the
        // heavily weighted feature term stays O(1)
        let z_old = uniform(rng, &[ch, 2, 2]);
        let h_old = uniform(rng, &[ch, 2, 2]);
        let near = |rng: &mut Rng, t: &Tensor| t.zip_map(&uniform(rng, &[ch, 2, 2]), "near", |a, b| a + 0.05 * b);
        let iz = store.insert("z_new", near(rng, &z_old)?)?;
        let ih = store.insert("h_new", near(rng, &h_old)?)?;
        let old = old_probs(rng, 3, 3)?;
        let gm = gamma(&old, &cfg, DEFAULT_GAMMA_MAX)?.value;
        let labels = vec![0u8, 3, 4, 0, 255, 0, 3, 0, 4];
        let snapshot = store.clone();
        Ok(Problem {
            store,
            loss: Box::new(move |g, s| {
                let l = g.param(s, il);
                let seg = seg_loss(g, l, &labels, &cfg)?;
                let se_z = SEWeights::bind(g, s, "se_z", true)?;
                let se_h = SEWeights::bind(g, s, "se_h", true)?;
                let old_z = SEWeights::bind(g, &snapshot, "se_z", false)?;
                let old_h = SEWeights::bind(g, &snapshot, "se_h", false)?;
                let (z, h) = (g.param(s, iz), g.param(s, ih));
                let (zo, ho) = (g.input(z_old.clone()), g.input(h_old.clone()));
                let ad = loss_ad_split(g, [z, zo, h, ho], [&se_z, &se_h], [&old_z, &old_h])?;
                let p = g.softmax(l, 0)?;
                let hat = hat_phi_var(g, p, &cfg)?;
                let o = g.input(old.clone());
                let d = balanced_kd(g, hat, o, &cfg, gm)?;
                total_loss(g, seg, Some(ad), Some(d), Default::default())
            }),
        })
    }
    vec![
        GradCase {
            name: "loss_seg",
            distillation: false,
            build: seg,
        },
        GradCase {
            name: "loss_ad",
            distillation: true,
            build: ad,
        },
        GradCase {
            name: "loss_ud",
            distillation: true,
            build: |r| distill(r, 0),
        },
        GradCase {
            name: "loss_d",
            distillation: true,
            build: |r| distill(r, 1),
        },
        GradCase {
            name: "loss_total",
            distillation: true,
            build: total,
        },
    ]
}

/// Every case: elementary ops, modules, then composite losses.
pub fn all_cases() -> Vec<GradCase> {
    let mut v = op_cases();
    v.extend(module_cases());
    v.extend(loss_cases());
    v
}

/// Options of a suite run.
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    /// Incremental step; at step 1 distillation cases are skipped.
    pub step: usize,
    /// Case whose analytic gradient is scaled by `1.01` before the check.
    pub corrupt: Option<String>,
    pub tolerance: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            step: 2,
            corrupt: None,
            tolerance: GRAD_TOL,
        }
    }
}

pub fn run_case(case: &GradCase, opts: &SuiteOptions) -> Result<CaseResult> {
    if case.distillation && opts.step < 2 {
        return Ok(CaseResult {
            name: case.name.to_string(),
            max_rel_err: None,
            passed: true,
        });
    }
    let corrupt = (opts.corrupt.as_deref() == Some(case.name)).then_some(1.01);
    let mut worst: f64 = 0.0;
    for &seed in &opts.seeds {
        let mut rng = Rng::stream(seed, 0x6ead);
        let mut problem = (case.build)(&mut rng)?;
        let err = check_problem(&mut problem, corrupt)?;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(CaseResult {
        name: case.name.to_string(),
        max_rel_err: Some(worst),
        passed: worst <= opts.tolerance,
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    all_cases().iter().map(|c| run_case(c, opts)).collect()
}

/// Fixed-width table, one case per line.
pub fn format_table(results: &[CaseResult]) -> String {
    let mut s = format!("{:<22} {:>12}  status\n", "case", "max_rel_err");
    for r in results {
        let (err, status) = match r.max_rel_err {
            None => ("-".to_string(), "skip"),
            Some(e) => (format!("{e:.3e}"), if r.passed { "ok" } else { "FAIL" }),
        };
        s.push_str(&format!("{:<22} {:>12}  {}\n", r.name, err, status));
    }
    s
}
