//! Naive-loop reference implementations and the check suites shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use cafseg::attentive::{ad_channel, ad_combine, ad_spatial, loss_ad, SEWeights};
use cafseg::autodiff::{Graph, ParamStore};
use cafseg::background::{balanced_kd, gamma, hat_phi, tilde_phi, StepConfig};
use cafseg::caf::{caf_forward, CafWeights, FusionMode, PreviousBranch};
use cafseg::init::Rng;
use cafseg::nonlocal::{nonlocal_with_attention, NonLocalWeights};
use cafseg::tensor::{self, Tensor};

pub const ORACLE_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Nested-vector references
// ---------------------------------------------------------------------------

/// `[c][y][x]`
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor) -> Map {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    (0..c)
        .map(|k| (0..h).map(|y| (0..w).map(|x| t.data()[(k * h + y) * w + x]).collect()).collect())
        .collect()
}

pub fn flat(m: &Map) -> Vec<f64> {
    m.iter().flatten().flatten().copied().collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn naive_conv1x1(input: &Map, w: &Tensor, b: &Tensor) -> Map {
    let c_in = input.len();
    let c_out = b.numel();
    let (h, wd) = (input[0].len(), input[0][0].len());
    let mut out = vec![vec![vec![0.0; wd]; h]; c_out];
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b.data()[o];
                for i in 0..c_in {
                    acc += w.data()[o * c_in + i] * input[i][y][x];
                }
                out[o][y][x] = acc;
            }
        }
    }
    out
}

pub fn naive_conv3x3(input: &Map, w: &Tensor, b: &Tensor) -> Map {
    let c_in = input.len();
    let c_out = b.numel();
    let (h, wd) = (input[0].len() as isize, input[0][0].len() as isize);
    let mut out = vec![vec![vec![0.0; wd as usize]; h as usize]; c_out];
    for o in 0..c_out {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b.data()[o];
                for i in 0..c_in {
                    for dy in 0..3isize {
                        for dx in 0..3isize {
                            let (yy, xx) = (y + dy - 1, x + dx - 1);
                            if yy < 0 || yy >= h || xx < 0 || xx >= wd {
                                continue;
                            }
                            let wi = ((o * c_in + i) * 3 + dy as usize) * 3 + dx as usize;
                            acc += w.data()[wi] * input[i][yy as usize][xx as usize];
                        }
                    }
                }
                out[o][y as usize][x as usize] = acc;
            }
        }
    }
    out
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// Non-local block: `v[:,p] = sum_q softmax_q(theta_p . phi_q) g[:,q]`.
/// Returns `(v, attention)`.
pub fn naive_nonlocal(z: &Map, store: &ParamStore, prefix: &str) -> (Map, Vec<Vec<f64>>) {
    let get = |n: &str| store.value(store.require(&format!("{prefix}.{n}")).unwrap()).clone();
    let theta = naive_conv1x1(z, &get("theta.w"), &get("theta.b"));
    let ce = theta.len();
    let phi = naive_conv1x1(z, &get("phi.w"), &Tensor::zeros(&[ce]));
    let gz = naive_conv1x1(z, &get("g.w"), &get("g.b"));
    let (c, h, w) = (z.len(), z[0].len(), z[0][0].len());
    let p = h * w;
    let at = |m: &Map, k: usize, q: usize| m[k][q / w][q % w];
    let mut attn = vec![vec![0.0; p]; p];
    for i in 0..p {
        let logits: Vec<f64> = (0..p).map(|j| (0..ce).map(|k| at(&theta, k, i) * at(&phi, k, j)).sum()).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..p {
            attn[i][j] = e[j] / s;
        }
    }
    let mut v = vec![vec![vec![0.0; w]; h]; c];
    for k in 0..c {
        for i in 0..p {
            v[k][i / w][i % w] = (0..p).map(|j| attn[i][j] * at(&gz, k, j)).sum();
        }
    }
    (v, attn)
}

pub struct SeValues {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SeValues {
    pub fn read(store: &ParamStore, prefix: &str) -> Self {
        let get = |n: &str| store.value(store.require(&format!("{prefix}.{n}")).unwrap()).clone();
        Self {
            w1: get("fc1.w"),
            b1: get("fc1.b"),
            w2: get("fc2.w"),
            b2: get("fc2.b"),
        }
    }
}

pub fn naive_ad_channel(m: &Map, se: &SeValues) -> Vec<f64> {
    let c = m.len();
    let (h, w) = (m[0].len(), m[0][0].len());
    let pooled: Vec<f64> = m
        .iter()
        .map(|ch| ch.iter().flatten().sum::<f64>() / (h * w) as f64)
        .collect();
    let cr = se.b1.numel();
    let hidden: Vec<f64> = (0..cr)
        .map(|r| {
            let a = se.b1.data()[r] + (0..c).map(|k| se.w1.data()[r * c + k] * pooled[k]).sum::<f64>();
            a.max(0.0)
        })
        .collect();
    (0..c)
        .map(|k| sigmoid(se.b2.data()[k] + (0..cr).map(|r| se.w2.data()[k * cr + r] * hidden[r]).sum::<f64>()))
        .collect()
}

pub fn naive_ad_spatial(m: &Map) -> Vec<Vec<f64>> {
    let (h, w) = (m[0].len(), m[0][0].len());
    let mut s = vec![vec![0.0; w]; h];
    for ch in m {
        for y in 0..h {
            for x in 0..w {
                s[y][x] += ch[y][x] * ch[y][x];
            }
        }
    }
    let norm = s.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return vec![vec![0.0; w]; h];
    }
    s.iter().map(|r| r.iter().map(|v| v / norm).collect()).collect()
}

pub fn naive_ad_combine(m: &Map, se: &SeValues) -> Map {
    let ch = naive_ad_channel(m, se);
    let sp = naive_ad_spatial(m);
    m.iter()
        .enumerate()
        .map(|(k, plane)| {
            plane
                .iter()
                .enumerate()
                .map(|(y, r)| r.iter().enumerate().map(|(x, v)| (ch[k] * sp[y][x] + 1.0) * v).collect())
                .collect()
        })
        .collect()
}

fn mean_sq_diff(a: &Map, b: &Map) -> f64 {
    let (fa, fb) = (flat(a), flat(b));
    fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / fa.len() as f64
}

pub fn naive_loss_ad(z_new: &Map, z_old: &Map, h_new: &Map, h_old: &Map, se_z: &SeValues, se_h: &SeValues) -> f64 {
    mean_sq_diff(&naive_ad_combine(z_new, se_z), &naive_ad_combine(z_old, se_z))
        + mean_sq_diff(&naive_ad_combine(h_new, se_h), &naive_ad_combine(h_old, se_h))
}

/// Class-id bookkeeping shared by the probability oracles: channel order is
/// previous classes then new ones.
pub struct Classes {
    pub old: Vec<usize>,
    pub new: Vec<usize>,
}

impl Classes {
    fn bg_pos(&self) -> usize {
        self.old.iter().position(|&c| c == 0).unwrap()
    }
}

/// `[bg-or-previous, new_1, .., new_n]`.
pub fn naive_tilde(p: &Map, cls: &Classes) -> Map {
    let n_old = cls.old.len();
    let mut out = vec![p[0].iter().map(|r| r.iter().map(|_| 0.0).collect()).collect::<Vec<Vec<f64>>>()];
    for plane in p.iter().take(n_old) {
        for (y, r) in plane.iter().enumerate() {
            for (x, v) in r.iter().enumerate() {
                out[0][y][x] += v;
            }
        }
    }
    for j in 0..cls.new.len() {
        out.push(p[n_old + j].clone());
    }
    out
}

/// Previous classes, with every new class folded into the background.
pub fn naive_hat(p: &Map, cls: &Classes) -> Map {
    let n_old = cls.old.len();
    let bg = cls.bg_pos();
    let mut out: Map = p[..n_old].to_vec();
    for plane in &p[n_old..] {
        for (y, r) in plane.iter().enumerate() {
            for (x, v) in r.iter().enumerate() {
                out[bg][y][x] += v;
            }
        }
    }
    out
}

pub fn naive_softmax_channels(logits: &Map) -> Map {
    let (k, h, w) = (logits.len(), logits[0].len(), logits[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; k];
    for y in 0..h {
        for x in 0..w {
            let mx = (0..k).map(|c| logits[c][y][x]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..k).map(|c| (logits[c][y][x] - mx).exp()).sum();
            for c in 0..k {
                out[c][y][x] = (logits[c][y][x] - mx).exp() / s;
            }
        }
    }
    out
}

pub fn naive_gamma(p_old: &Map, cls: &Classes) -> f64 {
    let pooled: Vec<f64> = p_old
        .iter()
        .map(|pl| pl.iter().flatten().sum::<f64>() / pl.iter().flatten().count() as f64)
        .collect();
    let mx = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = pooled.iter().map(|v| (v - mx).exp()).collect();
    let bg = cls.bg_pos();
    e.iter().enumerate().filter(|&(k, _)| k != bg).map(|(_, v)| v).sum::<f64>() / e[bg]
}

/// `gamma * L_B + L_N` with `L = -(1/HW) sum old * ln(new_hat)`.
pub fn naive_kd(p_new_hat: &Map, p_old: &Map, cls: &Classes, gamma: f64) -> f64 {
    let bg = cls.bg_pos();
    let (h, w) = (p_old[0].len(), p_old[0][0].len());
    let (mut lb, mut ln) = (0.0, 0.0);
    for k in 0..p_old.len() {
        for y in 0..h {
            for x in 0..w {
                let t = p_old[k][y][x] * p_new_hat[k][y][x].max(1e-12).ln();
                if k == bg {
                    lb += t;
                } else {
                    ln += t;
                }
            }
        }
    }
    let beta = -1.0 / (h * w) as f64;
    gamma * beta * lb + beta * ln
}

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(c, h, w)` with every dimension in `1..=8`.
fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.int_in(1, 8), rng.int_in(1, 8), rng.int_in(1, 8))
}

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.tensor_uniform(shape, -1.0, 1.0)
}

fn oracle_conv(rng: &mut Rng) -> f64 {
    let (c, h, w) = dims(rng);
    let co = rng.int_in(1, 8);
    let x = uniform(rng, &[c, h, w]);
    let w1 = uniform(rng, &[co, c]);
    let w3 = uniform(rng, &[co, c, 3, 3]);
    let b = uniform(rng, &[co]);
    let m = to_map(&x);
    let e1 = max_abs_diff(tensor::conv1x1(&x, &w1, &b).unwrap().data(), &flat(&naive_conv1x1(&m, &w1, &b)));
    let e3 = max_abs_diff(tensor::conv3x3(&x, &w3, &b).unwrap().data(), &flat(&naive_conv3x3(&m, &w3, &b)));
    e1.max(e3)
}

fn oracle_matmul(rng: &mut Rng) -> f64 {
    let (n, k, m) = dims(rng);
    let a = uniform(rng, &[n, k]);
    let b = uniform(rng, &[k, m]);
    let got = tensor::matmul(&a, &b).unwrap();
    let want: Vec<f64> = naive_matmul(&rows(&a), &rows(&b)).into_iter().flatten().collect();
    max_abs_diff(got.data(), &want)
}

fn randomize(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, rng.tensor_uniform(&shape, -1.0, 1.0));
    }
}

fn oracle_nonlocal(rng: &mut Rng) -> f64 {
    let (c, h, w) = dims(rng);
    let mut store = ParamStore::new();
    NonLocalWeights::register(&mut store, "nl", c, rng).unwrap();
    randomize(&mut store, rng);
    let z = uniform(rng, &[c, h, w]);
    let mut g = Graph::new();
    let nl = NonLocalWeights::bind(&mut g, &store, "nl", false).unwrap();
    let zv = g.input(z.clone());
    let (v, a) = nonlocal_with_attention(&mut g, zv, &nl).unwrap();
    let (nv, na) = naive_nonlocal(&to_map(&z), &store, "nl");
    let ea = max_abs_diff(g.value(a).data(), &na.into_iter().flatten().collect::<Vec<_>>());
    ea.max(max_abs_diff(g.value(v).data(), &flat(&nv)))
}

fn oracle_ad(rng: &mut Rng) -> f64 {
    let (c, h, w) = dims(rng);
    let (ch, hh, hw) = dims(rng);
    let mut store = ParamStore::new();
    SEWeights::register(&mut store, "se_z", c, rng).unwrap();
    SEWeights::register(&mut store, "se_h", ch, rng).unwrap();
    randomize(&mut store, rng);
    let tensors: Vec<Tensor> = [[c, h, w], [c, h, w], [ch, hh, hw], [ch, hh, hw]]
        .iter()
        .map(|s| uniform(rng, s))
        .collect();
    let mut g = Graph::new();
    let sz = SEWeights::bind(&mut g, &store, "se_z", true).unwrap();
    let sh = SEWeights::bind(&mut g, &store, "se_h", true).unwrap();
    let vars: Vec<_> = tensors.iter().map(|t| g.input(t.clone())).collect();
    let a_ch = ad_channel(&mut g, vars[0], &sz).unwrap();
    let a_sp = ad_spatial(&mut g, vars[0]).unwrap();
    let comb = ad_combine(&mut g, vars[0], &sz).unwrap();
    let loss = loss_ad(&mut g, vars[0], vars[1], vars[2], vars[3], &sz, &sh).unwrap();
    let (vz, vh) = (SeValues::read(&store, "se_z"), SeValues::read(&store, "se_h"));
    let maps: Vec<Map> = tensors.iter().map(to_map).collect();
    let errs = [
        max_abs_diff(g.value(a_ch).data(), &naive_ad_channel(&maps[0], &vz)),
        max_abs_diff(
            g.value(a_sp).data(),
            &naive_ad_spatial(&maps[0]).into_iter().flatten().collect::<Vec<_>>(),
        ),
        max_abs_diff(g.value(comb).data(), &flat(&naive_ad_combine(&maps[0], &vz))),
        (g.value(loss).item() - naive_loss_ad(&maps[0], &maps[1], &maps[2], &maps[3], &vz, &vh)).abs(),
    ];
    errs.into_iter().fold(0.0, f64::max)
}

/// Random previous/new split over `1..=n` with background first.
pub fn random_classes(rng: &mut Rng) -> Classes {
    let n_old = rng.int_in(0, 4);
    let n_new = rng.int_in(1, 3);
    let mut old = vec![0];
    old.extend(1..=n_old);
    let new = (n_old + 1..=n_old + n_new).collect();
    Classes { old, new }
}

fn step_cfg(cls: &Classes) -> StepConfig {
    StepConfig::new(cls.old.clone(), cls.new.clone()).unwrap()
}

fn oracle_tilde_hat(rng: &mut Rng) -> f64 {
    let cls = random_classes(rng);
    let cfg = step_cfg(&cls);
    let (_, h, w) = dims(rng);
    let p = rng.tensor_uniform(&[cfg.num_classes(), h, w], 0.0, 1.0);
    let m = to_map(&p);
    let et = max_abs_diff(tilde_phi(&p, &cfg).unwrap().data(), &flat(&naive_tilde(&m, &cls)));
    let eh = max_abs_diff(hat_phi(&p, &cfg).unwrap().data(), &flat(&naive_hat(&m, &cls)));
    et.max(eh)
}

fn oracle_gamma(rng: &mut Rng) -> f64 {
    let cls = random_classes(rng);
    let cfg = step_cfg(&cls);
    let (_, h, w) = dims(rng);
    let logits = rng.tensor_uniform(&[cls.old.len(), h, w], -3.0, 3.0);
    let p_old = tensor::softmax(&logits, 0).unwrap();
    let got = gamma(&p_old, &cfg, 1e4).unwrap();
    assert!(!got.degenerate);
    (got.value - naive_gamma(&to_map(&p_old), &cls)).abs()
}

fn oracle_kd(rng: &mut Rng) -> f64 {
    let cls = random_classes(rng);
    let cfg = step_cfg(&cls);
    let (_, h, w) = dims(rng);
    let new_logits = rng.tensor_uniform(&[cfg.num_classes(), h, w], -3.0, 3.0);
    let old_logits = rng.tensor_uniform(&[cls.old.len(), h, w], -3.0, 3.0);
    let gm = rng.uniform_in(0.0, 5.0);
    let mut g = Graph::new();
    let nl = g.input(new_logits.clone());
    let probs = g.softmax(nl, 0).unwrap();
    let hat = cafseg::background::hat_phi_var(&mut g, probs, &cfg).unwrap();
    let old = g.input(tensor::softmax(&old_logits, 0).unwrap());
    let kd = balanced_kd(&mut g, hat, old, &cfg, gm).unwrap();
    let p_new_hat = naive_hat(&naive_softmax_channels(&to_map(&new_logits)), &cls);
    let p_old = naive_softmax_channels(&to_map(&old_logits));
    (g.value(kd).item() - naive_kd(&p_new_hat, &p_old, &cls, gm)).abs()
}

/// CAF in fusing mode against concat, 1x1 fusion, two attention heads and
/// the residual reweighting spelled out by hand.
fn oracle_caf(rng: &mut Rng) -> f64 {
    let (c, h, w) = dims(rng);
    let mut store = ParamStore::new();
    NonLocalWeights::register(&mut store, "nl", c, rng).unwrap();
    CafWeights::register(&mut store, "caf", c, rng).unwrap();
    randomize(&mut store, rng);
    let mut old = ParamStore::new();
    NonLocalWeights::register(&mut old, "nl", c, rng).unwrap();
    randomize(&mut old, rng);
    let (zn, zo) = (uniform(rng, &[c, h, w]), uniform(rng, &[c, h, w]));

    let mut g = Graph::new();
    let nl = NonLocalWeights::bind(&mut g, &store, "nl", false).unwrap();
    let nl_old = NonLocalWeights::bind(&mut g, &old, "nl", false).unwrap();
    let caf = CafWeights::bind(&mut g, &store, "caf", false).unwrap();
    let (a, b) = (g.input(zn.clone()), g.input(zo.clone()));
    let prev = PreviousBranch { z: b, nonlocal: &nl_old };
    let (zbar, _) = caf_forward(&mut g, a, Some(prev), &nl, &caf, FusionMode::TrainFuse).unwrap();

    let get = |n: &str| store.value(store.require(&format!("caf.{n}")).unwrap()).clone();
    let (v_new, _) = naive_nonlocal(&to_map(&zn), &store, "nl");
    let (v_old, _) = naive_nonlocal(&to_map(&zo), &old, "nl");
    let cat: Map = v_old.iter().chain(&v_new).cloned().collect();
    let v = naive_conv1x1(&cat, &get("fuse.w"), &get("fuse.b"));
    let sp = naive_conv3x3(&v, &get("sp.w"), &get("sp.b"));
    let chm = naive_conv3x3(&v, &get("ch.w"), &get("ch.b"));
    let a_sp: Vec<Vec<f64>> = (0..h)
        .map(|y| (0..w).map(|x| (0..c).map(|k| sp[k][y][x]).sum::<f64>() / c as f64).collect())
        .collect();
    let a_ch: Vec<f64> = chm.iter().map(|pl| pl.iter().flatten().sum::<f64>() / (h * w) as f64).collect();
    let mut want = v.clone();
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                want[k][y][x] = (1.0 + a_ch[k] * a_sp[y][x]) * v[k][y][x];
            }
        }
    }
    max_abs_diff(g.value(zbar).data(), &flat(&want))
}

pub type OracleFn = fn(&mut Rng) -> f64;

pub fn oracle_cases() -> Vec<(&'static str, OracleFn)> {
    vec![
        ("conv", oracle_conv as OracleFn),
        ("matmul", oracle_matmul),
        ("nonlocal", oracle_nonlocal),
        ("ad", oracle_ad),
        ("tilde_hat", oracle_tilde_hat),
        ("gamma", oracle_gamma),
        ("kd", oracle_kd),
        ("caf", oracle_caf),
    ]
}

/// Worst absolute error of each oracle over `trials` random instances.
pub fn oracle_suite(trials: u64) -> Vec<(&'static str, f64)> {
    oracle_cases()
        .into_iter()
        .map(|(name, f)| {
            let worst = (0..trials)
                .map(|s| f(&mut Rng::stream(s, 0x0_7ac1e)))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Randomized invariants
// ---------------------------------------------------------------------------

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const INVARIANT_TOL: f64 = 1e-12;

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

/// Per-pixel channel sums.
fn pixel_mass(t: &Tensor) -> Vec<f64> {
    let m = to_map(t);
    let (h, w) = (m[0].len(), m[0][0].len());
    (0..h * w).map(|i| m.iter().map(|pl| pl[i / w][i % w]).sum()).collect()
}

fn mass_preservation(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = Rng::new(seed);
    let cls = random_classes(&mut rng);
    let cfg = step_cfg(&cls);
    let (_, h, w) = dims(&mut rng);
    let p = rng.tensor_uniform(&[cfg.num_classes(), h, w], 0.0, 1.0);
    let before = pixel_mass(&p);
    for (name, out) in [("tilde", tilde_phi(&p, &cfg).unwrap()), ("hat", hat_phi(&p, &cfg).unwrap())] {
        let err = max_abs_diff(&pixel_mass(&out), &before);
        check(err <= INVARIANT_TOL, || format!("{name}_phi mass changed by {err:e}"))?;
    }
    Ok(())
}

fn softmax_normalization(seed: u64, spread: f64) -> Result<(), TestCaseError> {
    let mut rng = Rng::new(seed);
    let (k, h, w) = dims(&mut rng);
    let x = rng.tensor_uniform(&[k, h, w], -spread, spread);
    let s = tensor::softmax(&x, 0).unwrap();
    check(s.data().iter().all(|&v| v >= 0.0), || "negative probability".into())?;
    let err = pixel_mass(&s).iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    check(err <= INVARIANT_TOL, || format!("channel softmax mass off by {err:e}"))?;
    let x2 = rng.tensor_uniform(&[h, w], -spread, spread);
    let s2 = tensor::softmax(&x2, 1).unwrap();
    let err = rows(&s2).iter().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    check(err <= INVARIANT_TOL, || format!("row softmax mass off by {err:e}"))
}

fn spatial(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let m = g.input(t.clone());
    let s = ad_spatial(&mut g, m).unwrap();
    g.value(s).clone()
}

fn ad_spatial_props(seed: u64, alpha: f64) -> Result<(), TestCaseError> {
    let mut rng = Rng::new(seed);
    let (c, h, w) = dims(&mut rng);
    let m = rng.tensor_uniform(&[c, h, w], -1.0, 1.0);
    let s = spatial(&m);
    let norm = s.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    check((norm - 1.0).abs() <= INVARIANT_TOL, || format!("Frobenius norm {norm}"))?;
    let scaled = spatial(&m.map(|v| alpha * v));
    let err = max_abs_diff(scaled.data(), s.data());
    check(err <= INVARIANT_TOL, || format!("scale {alpha} changed the map by {err:e}"))?;
    let mut perm: Vec<usize> = (0..c).collect();
    for i in (1..c).rev() {
        perm.swap(i, rng.int_in(0, i));
    }
    let p = h * w;
    let permuted = Tensor::from_fn(&[c, h, w], |i| m.data()[perm[i / p] * p + i % p]);
    let err = max_abs_diff(spatial(&permuted).data(), s.data());
    check(err <= INVARIANT_TOL, || format!("channel permutation changed the map by {err:e}"))
}

fn attention_rows(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = Rng::new(seed);
    let (c, h, w) = dims(&mut rng);
    let mut store = ParamStore::new();
    NonLocalWeights::register(&mut store, "nl", c, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let mut g = Graph::new();
    let nl = NonLocalWeights::bind(&mut g, &store, "nl", false).unwrap();
    let z = g.input(rng.tensor_uniform(&[c, h, w], -2.0, 2.0));
    let (_, a) = nonlocal_with_attention(&mut g, z, &nl).unwrap();
    let a = g.value(a);
    check(a.data().iter().all(|&v| v >= 0.0), || "negative attention weight".into())?;
    let err = rows(a).iter().map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    check(err <= INVARIANT_TOL, || format!("attention row mass off by {err:e}"))
}

/// Runs each randomized invariant for `cases` trials; `Err` carries the
/// first failing input.
pub fn invariant_suite(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    let seeds = any::<u64>();
    let alpha = prop_oneof![-10.0..-0.1f64, 0.1..10.0f64];
    vec![
        ("tilde/hat mass", runner(cases).run(&seeds, mass_preservation).map_err(|e| e.to_string())),
        (
            "softmax normalization",
            runner(cases)
                .run(&(seeds.clone(), 0.1..60.0f64), |(s, spread)| softmax_normalization(s, spread))
                .map_err(|e| e.to_string()),
        ),
        (
            "ad_spatial norm/scale/permutation",
            runner(cases)
                .run(&(seeds.clone(), alpha), |(s, a)| ad_spatial_props(s, a))
                .map_err(|e| e.to_string()),
        ),
        ("attention rows", runner(cases).run(&seeds, attention_rows).map_err(|e| e.to_string())),
    ]
}

// ---------------------------------------------------------------------------
// Closed-form values
// ---------------------------------------------------------------------------

pub const SPOT_TOL: f64 = 1e-9;

/// `(name, computed, expected)`.
pub fn spot_values() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let s = spatial(&Tensor::full(&[4, 2, 2], 1.0));
    let worst = s.data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
    out.push(("ad_spatial(ones 4x2x2) - 0.5".to_string(), worst + 0.5, 0.5));
    for k in 2..=6usize {
        let old: Vec<usize> = (0..k).collect();
        let cfg = StepConfig::new(old, vec![k]).unwrap();
        let p = Tensor::full(&[k, 3, 5], 1.0 / k as f64);
        let gm = gamma(&p, &cfg, 1e4).unwrap().value;
        out.push((format!("gamma uniform |S|={k}"), gm, (k - 1) as f64));
    }
    let cfg = StepConfig::new(vec![0, 1, 2, 3], vec![4]).unwrap();
    let mut g = Graph::new();
    let a = g.input(Tensor::full(&[4, 4, 4], 0.25));
    let b = g.input(Tensor::full(&[4, 4, 4], 0.25));
    let kd = balanced_kd(&mut g, a, b, &cfg, 1.0).unwrap();
    out.push(("kd(uniform 4, uniform 4)".to_string(), g.value(kd).item(), 4f64.ln()));
    out
}

// ---------------------------------------------------------------------------
// Frozen previous model
// ---------------------------------------------------------------------------

use cafseg::attentive;
use cafseg::background::{hat_phi_var, seg_loss, total_loss, LossWeights};
use cafseg::data::{generate, DatasetSpec};
use cafseg::model::forward;
use cafseg::protocol::{advance_step, build_scenario, ModelLineage, Setting};
use cafseg::train::{run_from_first, train_first_step, TrainConfig};

/// A few-second two-step run configuration.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs_first: 2,
        epochs_later: 1,
        batch_size: 4,
        enc_widths: [4, 8],
        channels: 8,
        ..TrainConfig::default()
    }
}

pub struct FrozenReport {
    /// Previous-model checksum before step 2 and after it.
    pub checksum: (u64, u64),
    /// Largest |gradient| found on any previous-model node or parameter.
    pub old_branch_grad: f64,
    /// Old-branch nodes that were checked.
    pub nodes_checked: usize,
    /// gamma before and after perturbing the current model.
    pub gamma: (f64, f64),
}

/// Runs a full step 2 and one explicit backward pass of the complete
/// objective, then inspects everything belonging to the previous model.
pub fn frozen_checks() -> FrozenReport {
    let train = generate(&DatasetSpec::with_classes(3, 24, 3)).unwrap();
    let val = generate(&DatasetSpec::with_classes(4, 6, 3)).unwrap();
    let scenario = build_scenario(&[1, 2, 3], "2-1", Setting::Disjoint).unwrap();
    let cfg = tiny_config(5);
    let first = train_first_step(&scenario, &train, &val, &cfg, true).unwrap();
    let before = first.lineage.current.params.checksum();
    let run = run_from_first(&first, &scenario, &train, &val, &cfg, &"full".parse().unwrap()).unwrap();
    let prev = run.lineage.previous.as_ref().unwrap();
    let after = prev.params.checksum();

    let lineage = advance_step(ModelLineage::first(first.lineage.current.clone()), &scenario, 5).unwrap();
    let mut current = lineage.current;
    let previous = lineage.previous.unwrap();
    let step_cfg = scenario.step_config(2).unwrap();
    let sample = &train.samples[0];
    let image = sample.image.to_tensor();
    let labels = cafseg::protocol::remap_labels(&sample.mask, &scenario, 2).unwrap();

    let mut g = Graph::new();
    let out = forward(&mut g, &current, Some(&previous), &image, FusionMode::TrainFuse).unwrap();
    let old = out.previous.unwrap();
    let seg = seg_loss(&mut g, out.logits, &labels, &step_cfg).unwrap();
    let se_z = SEWeights::bind(&mut g, &current.params, "se_z", true).unwrap();
    let se_h = SEWeights::bind(&mut g, &current.params, "se_h", true).unwrap();
    let ad = attentive::loss_ad(&mut g, out.z_bar, old.z_bar, out.h, old.h, &se_z, &se_h).unwrap();
    let probs = g.softmax(out.logits, 0).unwrap();
    let hat = hat_phi_var(&mut g, probs, &step_cfg).unwrap();
    let gm = gamma(g.value(old.probs), &step_cfg, 1e4).unwrap().value;
    let kd = balanced_kd(&mut g, hat, old.probs, &step_cfg, gm).unwrap();
    let total = total_loss(&mut g, seg, Some(ad), Some(kd), LossWeights::default()).unwrap();
    g.backward(total, &mut current.params).unwrap();
    let nodes = [old.z, old.z_bar, old.h, old.logits, old.probs];
    let mut worst = nodes
        .iter()
        .filter_map(|&v| g.grad(v))
        .map(|t| t.max_abs())
        .fold(0.0, f64::max);
    worst = previous.params.iter().map(|(_, p)| p.grad.max_abs()).fold(worst, f64::max);

    // gamma only reads the previous model's output
    for id in current.params.ids().collect::<Vec<_>>() {
        let t = current.params.value(id).map(|v| v * 1.5 + 0.01);
        current.params.set_value(id, t);
    }
    let mut g2 = Graph::new();
    let out2 = forward(&mut g2, &current, Some(&previous), &image, FusionMode::TrainFuse).unwrap();
    let gm2 = gamma(g2.value(out2.previous.unwrap().probs), &step_cfg, 1e4).unwrap().value;

    FrozenReport {
        checksum: (before, after),
        old_branch_grad: worst,
        nodes_checked: nodes.len(),
        gamma: (gm, gm2),
    }
}

// ---------------------------------------------------------------------------
// Determinism and serialization
// ---------------------------------------------------------------------------

use cafseg::checkpoint::{decode, encode};
use cafseg::report::write_reports;
use cafseg::train::{run_experiment, Variant};

pub struct DeterminismReport {
    /// Report files that differed between two identical runs.
    pub differing_reports: Vec<String>,
    pub reports_compared: usize,
    /// Worst absolute checkpoint round-trip error.
    pub checkpoint_err: f64,
    pub checkpoint_values: usize,
    /// Dataset files that differed between two generations.
    pub differing_data: Vec<String>,
    pub data_files: usize,
}

fn read_tree(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn diff_trees(a: &std::path::Path, b: &std::path::Path) -> (Vec<String>, usize) {
    let (ta, tb) = (read_tree(a), read_tree(b));
    let mut names: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    names.sort();
    names.dedup();
    let differing = names
        .iter()
        .filter(|n| ta.get(**n) != tb.get(**n))
        .map(|n| n.to_string())
        .collect();
    (differing, names.len())
}

pub fn determinism_checks() -> DeterminismReport {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::with_classes(21, 20, 3);
    let (d1, d2) = (tmp.path().join("data1"), tmp.path().join("data2"));
    cafseg::data::save(&generate(&spec).unwrap(), &d1).unwrap();
    cafseg::data::save(&generate(&spec).unwrap(), &d2).unwrap();
    let (differing_data, data_files) = diff_trees(&d1, &d2);

    let train = cafseg::data::load(&d1).unwrap();
    let val = generate(&DatasetSpec::with_classes(22, 6, 3)).unwrap();
    let scenario = build_scenario(&[1, 2, 3], "2-1", Setting::Disjoint).unwrap();
    let mut cfg = tiny_config(9);
    cfg.snapshot_epochs = vec![1];
    let variant: Variant = "full".parse().unwrap();
    let (r1, r2) = (tmp.path().join("run1"), tmp.path().join("run2"));
    let mut last = None;
    for dir in [&r1, &r2] {
        let res = run_experiment(&scenario, &train, &val, &cfg, &variant).unwrap();
        write_reports(dir, &res, &[("seed", cfg.seed.to_string())]).unwrap();
        last = Some(res);
    }
    let (differing_reports, reports_compared) = diff_trees(&r1, &r2);

    let model = last.unwrap().lineage.current;
    let back = decode(&encode(&model).unwrap(), std::path::Path::new("memory")).unwrap();
    let mut checkpoint_err: f64 = 0.0;
    let mut checkpoint_values = 0;
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        checkpoint_values += a.value.numel();
        checkpoint_err = checkpoint_err.max(max_abs_diff(a.value.data(), b.value.data()));
    }
    assert_eq!(model.meta, back.meta);
    DeterminismReport {
        differing_reports,
        reports_compared,
        checkpoint_err,
        checkpoint_values,
        differing_data,
        data_files,
    }
}
