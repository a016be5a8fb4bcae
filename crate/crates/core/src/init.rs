//! Seeded randomness and weight initialisation.
//!
//! All randomness in the crate flows through [`Rng`]: xoshiro256++ whose
//! 256-bit state is expanded from a 64-bit seed with SplitMix64. Uniform
//! floats take the top 53 bits of `next_u64`; normals use Box-Muller on two
//! uniforms (the cosine branch only). This is enough to regenerate identical
//! streams in any language.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// Golden-ratio increment used to derive independent streams.
const STREAM_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Stream `index` of `seed`: seeded with `seed + (index + 1) * 0x9E3779B97F4A7C15`.
    pub fn stream(seed: u64, index: u64) -> Self {
        Self::new(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(STREAM_MIX)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + (self.uniform() * (hi - lo + 1) as f64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn tensor_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| std * self.normal())
    }

    pub fn tensor_uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform_in(lo, hi))
    }
}

/// He-normal weights for a layer with `fan_in` inputs.
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    rng.tensor_normal(shape, (2.0 / fan_in as f64).sqrt())
}

/// Registers `{name}.w` `[c_out, c_in]` and `{name}.b` `[c_out]`.
pub fn register_conv1x1(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    rng: &mut Rng,
) -> Result<(ParamId, ParamId)> {
    let w = store.insert(format!("{name}.w"), he_normal(rng, &[c_out, c_in], c_in))?;
    let b = store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
    Ok((w, b))
}

/// Registers `{name}.w` `[c_out, c_in, 3, 3]` and `{name}.b` `[c_out]`.
pub fn register_conv3x3(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    rng: &mut Rng,
) -> Result<(ParamId, ParamId)> {
    let w = store.insert(
        format!("{name}.w"),
        he_normal(rng, &[c_out, c_in, 3, 3], 9 * c_in),
    )?;
    let b = store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
    Ok((w, b))
}
