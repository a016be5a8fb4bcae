//! SGD with momentum, L2 weight decay and polynomial learning-rate decay.

use crate::autodiff::ParamStore;

/// `lr(t) = base * (1 - t / total)^power` for iteration `t` of `total`.
pub fn poly_lr(base: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (t.min(total) as f64) / total as f64;
    base * frac.powf(power)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v = mu v + (g + wd w)`, `w -= lr v` for every parameter, then clears
    /// the gradients. Velocity buffers are reset when a parameter changes
    /// size (a grown classifier).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        if self.velocity.len() < ids.len() {
            self.velocity.resize(ids.len(), Vec::new());
        }
        for id in ids {
            let p = store.get_mut(id);
            let vel = &mut self.velocity[id.index()];
            if vel.len() != p.value.numel() {
                *vel = vec![0.0; p.value.numel()];
            }
            let grad = p.grad.data();
            let w = p.value.data_mut();
            for ((w, &g), v) in w.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
        store.zero_grad();
    }
}
