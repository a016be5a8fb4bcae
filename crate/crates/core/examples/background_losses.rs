//! Background-shift handling: class merging, the balancing ratio and the
//! distillation term on a small probability map.

use cafseg::autodiff::Graph;
use cafseg::background::{balanced_kd, gamma, hat_phi, tilde_phi, StepConfig, DEFAULT_GAMMA_MAX};
use cafseg::init::Rng;
use cafseg::tensor;

fn main() -> cafseg::Result<()> {
    // step 2: background and classes 1, 2 are old, class 3 is new
    let cfg = StepConfig::new(vec![0, 1, 2], vec![3])?;
    let mut rng = Rng::new(11);
    let p_new = tensor::softmax(&rng.tensor_normal(&[4, 3, 3], 1.0), 0)?;
    let p_old = tensor::softmax(&rng.tensor_normal(&[3, 3, 3], 1.0), 0)?;

    let tilde = tilde_phi(&p_new, &cfg)?;
    let hat = hat_phi(&p_new, &cfg)?;
    println!("tilde groups {:?}, hat groups {:?}", cfg.tilde_groups(), cfg.hat_groups());
    println!("mass per pixel: p {:.6} tilde {:.6} hat {:.6}", p_new.sum() / 9.0, tilde.sum() / 9.0, hat.sum() / 9.0);

    let gm = gamma(&p_old, &cfg, DEFAULT_GAMMA_MAX)?;
    let uniform = gamma(&tensor::Tensor::full(&[3, 3, 3], 1.0 / 3.0), &cfg, DEFAULT_GAMMA_MAX)?;
    println!("gamma {:.4} (uniform map: {})", gm.value, uniform.value);

    let mut g = Graph::new();
    let hv = g.input(hat);
    let ov = g.input(p_old);
    let plain = balanced_kd(&mut g, hv, ov, &cfg, 1.0)?;
    let balanced = balanced_kd(&mut g, hv, ov, &cfg, gm.value)?;
    println!("KD {:.5}, balanced KD {:.5}", g.value(plain).data()[0], g.value(balanced).data()[0]);
    Ok(())
}
