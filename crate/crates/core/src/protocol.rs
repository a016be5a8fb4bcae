//! Incremental-learning protocol: scenario schedules, per-step data
//! selection, label remapping, and model lineage across steps.

use std::fmt;
use std::str::FromStr;

use crate::background::{StepConfig, BACKGROUND, IGNORE};
use crate::caf::CafWeights;
use crate::data::{Dataset, Mask};
use crate::error::{Error, Result};
use crate::init::Rng;
use crate::model::ModelState;

/// Whether step-`l` images may show classes of later steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Step-`l` images contain no pixel of a future class.
    Disjoint,
    /// Any image with a pixel of a current class is used.
    Overlapped,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Disjoint => "disjoint",
            Setting::Overlapped => "overlapped",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Setting::Disjoint),
            "overlapped" => Ok(Setting::Overlapped),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

/// Ordered class groups, one per incremental step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub steps: Vec<Vec<usize>>,
    pub setting: Setting,
}

/// Parses `"a-b"`, `"a-b-c-..."` over `universe` in ascending id order.
///
/// The first number is the size of the initial group, the rest are the
/// sizes of the following steps. If the listed sizes do not cover the
/// universe, the last size repeats until they do (`"15-1"` over 20 classes
/// is six steps).
pub fn build_scenario(universe: &[usize], spec: &str, setting: Setting) -> Result<Scenario> {
    let mut classes = universe.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.contains(&BACKGROUND) {
        return Err(Error::Protocol("the background cannot be scheduled as a class".into()));
    }
    let mut sizes = spec
        .split('-')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Protocol(format!("bad scenario `{spec}`: `{s}` is not a positive count")))
        })
        .collect::<Result<Vec<_>>>()?;
    if sizes.len() < 2 {
        return Err(Error::Protocol(format!("scenario `{spec}` needs at least two steps")));
    }
    let step = *sizes.last().expect("non-empty");
    let mut total: usize = sizes.iter().sum();
    while total < classes.len() {
        sizes.push(step);
        total += step;
    }
    if total > classes.len() {
        return Err(Error::Protocol(format!(
            "scenario `{spec}` schedules {total} classes but the universe has {}",
            classes.len()
        )));
    }
    let mut steps = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for n in sizes {
        steps.push(classes[start..start + n].to_vec());
        start += n;
    }
    Ok(Scenario {
        name: spec.to_string(),
        steps,
        setting,
    })
}

impl Scenario {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Every scheduled class, in step order.
    pub fn all_classes(&self) -> Vec<usize> {
        self.steps.iter().flatten().copied().collect()
    }

    /// Explicit size list, e.g. `"15-1-1-1-1-1"`; parses back to the same
    /// steps.
    pub fn to_spec_string(&self) -> String {
        self.steps
            .iter()
            .map(|s| s.len().to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step == 0 || step > self.steps.len() {
            return Err(Error::Protocol(format!(
                "step {step} outside 1..={} of scenario `{}`",
                self.steps.len(),
                self.name
            )));
        }
        Ok(())
    }

    /// `S_{l-1}` (with background) and `U_l` for step `step` (1-based).
    pub fn step_config(&self, step: usize) -> Result<StepConfig> {
        self.check_step(step)?;
        let old = std::iter::once(BACKGROUND)
            .chain(self.steps[..step - 1].iter().flatten().copied())
            .collect();
        StepConfig::new(old, self.steps[step - 1].clone())
    }

    /// Single step over every class, used for the joint upper bound.
    pub fn joint_config(&self) -> Result<StepConfig> {
        StepConfig::first(self.all_classes())
    }

    pub fn future_classes(&self, step: usize) -> Vec<usize> {
        self.steps[step.min(self.steps.len())..].iter().flatten().copied().collect()
    }
}

/// Indices of the images used for training at `step`.
pub fn filter_step(dataset: &Dataset, scenario: &Scenario, step: usize) -> Result<Vec<usize>> {
    scenario.check_step(step)?;
    let current = &scenario.steps[step - 1];
    let future = scenario.future_classes(step);
    let mut seen = [false; 256];
    let keep: Vec<usize> = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            seen.fill(false);
            for &v in &s.mask.data {
                seen[v as usize] = true;
            }
            let has_current = current.iter().any(|&c| c < 256 && seen[c]);
            let has_future = future.iter().any(|&c| c < 256 && seen[c]);
            match scenario.setting {
                Setting::Overlapped => has_current,
                Setting::Disjoint => has_current && !has_future,
            }
        })
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::Protocol(format!(
            "no {} training images for step {step} (classes {current:?})",
            scenario.setting
        )));
    }
    Ok(keep)
}

/// Labels as seen at `step`: every class outside `U_l` becomes background;
/// ignored pixels stay ignored.
pub fn remap_labels(mask: &Mask, scenario: &Scenario, step: usize) -> Result<Vec<u8>> {
    scenario.check_step(step)?;
    let current = &scenario.steps[step - 1];
    let mut keep = [false; 256];
    for &c in current {
        if c < 256 {
            keep[c] = true;
        }
    }
    Ok(mask
        .data
        .iter()
        .map(|&v| {
            if v == IGNORE || keep[v as usize] {
                v
            } else {
                BACKGROUND as u8
            }
        })
        .collect())
}

/// The model being trained and, from step 2 on, the frozen model of the
/// previous step.
#[derive(Clone, Debug)]
pub struct ModelLineage {
    pub current: ModelState,
    pub previous: Option<ModelState>,
    pub step: usize,
}

impl ModelLineage {
    pub fn first(current: ModelState) -> Self {
        Self {
            current,
            previous: None,
            step: 1,
        }
    }
}

/// Moves to step `l + 1`: the current model is frozen as the previous one;
/// the new current model keeps every weight, gains one classifier row per
/// new class, and gets a fresh fusion convolution and fresh distillation
/// SE weights.
pub fn advance_step(lineage: ModelLineage, scenario: &Scenario, seed: u64) -> Result<ModelLineage> {
    let next = lineage.step + 1;
    if next > scenario.num_steps() {
        return Err(Error::Protocol(format!(
            "cannot advance past the last step ({}) of scenario `{}`",
            scenario.num_steps(),
            scenario.name
        )));
    }
    let cfg = scenario.step_config(next)?;
    let previous = lineage.current;
    if previous.classes() != cfg.old_classes() {
        return Err(Error::Protocol(format!(
            "model classes {:?} do not match step {next}'s previous classes {:?}",
            previous.classes(),
            cfg.old_classes()
        )));
    }
    let mut current = previous.clone();
    let mut rng = Rng::stream(seed, 0xadd0_0000 + next as u64);
    current.grow_classifier(cfg.new_classes(), &mut rng)?;
    CafWeights::reset_fusion(&mut current.params, "caf")?;
    current.reinit_group("se_z", &mut rng)?;
    current.reinit_group("se_h", &mut rng)?;
    current.params.zero_grad();
    current.meta.step = next;
    current.meta.old_classes = cfg.old_classes().to_vec();
    current.meta.new_classes = cfg.new_classes().to_vec();
    Ok(ModelLineage {
        current,
        previous: Some(previous),
        step: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::data::RgbImage;
    use crate::model::ModelConfig;

    fn sample(classes: &[u8]) -> Sample {
        let mut data = vec![0u8; 16];
        for (i, &c) in classes.iter().enumerate() {
            data[i] = c;
        }
        Sample {
            image: RgbImage { height: 4, width: 4, data: vec![0; 48] },
            mask: Mask { height: 4, width: 4, data },
        }
    }

    #[test]
    fn builds_schedules() {
        let u: Vec<usize> = (1..=5).collect();
        let s = build_scenario(&u, "4-1", Setting::Disjoint).unwrap();
        assert_eq!(s.steps, vec![vec![1, 2, 3, 4], vec![5]]);
        let s = build_scenario(&u, "3-1-1", Setting::Disjoint).unwrap();
        assert_eq!(s.steps, vec![vec![1, 2, 3], vec![4], vec![5]]);
        let u20: Vec<usize> = (1..=20).collect();
        let s = build_scenario(&u20, "15-1", Setting::Overlapped).unwrap();
        assert_eq!(s.steps.len(), 6);
        assert_eq!(s.steps[0], (1..=15).collect::<Vec<_>>());
        assert_eq!(s.steps[5], vec![20]);
        let s = build_scenario(&u20, "15-5", Setting::Overlapped).unwrap();
        assert_eq!(s.steps[1], vec![16, 17, 18, 19, 20]);
    }

    #[test]
    fn rejects_bad_schedules() {
        let u: Vec<usize> = (1..=5).collect();
        assert!(build_scenario(&u, "5-1", Setting::Disjoint).is_err());
        assert!(build_scenario(&u, "2-2", Setting::Disjoint).is_err());
        assert!(build_scenario(&u, "5", Setting::Disjoint).is_err());
        assert!(build_scenario(&u, "a-1", Setting::Disjoint).is_err());
        assert!(build_scenario(&u, "4-0", Setting::Disjoint).is_err());
    }

    #[test]
    fn spec_string_round_trip() {
        let u20: Vec<usize> = (1..=20).collect();
        let s = build_scenario(&u20, "15-1", Setting::Disjoint).unwrap();
        assert_eq!(s.to_spec_string(), "15-1-1-1-1-1");
        let t = build_scenario(&u20, &s.to_spec_string(), Setting::Disjoint).unwrap();
        assert_eq!(t.steps, s.steps);
    }

    #[test]
    fn filter_definitions() {
        let u: Vec<usize> = (1..=5).collect();
        let ds = Dataset {
            samples: vec![sample(&[1, 5]), sample(&[]), sample(&[2]), sample(&[5])],
        };
        let dis = build_scenario(&u, "4-1", Setting::Disjoint).unwrap();
        assert_eq!(filter_step(&ds, &dis, 1).unwrap(), vec![2]);
        assert_eq!(filter_step(&ds, &dis, 2).unwrap(), vec![0, 3]);
        let ov = build_scenario(&u, "4-1", Setting::Overlapped).unwrap();
        assert_eq!(filter_step(&ds, &ov, 1).unwrap(), vec![0, 2]);
        assert_eq!(filter_step(&ds, &ov, 2).unwrap(), vec![0, 3]);
        let only_bg = Dataset { samples: vec![sample(&[])] };
        assert!(matches!(filter_step(&only_bg, &dis, 1), Err(Error::Protocol(_))));
        assert!(filter_step(&ds, &dis, 3).is_err());
    }

    #[test]
    fn remap_rules() {
        let u: Vec<usize> = (1..=5).collect();
        let s = build_scenario(&u, "4-1", Setting::Overlapped).unwrap();
        let m = sample(&[1, 2, 5, 255]).mask;
        let r = remap_labels(&m, &s, 2).unwrap();
        assert_eq!(&r[..4], &[0, 0, 5, 255]);
        let r = remap_labels(&m, &s, 1).unwrap();
        assert_eq!(&r[..4], &[1, 2, 0, 255]);
    }

    #[test]
    fn step_configs() {
        let u: Vec<usize> = (1..=5).collect();
        let s = build_scenario(&u, "3-1-1", Setting::Disjoint).unwrap();
        let c = s.step_config(3).unwrap();
        assert_eq!(c.old_classes(), &[0, 1, 2, 3, 4]);
        assert_eq!(c.new_classes(), &[5]);
        assert_eq!(s.step_config(1).unwrap().old_classes(), &[0]);
        assert!(s.step_config(0).is_err());
    }

    #[test]
    fn advance_grows_and_freezes() {
        let u: Vec<usize> = (1..=5).collect();
        let s = build_scenario(&u, "4-1", Setting::Disjoint).unwrap();
        let cfg = s.step_config(1).unwrap();
        let small = ModelConfig { enc_widths: [4, 4], channels: 4, caf: true };
        let m = ModelState::new(small, &cfg, 1, 0).unwrap();
        assert_eq!(m.num_classes(), 5);
        let lin = advance_step(ModelLineage::first(m.clone()), &s, 0).unwrap();
        assert_eq!(lin.current.num_classes(), 6);
        assert_eq!(lin.previous.as_ref().unwrap(), &m);
        let w = lin.current.params.value(lin.current.params.id("cls.w").unwrap());
        let w0 = m.params.value(m.params.id("cls.w").unwrap());
        assert_eq!(&w.data()[..w0.numel()], w0.data());
        let enc = |x: &ModelState| x.params.value(x.params.id("enc.2.w").unwrap()).clone();
        assert_eq!(enc(&lin.current), enc(&m));
        assert!(matches!(advance_step(lin, &s, 0), Err(Error::Protocol(_))));
    }
}
