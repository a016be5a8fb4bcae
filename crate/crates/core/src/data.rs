//! Deterministic synthetic segmentation corpus.
//!
//! Each image is a textured grey background with one to three
//! non-overlapping coloured shapes of distinct classes. Image `i` of a
//! corpus draws all of its randomness from `Rng::stream(seed, i)`, so images
//! can be generated independently and in any order.
//!
//! Per-image recipe (all draws in this order):
//!
//! 1. background: two frequencies in `[0.15, 0.6)`, two phases in
//!    `[0, 2pi)`, a base level in `[0.3, 0.45)`;
//! 2. shape count `n` uniform in `shapes_per_image`, capped by the number of
//!    classes, and `n` distinct classes by partial Fisher-Yates over the
//!    sorted class list;
//! 3. per shape, up to 100 placement attempts of (half-size, centre x,
//!    centre y); a placement is kept when its bounding box, grown by one
//!    pixel, touches no earlier box;
//! 4. per pixel in row-major order and channel order R, G, B, one normal
//!    draw of additive noise (sigma 0.05).
//!
//! Values are quantised to 8 bits at generation time so that a corpus
//! written to disk and read back is identical to the generated one.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::background::IGNORE;
use crate::error::{Error, Result};
use crate::init::Rng;
use crate::pnm;
use crate::tensor::Tensor;

/// Geometric primitive drawn for a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
    ];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-size `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Square => ax <= r && ay <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy.abs() <= r && ax <= (dy + r) / 2.0,
            ShapeKind::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)
            }
            ShapeKind::Bar => ax <= r && ay <= r / 3.0,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Bar => "bar",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape `{s}`")))
    }
}

/// Fixed RGB colour per class id (1-based). Ids past the table reuse it
/// with inverted channels.
///
/// | id | colour  |
/// |----|---------|
/// | 1  | red     |
/// | 2  | green   |
/// | 3  | blue    |
/// | 4  | yellow  |
/// | 5  | magenta |
/// | 6  | cyan    |
/// | 7  | orange  |
/// | 8  | purple  |
/// | 9  | white   |
/// | 10 | brown   |
pub fn class_color(class: u8) -> [f64; 3] {
    const TABLE: [[f64; 3]; 10] = [
        [0.86, 0.16, 0.16],
        [0.16, 0.78, 0.24],
        [0.20, 0.31, 0.90],
        [0.90, 0.82, 0.16],
        [0.82, 0.20, 0.78],
        [0.16, 0.82, 0.82],
        [0.94, 0.51, 0.12],
        [0.47, 0.24, 0.71],
        [0.92, 0.92, 0.92],
        [0.55, 0.35, 0.16],
    ];
    let i = (class as usize).saturating_sub(1);
    let c = TABLE[i % TABLE.len()];
    if (i / TABLE.len()) % 2 == 1 {
        [1.0 - c[0], 1.0 - c[1], 1.0 - c[2]]
    } else {
        c
    }
}

/// Corpus description.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    pub class_shapes: BTreeMap<u8, ShapeKind>,
    /// Inclusive range of shapes per image.
    pub shapes_per_image: (usize, usize),
}

impl DatasetSpec {
    /// 32x32 images, 1-3 shapes, shape kinds cycling through
    /// [`ShapeKind::ALL`] in class order.
    pub fn new(seed: u64, num_images: usize, classes: &[u8]) -> Self {
        let class_shapes = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, ShapeKind::ALL[i % ShapeKind::ALL.len()]))
            .collect();
        Self {
            seed,
            num_images,
            width: 32,
            height: 32,
            class_shapes,
            shapes_per_image: (1, 3),
        }
    }

    /// Classes `1..=n`.
    pub fn with_classes(seed: u64, num_images: usize, n: u8) -> Self {
        let classes: Vec<u8> = (1..=n).collect();
        Self::new(seed, num_images, &classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "images must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        if self.class_shapes.is_empty() {
            return Err(Error::Config("no classes".into()));
        }
        if let Some(&c) = self.class_shapes.keys().find(|&&c| c == 0 || c == IGNORE) {
            return Err(Error::Config(format!("class id {c} is reserved")));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad shapes_per_image {lo}..={hi}")));
        }
        Ok(())
    }
}

/// Per-pixel class ids, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    /// Sorted distinct values.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let p = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, pix) = (i / p, i % p);
            self.data[pix * 3 + c] as f64 / 255.0
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Splits off the last `fraction` of samples as a holdout set.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction {fraction} not in [0, 1)")));
        }
        let n_hold = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - n_hold;
        Ok((
            Dataset { samples: self.samples[..cut].to_vec() },
            Dataset { samples: self.samples[cut..].to_vec() },
        ))
    }
}

const NOISE_SIGMA: f64 = 0.05;
const MAX_ATTEMPTS: usize = 100;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Generates image `index` of the corpus.
pub fn generate_one(spec: &DatasetSpec, index: usize) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = Rng::stream(spec.seed, index as u64);

    let fx = rng.uniform_in(0.15, 0.6);
    let fy = rng.uniform_in(0.15, 0.6);
    let px = rng.uniform_in(0.0, std::f64::consts::TAU);
    let py = rng.uniform_in(0.0, std::f64::consts::TAU);
    let base = rng.uniform_in(0.3, 0.45);

    let classes: Vec<u8> = spec.class_shapes.keys().copied().collect();
    let (lo, hi) = spec.shapes_per_image;
    let n = rng.int_in(lo, hi).min(classes.len());
    let mut pool = classes.clone();
    for i in 0..n {
        let j = rng.int_in(i, pool.len() - 1);
        pool.swap(i, j);
    }
    let chosen = &pool[..n];

    let side = h.min(w) as f64;
    let (r_lo, r_hi) = (side / 10.0, side / 5.0);
    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut placed: Vec<(u8, f64, f64, f64)> = Vec::new();
    for &class in chosen {
        for _ in 0..MAX_ATTEMPTS {
            let r = rng.uniform_in(r_lo, r_hi);
            let cx = rng.uniform_in(r, w as f64 - r);
            let cy = rng.uniform_in(r, h as f64 - r);
            let bb = (cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0);
            let clear = boxes
                .iter()
                .all(|b| bb.2 <= b.0 || b.2 <= bb.0 || bb.3 <= b.1 || b.3 <= bb.1);
            if clear {
                boxes.push((cx - r, cy - r, cx + r, cy + r));
                placed.push((class, cx, cy, r));
                break;
            }
        }
    }

    let mut mask = vec![0u8; h * w];
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let tex = base + 0.08 * ((x as f64 * fx + px).sin() * (y as f64 * fy + py).cos());
            let mut color = [tex, tex, tex * 1.05];
            for &(class, cx, cy, r) in &placed {
                let kind = spec.class_shapes[&class];
                if kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    mask[y * w + x] = class;
                    color = class_color(class);
                }
            }
            for (c, &v) in color.iter().enumerate() {
                rgb[(y * w + x) * 3 + c] = quantize(v + NOISE_SIGMA * rng.normal());
            }
        }
    }
    Sample {
        image: RgbImage { height: h, width: w, data: rgb },
        mask: Mask { height: h, width: w, data: mask },
    }
}

/// Generates the full corpus.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        samples: (0..spec.num_images).map(|i| generate_one(spec, i)).collect(),
    })
}

pub const INDEX_FILE: &str = "index.txt";

/// Writes `images/NNNNN.ppm`, `masks/NNNNN.pgm` and `index.txt`.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut index = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let img_rel = format!("images/{i:05}.ppm");
        let mask_rel = format!("masks/{i:05}.pgm");
        let img_path = dir.join(&img_rel);
        let mask_path = dir.join(&mask_rel);
        std::fs::write(&img_path, pnm::encode_ppm(s.image.width, s.image.height, &s.image.data))
            .map_err(|e| Error::io(&img_path, e))?;
        std::fs::write(&mask_path, pnm::encode_pgm(s.mask.width, s.mask.height, &s.mask.data))
            .map_err(|e| Error::io(&mask_path, e))?;
        writeln!(index, "{img_rel}\t{mask_rel}").expect("write to Vec");
    }
    let p = dir.join(INDEX_FILE);
    std::fs::write(&p, index).map_err(|e| Error::io(&p, e))
}

/// Reads a corpus written by [`save`] (or by hand in the same layout).
pub fn load(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img_rel, mask_rel) = line.split_once('\t').ok_or_else(|| {
            Error::format(&index_path, format!("line {}: expected `image<TAB>mask`", lineno + 1))
        })?;
        let img_path = dir.join(img_rel);
        let mask_path = dir.join(mask_rel);
        let img = pnm::read(&img_path)?;
        if img.channels != 3 {
            return Err(Error::format(&img_path, "expected a P6 colour image"));
        }
        let mask = pnm::read(&mask_path)?;
        if mask.channels != 1 {
            return Err(Error::format(&mask_path, "expected a P5 greyscale mask"));
        }
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::format(
                &mask_path,
                format!(
                    "mask is {}x{} but image {} is {}x{}",
                    mask.width,
                    mask.height,
                    img_path.display(),
                    img.width,
                    img.height
                ),
            ));
        }
        samples.push(Sample {
            image: RgbImage { height: img.height, width: img.width, data: img.pixels },
            mask: Mask { height: mask.height, width: mask.width, data: mask.pixels },
        });
    }
    Ok(Dataset { samples })
}
