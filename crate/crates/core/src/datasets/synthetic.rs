use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::Image;
use crate::trainer::derived_rng;

const TAG_SAMPLE: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside the shape of
    /// circumradius-like size `r` rotated by `theta`.
    fn contains(self, dx: f64, dy: f64, r: f64, theta: f64) -> bool {
        let (s, c) = theta.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self {
            Shape::Disc => u * u + v * v <= r * r,
            // Half side r.
            Shape::Square => u.abs() <= r && v.abs() <= r,
            // Equilateral, circumradius r: three half-planes at distance r/2.
            Shape::Triangle => (0..3).all(|k| {
                let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                u * a.cos() + v * a.sin() >= -r / 2.0
            }),
        }
    }
}

/// Generator parameters. Object size is the shape's half extent as a
/// fraction of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub shapes: Vec<Shape>,
    pub scale: (f64, f64),
    /// Standard deviation of per-pixel Gaussian noise added to the background.
    pub noise: f64,
    /// Per-channel intensity ranges of the object and the background.
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 64,
            shapes: Shape::ALL.to_vec(),
            scale: (0.18, 0.32),
            noise: 0.05,
            foreground: (0.7, 0.9),
            background: (0.1, 0.25),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("dataset.size {} is too small", self.size)));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("dataset.shapes is empty".into()));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("dataset.scale ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if hi > 0.5 {
            return Err(Error::Config(format!("dataset.scale upper bound {hi} exceeds the image (max 0.5)")));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("dataset.noise {} must be non-negative", self.noise)));
        }
        for (name, (lo, hi)) in [("foreground", self.foreground), ("background", self.background)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("dataset.{name} ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.shapes.len()
    }
}

/// Binary object mask on the pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Per-patch label in raster order: true when strictly more than half of
    /// the patch's pixels are inside the object.
    pub fn patch_labels(&self, patch: usize) -> Result<Vec<bool>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::shape(
                "patch_labels",
                format!("{}x{} mask is not divisible into {patch}-pixel patches", self.height, self.width),
            ));
        }
        self.grid_labels(self.height / patch, self.width / patch)
    }

    /// Majority labels on a `gh × gw` grid of equal pixel blocks.
    pub fn grid_labels(&self, gh: usize, gw: usize) -> Result<Vec<bool>> {
        if gh == 0 || gw == 0 || self.height % gh != 0 || self.width % gw != 0 {
            return Err(Error::shape(
                "grid_labels",
                format!("{}x{} mask does not align with a {gh}x{gw} grid", self.height, self.width),
            ));
        }
        let (bh, bw) = (self.height / gh, self.width / gw);
        Ok((0..gh * gw)
            .map(|p| {
                let (py, px) = (p / gw, p % gw);
                let inside = (0..bh)
                    .flat_map(|y| (0..bw).map(move |x| (py * bh + y, px * bw + x)))
                    .filter(|&(y, x)| self.get(y, x))
                    .count();
                2 * inside > bh * bw
            })
            .collect())
    }

    pub fn to_image(&self) -> Image {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::new(1, self.height, self.width, data).expect("mask dimensions are valid")
    }

    pub fn from_image(img: &Image) -> Result<Mask> {
        if img.channels() != 1 {
            return Err(Error::Format("mask must be single-channel".into()));
        }
        Ok(Mask {
            height: img.height(),
            width: img.width(),
            bits: img.data().iter().map(|&v| v >= 0.5).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.samples.len() {
            return Err(Error::invalid("split", format!("{n} exceeds dataset size {}", self.samples.len())));
        }
        let rest = self.samples.split_off(n);
        let classes = self.classes;
        Ok((self, Dataset { samples: rest, classes }))
    }

    /// FNV digest over labels, pixels and masks.
    pub fn digest(&self) -> u64 {
        let mut h = crate::numerics::Fnv::new();
        for s in &self.samples {
            h.write(&(s.label as u64).to_le_bytes());
            for v in s.image.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
            h.write(&s.mask.bits.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        h.finish()
    }
}

fn q8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Sample `index` of the dataset described by `spec`. Its class is
/// `index % classes`; everything else comes from a stream derived from
/// `(spec.seed, index)`. Pixel values sit on the 8-bit grid, so writing and
/// reading the sample back is lossless.
pub fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = derived_rng(spec.seed, TAG_SAMPLE, index as u64, 0);
    let label = index % spec.classes();
    let shape = spec.shapes[label];
    let n = spec.size as f64;
    let r = rng.gen_range(spec.scale.0..=spec.scale.1) * n;
    let cx = rng.gen_range(r..=n - r);
    let cy = rng.gen_range(r..=n - r);
    let theta = rng.gen_range(0.0..2.0 * PI);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.foreground.0..=spec.foreground.1));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(spec.background.0..=spec.background.1));
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("positive std");
    let s = spec.size;
    let mut data = vec![0.0; 3 * s * s];
    let mut bits = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let inside = shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r, theta);
            bits[y * s + x] = inside;
            for c in 0..3 {
                let v = if inside {
                    fg[c]
                } else if spec.noise > 0.0 {
                    bg[c] + noise.sample(&mut rng)
                } else {
                    bg[c]
                };
                data[(c * s + y) * s + x] = q8(v);
            }
        }
    }
    Ok(Sample {
        image: Image::new(3, s, s, data)?,
        label,
        mask: Mask { height: s, width: s, bits },
    })
}

/// `n` samples, generated in parallel; identical for identical specs.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    use rayon::prelude::*;
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate", "n must be at least 1"));
    }
    let samples = (0..n).into_par_iter().map(|i| generate_one(spec, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        classes: spec.classes(),
    })
}
