//! Multi-crop view sampling: random resized crops, photometric jitter and the
//! shared query-crop set.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, Rect};
use super::patches::patchify;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Attempts per crop before giving up on a scale/aspect draw.
pub const CROP_RETRIES: usize = 10;

const LOG_ASPECT: (f64, f64) = (-0.287_682_072_451_780_9, 0.287_682_072_451_780_9); // ln(3/4), ln(4/3)

/// Where a crop was cut from and what it was resized to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub rect: Rect,
    pub target: (usize, usize),
    pub scale: (f64, f64),
}

impl CropSpec {
    pub fn area_fraction(&self, source: (usize, usize)) -> f64 {
        (self.rect.height * self.rect.width) as f64 / (source.0 * source.1) as f64
    }
}

impl fmt::Display for CropSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "top={} left={} height={} width={} target={}x{} scale={}..{}",
            self.rect.top,
            self.rect.left,
            self.rect.height,
            self.rect.width,
            self.target.0,
            self.target.1,
            self.scale.0,
            self.scale.1
        )
    }
}

fn check_scale(op: &'static str, scale: (f64, f64)) -> Result<()> {
    if !(scale.0 > 0.0 && scale.0 < scale.1 && scale.1 <= 1.0) {
        return Err(Error::invalid(
            op,
            format!("scale range {scale:?} must satisfy 0 < min < max <= 1"),
        ));
    }
    Ok(())
}

/// Draws a crop rectangle whose area fraction lies in `scale` and whose
/// aspect ratio lies in [3/4, 4/3]. Draws that round to an empty or
/// out-of-range rectangle are retried up to [`CROP_RETRIES`] times. After
/// that the largest centred crop with an aspect ratio in range is used,
/// provided its area fraction lies in `scale`; otherwise the call fails.
pub fn sample_crop<R: Rng + ?Sized>(
    size: (usize, usize),
    scale: (f64, f64),
    target: (usize, usize),
    rng: &mut R,
) -> Result<CropSpec> {
    check_scale("sample_crop", scale)?;
    let (h, w) = size;
    let area = (h * w) as f64;
    for _ in 0..CROP_RETRIES {
        let frac = rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(LOG_ASPECT.0..=LOG_ASPECT.1).exp();
        let cw = (area * frac * aspect).sqrt().round() as usize;
        let ch = (area * frac / aspect).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        let actual = (cw * ch) as f64 / area;
        if actual < scale.0 || actual > scale.1 {
            continue;
        }
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        return Ok(CropSpec {
            rect: Rect {
                top,
                left,
                height: ch,
                width: cw,
            },
            target,
            scale,
        });
    }
    let (min_ratio, max_ratio) = (LOG_ASPECT.0.exp(), LOG_ASPECT.1.exp());
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < min_ratio {
        (((w as f64 / min_ratio).round() as usize).min(h), w)
    } else if ratio > max_ratio {
        (h, ((h as f64 * max_ratio).round() as usize).min(w))
    } else {
        (h, w)
    };
    let actual = (cw * ch) as f64 / area;
    if actual < scale.0 || actual > scale.1 {
        return Err(Error::invalid(
            "sample_crop",
            format!("no valid crop of {h}x{w} at scale {scale:?} after {CROP_RETRIES} draws"),
        ));
    }
    Ok(CropSpec {
        rect: Rect {
            top: (h - ch) / 2,
            left: (w - cw) / 2,
            height: ch,
            width: cw,
        },
        target,
        scale,
    })
}

/// Cuts `count` query crops from the raw image and resizes each to
/// `patch × patch`. Returns their flattened pixels (`Q × C·P²`, the same
/// layout as [`patchify`] rows) and the crop geometry.
pub fn sample_query_crops<R: Rng + ?Sized>(
    img: &Image,
    count: usize,
    scale: (f64, f64),
    patch: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<CropSpec>)> {
    check_scale("sample_query_crops", scale)?;
    if patch == 0 {
        return Err(Error::invalid("sample_query_crops", "patch size must be positive"));
    }
    let dim = img.channels() * patch * patch;
    let mut data = Vec::with_capacity(count * dim);
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let spec = sample_crop((img.height(), img.width()), scale, (patch, patch), rng)?;
        let crop = img.crop(spec.rect)?.resize_bilinear(patch, patch);
        data.extend(patchify(&crop, patch)?.into_data());
        specs.push(spec);
    }
    Ok((Tensor::new(vec![count, dim], data)?, specs))
}

/// Photometric augmentation settings for one view slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Photometric {
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub gray_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
}

impl Default for Photometric {
    fn default() -> Self {
        Photometric {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 1.0),
            solarize_p: 0.0,
        }
    }
}

impl Photometric {
    pub fn none() -> Self {
        Photometric {
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 1.0),
            solarize_p: 0.0,
        }
    }

    /// The asymmetric two-view recipe: the first global view is always
    /// blurred, the second rarely blurred and sometimes solarised; local
    /// views use the default.
    pub fn for_view(global_index: Option<usize>) -> Self {
        let base = Photometric::default();
        match global_index {
            Some(0) => Photometric { blur_p: 1.0, ..base },
            Some(_) => Photometric {
                blur_p: 0.1,
                solarize_p: 0.2,
                ..base
            },
            None => base,
        }
    }

    /// Returns the augmented image and whether it was mirrored.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> (Image, bool) {
        let mut out = img.clone();
        let flipped = rng.gen_bool(self.flip_p.clamp(0.0, 1.0));
        if flipped {
            out = out.flip_horizontal();
        }
        if rng.gen_bool(self.jitter_p.clamp(0.0, 1.0)) {
            color_jitter(&mut out, self, rng);
        }
        if out.channels() == 3 && rng.gen_bool(self.gray_p.clamp(0.0, 1.0)) {
            to_gray(&mut out);
        }
        if rng.gen_bool(self.blur_p.clamp(0.0, 1.0)) {
            let sigma = rng.gen_range(self.blur_sigma.0..=self.blur_sigma.1);
            out = gaussian_blur(&out, sigma);
        }
        if rng.gen_bool(self.solarize_p.clamp(0.0, 1.0)) {
            for v in out.data_mut() {
                if *v >= 0.5 {
                    *v = 1.0 - *v;
                }
            }
        }
        (out, flipped)
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_gray(img: &mut Image) {
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let l = luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                img.set(c, y, x, l);
            }
        }
    }
}

fn color_jitter<R: Rng + ?Sized>(img: &mut Image, p: &Photometric, rng: &mut R) {
    let factor = |rng: &mut R, s: f64| if s > 0.0 { rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
    let b = factor(rng, p.brightness);
    let c = factor(rng, p.contrast);
    let s = factor(rng, p.saturation);
    let hue = if p.hue > 0.0 { rng.gen_range(-p.hue..=p.hue) } else { 0.0 };

    for v in img.data_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let (h, w) = (img.height(), img.width());
    let mean = if img.channels() == 3 {
        (0..h * w)
            .map(|i| luma(img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]))
            .sum::<f64>()
            / (h * w) as f64
    } else {
        img.data().iter().sum::<f64>() / img.data().len() as f64
    };
    for v in img.data_mut() {
        *v = (mean + c * (*v - mean)).clamp(0.0, 1.0);
    }
    if img.channels() != 3 {
        return;
    }
    let (cos, sin) = ((hue * std::f64::consts::TAU).cos(), (hue * std::f64::consts::TAU).sin());
    for y in 0..h {
        for x in 0..w {
            let (r, g, bl) = (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let l = luma(r, g, bl);
            let (r, g, bl) = (l + s * (r - l), l + s * (g - l), l + s * (bl - l));
            // Hue rotation in YIQ space.
            let yy = 0.299 * r + 0.587 * g + 0.114 * bl;
            let i = 0.596 * r - 0.274 * g - 0.322 * bl;
            let q = 0.211 * r - 0.523 * g + 0.312 * bl;
            let (i, q) = (i * cos - q * sin, i * sin + q * cos);
            let rgb = [
                yy + 0.956 * i + 0.621 * q,
                yy - 0.272 * i - 0.647 * q,
                yy - 1.106 * i + 1.703 * q,
            ];
            for (ch, v) in rgb.iter().enumerate() {
                img.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut tmp = Image::filled(c, h, w, 0.0);
    let mut out = Image::filled(c, h, w, 0.0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let xx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                        kv * img.get(ch, y, xx)
                    })
                    .sum();
                tmp.set(ch, y, x, v);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let yy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                        kv * tmp.get(ch, yy, x)
                    })
                    .sum();
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

/// View counts, resolutions and crop scales for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub global_count: usize,
    pub global_res: usize,
    pub global_scale: (f64, f64),
    pub local_count: usize,
    pub local_res: usize,
    /// Upper end `s` of the local and query crop scale range `(0.05, s)`.
    pub crop_ratio: f64,
    pub min_scale: f64,
    pub query_count: usize,
    pub patch: usize,
    pub photometric: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            global_count: 2,
            global_res: 64,
            global_scale: (0.4, 1.0),
            local_count: 0,
            local_res: 32,
            crop_ratio: 0.15,
            min_scale: 0.05,
            query_count: 10,
            patch: 8,
            photometric: true,
        }
    }
}

impl ViewConfig {
    pub fn local_scale(&self) -> (f64, f64) {
        (self.min_scale, self.crop_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        check_scale("view config (global)", self.global_scale)?;
        check_scale("view config (local/query)", self.local_scale())?;
        if self.patch == 0 || self.global_res % self.patch != 0 || self.local_res % self.patch != 0 {
            return Err(Error::Config(format!(
                "view resolutions {} and {} must be multiples of patch size {}",
                self.global_res, self.local_res, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub crop: CropSpec,
    pub flipped: bool,
}

/// All views of one source image. The query crops are shared by every
/// global view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCropBatch {
    pub globals: Vec<View>,
    pub locals: Vec<View>,
    /// `Q × C·P²` query crop pixels.
    pub queries: Tensor,
    pub query_crops: Vec<CropSpec>,
}

impl MultiCropBatch {
    pub fn view_count(&self) -> usize {
        self.globals.len() + self.locals.len()
    }
}

/// Samples global and local views with independent augmentations, plus one
/// query-crop set cut from the un-augmented source image.
pub fn build_views<R: Rng + ?Sized>(img: &Image, cfg: &ViewConfig, rng: &mut R) -> Result<MultiCropBatch> {
    cfg.validate()?;
    let size = (img.height(), img.width());
    let view = |scale, res: usize, slot: Option<usize>, rng: &mut R| -> Result<View> {
        let crop = sample_crop(size, scale, (res, res), rng)?;
        let resized = img.crop(crop.rect)?.resize_bilinear(res, res);
        let (image, flipped) = if cfg.photometric {
            Photometric::for_view(slot).apply(&resized, rng)
        } else {
            (resized, false)
        };
        Ok(View {
            image,
            crop,
            flipped,
        })
    };
    let globals = (0..cfg.global_count)
        .map(|i| view(cfg.global_scale, cfg.global_res, Some(i), rng))
        .collect::<Result<Vec<_>>>()?;
    let locals = (0..cfg.local_count)
        .map(|_| view(cfg.local_scale(), cfg.local_res, None, rng))
        .collect::<Result<Vec<_>>>()?;
    let (queries, query_crops) = sample_query_crops(img, cfg.query_count, cfg.local_scale(), cfg.patch, rng)?;
    Ok(MultiCropBatch {
        globals,
        locals,
        queries,
        query_crops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 64 * 64).map(|_| rng.gen::<f64>()).collect();
        Image::new(3, 64, 64, data).unwrap()
    }

    #[test]
    fn query_crops_respect_scale_range() {
        let img = noise_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pix, specs) = sample_query_crops(&img, 10, (0.05, 0.15), 8, &mut rng).unwrap();
        assert_eq!(pix.shape(), &[10, 192]);
        for s in &specs {
            let f = s.area_fraction((64, 64));
            assert!((0.05..=0.15).contains(&f), "{s}");
            assert!(s.rect.top + s.rect.height <= 64 && s.rect.left + s.rect.width <= 64);
        }
    }

    #[test]
    fn zero_queries_is_empty_block() {
        let img = noise_image(1);
        let (pix, specs) = sample_query_crops(&img, 0, (0.05, 0.15), 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pix.rows(), 0);
        assert!(specs.is_empty());
    }

    #[test]
    fn full_image_crop_of_patch_sized_image_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..3 * 8 * 8).map(|_| rng.gen::<f64>()).collect();
        let img = Image::new(3, 8, 8, data).unwrap();
        let spec = CropSpec {
            rect: Rect { top: 0, left: 0, height: 8, width: 8 },
            target: (8, 8),
            scale: (0.5, 1.0),
        };
        let crop = img.crop(spec.rect).unwrap().resize_bilinear(8, 8);
        assert_eq!(patchify(&crop, 8).unwrap(), patchify(&img, 8).unwrap());
    }

    #[test]
    fn bad_scale_rejected() {
        let img = noise_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_query_crops(&img, 3, (0.2, 0.1), 8, &mut rng).is_err());
        assert!(sample_query_crops(&img, 3, (0.0, 0.1), 8, &mut rng).is_err());
        assert!(sample_query_crops(&img, 3, (0.1, 0.1), 8, &mut rng).is_err());
    }

    #[test]
    fn impossible_crop_errors_after_retries() {
        // 2x2 image: no integer rectangle has an area fraction within 0.3..0.35.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_crop((2, 2), (0.3, 0.35), (1, 1), &mut rng).is_err());
    }

    #[test]
    fn views_deterministic_per_seed() {
        let img = noise_image(5);
        let cfg = ViewConfig {
            local_count: 2,
            ..ViewConfig::default()
        };
        let a = build_views(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_views(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.globals.len(), 2);
        assert_eq!(a.locals.len(), 2);
        assert_eq!(a.queries.rows(), 10);
        assert_eq!(a.globals[0].image.height(), 64);
        assert_eq!(a.locals[0].image.height(), 32);
    }

    #[test]
    fn photometric_keeps_range() {
        let img = noise_image(6);
        let p = Photometric {
            solarize_p: 1.0,
            blur_p: 1.0,
            jitter_p: 1.0,
            ..Photometric::default()
        };
        let (out, _) = p.apply(&img, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out, img);
    }
}
