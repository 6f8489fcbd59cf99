use std::fmt::Write as _;
use std::path::Path;

use super::synthetic::{Dataset, Mask, Sample};
use crate::error::{Error, Result};
use crate::patchify::Image;

pub const INDEX_FILE: &str = "index.txt";

/// Writes `img_NNNNN.ppm`, `mask_NNNNN.pgm` and an index with one
/// `image label mask` line per sample, paths relative to `dir`.
pub fn write_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = format!("# image label mask (classes={})\n", ds.classes);
    for (i, s) in ds.samples.iter().enumerate() {
        let (img, mask) = (format!("img_{i:05}.ppm"), format!("mask_{i:05}.pgm"));
        s.image.write_pnm(&dir.join(&img))?;
        s.mask.to_image().write_pnm(&dir.join(&mask))?;
        let _ = writeln!(index, "{img} {} {mask}", s.label);
    }
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`write_dir`] or laid out by hand. The mask
/// column may be `-` when no mask exists, in which case an empty mask is used.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad("expected `image label mask`"));
        }
        let image = Image::read_pnm(&dir.join(fields[0]))?;
        let label: usize = fields[1].parse().map_err(|_| bad("label is not a non-negative integer"))?;
        let mask = if fields[2] == "-" {
            Mask {
                height: image.height(),
                width: image.width(),
                bits: vec![false; image.height() * image.width()],
            }
        } else {
            Mask::from_image(&Image::read_pnm(&dir.join(fields[2]))?)?
        };
        if (mask.height, mask.width) != (image.height(), image.width()) {
            return Err(bad("mask size differs from image size"));
        }
        samples.push(Sample { image, label, mask });
    }
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Ok(Dataset { samples, classes })
}
