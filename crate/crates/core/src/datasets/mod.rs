//! Synthetic single-object images with exact labels and masks, and a loader
//! for small raster datasets stored as pixmaps plus a plain-text index.

mod io;
mod synthetic;

pub use io::{load_dir, write_dir, INDEX_FILE};
pub use synthetic::{generate, generate_one, Dataset, Mask, Sample, Shape, SyntheticSpec};
