//! Images to token inputs: patch tiling, query crops, multi-crop views and
//! view accounting.

mod accounting;
mod image;
mod patches;
mod views;

pub use accounting::{effective_epoch_ratio, AccountingConfig};
pub use image::{Image, Rect};
pub use patches::{bicubic_grid_matrix, embed, embed_queries, patchify, unpatchify};
pub use views::{
    build_views, sample_crop, sample_query_crops, CropSpec, MultiCropBatch, Photometric, View,
    ViewConfig, CROP_RETRIES,
};
