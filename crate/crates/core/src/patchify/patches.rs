use super::image::Image;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Splits an image into non-overlapping `patch × patch` tiles.
///
/// Row `i` of the result is tile `i` in row-major tile order, flattened
/// channel-major (`c, y, x`), giving an `N × C·P²` matrix.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{h}x{w} is not divisible by patch size {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        data.push(img.get(ch, gy * patch + py, gx * patch + px));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Inverse of [`patchify`] for a known image geometry.
pub fn unpatchify(patches: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Image> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid("unpatchify", "geometry not divisible by patch"));
    }
    let (gh, gw) = (height / patch, width / patch);
    if patches.rows() != gh * gw || patches.cols() != channels * patch * patch {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for {channels}x{height}x{width}/{patch}", patches.shape()),
        ));
    }
    let mut img = Image::filled(channels, height, width, 0.0);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row(gy * gw + gx);
            let mut k = 0;
            for ch in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        img.set(ch, gy * patch + py, gx * patch + px, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Embeds raw patches: `z_i = x_i·E + pos_i`, with the class token prepended.
/// Returns the `(1+N) × d` context block `[cls | raw]`.
pub fn embed(g: &mut Graph, raw: Var, projector: Var, pos: Var, cls: Var) -> Result<Var> {
    let (rv, ev, pv, cv) = (g.value(raw), g.value(projector), g.value(pos), g.value(cls));
    if rv.cols() != ev.rows() || pv.rows() != rv.rows() || pv.cols() != ev.cols() || cv.shape() != [1, ev.cols()] {
        return Err(Error::shape(
            "embed",
            format!(
                "raw {:?}, projector {:?}, pos {:?}, cls {:?}",
                rv.shape(),
                ev.shape(),
                pv.shape(),
                cv.shape()
            ),
        ));
    }
    let projected = g.matmul(raw, projector)?;
    let tokens = g.add(projected, pos)?;
    g.concat_rows(&[cls, tokens])
}

/// Embeds query crops with the same projector and no positional term.
pub fn embed_queries(g: &mut Graph, crops: Var, projector: Var) -> Result<Var> {
    g.matmul(crops, projector)
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// `dst × src` matrix of 1-D bicubic resampling weights (half-pixel centres,
/// clamped borders).
fn bicubic_1d(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let s = (o as f64 + 0.5) * scale - 0.5;
        let base = s.floor();
        let t = s - base;
        for k in -1i64..=2 {
            let w = cubic_weight(t - k as f64);
            let idx = (base as i64 + k).clamp(0, src as i64 - 1) as usize;
            m[o * src + idx] += w;
        }
    }
    m
}

/// Linear map taking a `src_h × src_w` grid of positional embeddings (rows in
/// row-major grid order) to a `dst_h × dst_w` grid by separable bicubic
/// interpolation. Equal grids give the identity.
pub fn bicubic_grid_matrix(src: (usize, usize), dst: (usize, usize)) -> Tensor {
    let my = bicubic_1d(src.0, dst.0);
    let mx = bicubic_1d(src.1, dst.1);
    let (n_src, n_dst) = (src.0 * src.1, dst.0 * dst.1);
    let mut data = vec![0.0; n_dst * n_src];
    for oy in 0..dst.0 {
        for ox in 0..dst.1 {
            let row = oy * dst.1 + ox;
            for iy in 0..src.0 {
                let wy = my[oy * src.0 + iy];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..src.1 {
                    data[row * n_src + iy * src.1 + ix] = wy * mx[ox * src.1 + ix];
                }
            }
        }
    }
    Tensor::new(vec![n_dst, n_src], data).expect("consistent by construction")
}
