//! Image front-end: patch extraction, patch embedding, and resizing of the
//! learned patch-position table.

use serde::{Deserialize, Serialize};

use super::Linear;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// An `height × width × channels` raster, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }
}

/// Cuts each image into non-overlapping `patch × patch` tiles, row-major over
/// the tile grid, flattening each tile as `(row, col, channel)`.
///
/// Returns `(batch, tiles, patch·patch·channels)`.
pub fn patchify<T: Element>(images: &[Image], patch: usize) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("patchify: no images".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    if let Some(bad) = images
        .iter()
        .find(|im| (im.height, im.width, im.channels) != (h, w, c))
    {
        return Err(Error::Shape(format!(
            "mixed image sizes in batch: {h}×{w}×{c} and {}×{}×{}",
            bad.height, bad.width, bad.channels
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let per_patch = patch * patch * c;
    let mut data = Vec::with_capacity(images.len() * gh * gw * per_patch);
    for im in images {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let row = (py * patch + y) * w + px * patch;
                    data.extend(
                        im.data[row * c..(row + patch) * c]
                            .iter()
                            .map(|&v| T::lit(v as f64)),
                    );
                }
            }
        }
    }
    Tensor::new(vec![images.len(), gh * gw, per_patch], data)
}

/// Learned parameters of the patch front-end.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedParams {
    pub proj: Linear,
    /// `(d)` embedding of the prepended [CLS] slot.
    pub cls: Var,
    /// `(1 + tiles, d)`, row 0 belongs to [CLS].
    pub pos: Var,
}

/// Projects patches, prepends [CLS], adds positions: `(batch, 1 + tiles, d)`.
pub fn patch_embed<T: Element>(
    tape: &mut Tape<T>,
    images: &[Image],
    patch: usize,
    params: &PatchEmbedParams,
) -> Result<Var> {
    let patches = patchify::<T>(images, patch)?;
    let (batch, tiles) = (patches.shape()[0], patches.shape()[1]);
    let d = tape.shape(params.cls)[0];
    let pos_rows = tape.shape(params.pos)[0];
    if pos_rows != tiles + 1 {
        return Err(Error::Shape(format!(
            "position table has {pos_rows} rows but the image yields {tiles} patches plus [CLS]"
        )));
    }
    let patches = tape.constant(patches);
    let x = params.proj.forward(tape, patches)?;
    let cls = tape.reshape(params.cls, &[1, 1, d])?;
    let cls = tape.expand(cls, &[batch, 1, d])?;
    let x = tape.concat(&[cls, x], 1)?;
    let pos = tape.reshape(params.pos, &[1, tiles + 1, d])?;
    let pos = tape.expand(pos, &[batch, tiles + 1, d])?;
    tape.add(x, pos)
}

/// Bilinearly resamples a `(g·g, d)` grid of position vectors to
/// `(new_g·new_g, d)`. Grid corners map onto grid corners.
pub fn interpolate_pos_embed(grid: &Tensor<f32>, new_g: usize) -> Result<Tensor<f32>> {
    let [cells, d] = grid.shape() else {
        return Err(Error::Shape(format!(
            "position grid must be rank 2, got {:?}",
            grid.shape()
        )));
    };
    let (cells, d) = (*cells, *d);
    let g = (cells as f64).sqrt().round() as usize;
    if g * g != cells {
        return Err(Error::Shape(format!(
            "{cells} patch positions do not form a square grid"
        )));
    }
    if new_g == 0 {
        return Err(Error::Invalid("target grid must be non-empty".into()));
    }
    if new_g == g {
        return Ok(grid.clone());
    }
    let src = |i: usize| -> (usize, usize, f64) {
        if new_g == 1 || g == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (g - 1) as f64 / (new_g - 1) as f64;
        let i0 = (s.floor() as usize).min(g - 1);
        let i1 = (i0 + 1).min(g - 1);
        (i0, i1, s - i0 as f64)
    };
    let v = grid.data();
    let mut out = Vec::with_capacity(new_g * new_g * d);
    for oy in 0..new_g {
        let (y0, y1, ty) = src(oy);
        for ox in 0..new_g {
            let (x0, x1, tx) = src(ox);
            for k in 0..d {
                let at = |y: usize, x: usize| v[(y * g + x) * d + k] as f64;
                let top = (1.0 - tx) * at(y0, x0) + tx * at(y0, x1);
                let bottom = (1.0 - tx) * at(y1, x0) + tx * at(y1, x1);
                out.push(((1.0 - ty) * top + ty * bottom) as f32);
            }
        }
    }
    Tensor::new(vec![new_g * new_g, d], out)
}

/// As [`interpolate_pos_embed`] on a table whose row 0 is the [CLS] position,
/// which is carried over unchanged.
pub fn interpolate_pos_table(table: &Tensor<f32>, new_g: usize) -> Result<Tensor<f32>> {
    let [rows, d] = table.shape() else {
        return Err(Error::Shape(format!(
            "position table must be rank 2, got {:?}",
            table.shape()
        )));
    };
    let (rows, d) = (*rows, *d);
    if rows < 2 {
        return Err(Error::Shape("position table has no patch rows".into()));
    }
    let grid = Tensor::new(vec![rows - 1, d], table.data()[d..].to_vec())?;
    let resized = interpolate_pos_embed(&grid, new_g)?;
    let mut data = table.data()[..d].to_vec();
    data.extend_from_slice(resized.data());
    Tensor::new(vec![new_g * new_g + 1, d], data)
}
