//! Shift-and-sum refocusing: focal slices, focal stacks, and a Laplacian
//! sharpness metric for locating the in-focus slope.
//!
//! A slice at slope `s` averages every view after translating it by
//! `s * (u - u_c, v - v_c)`, with bilinear interpolation, zero padding
//! outside the frame, and per-pixel renormalization by the accumulated
//! bilinear weight so partial coverage does not darken the borders.
//!
//! Sign convention: a scene plane whose views were generated by shifting the
//! center image by `d * (u - u_c, v - v_c)` comes into focus at slope `-d`.

use crate::lightfield::{save_lfr, Image, LightField, LightFieldError};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Largest focal-stack depth accepted by [`build_stack`].
pub const MAX_STACK_SLICES: usize = 12;

#[derive(Debug, Error)]
pub enum RefocusError {
    #[error("slope {slope} shifts up to {max_shift:.1} px, exceeding the {limit} px frame")]
    SlopeTooLarge {
        slope: f64,
        max_shift: f64,
        limit: usize,
    },
    #[error("slopes must be strictly increasing")]
    UnsortedSlopes,
    #[error("a focal stack needs at least one slope")]
    EmptySlopes,
    #[error("{0} slopes exceed the maximum stack depth of {MAX_STACK_SLICES}")]
    TooManySlopes(usize),
    #[error("depth and calibration distance must be positive, got d={d}, z={z}")]
    NonPositiveInput { d: f64, z: f64 },
    #[error("image {h}x{w} is too small for a 3x3 Laplacian")]
    ImageTooSmall { h: usize, w: usize },
    #[error(transparent)]
    Field(#[from] LightFieldError),
}

/// One synthetically refocused image together with the slope it was
/// rendered at (disparity pixels per unit angular offset, signed).
#[derive(Debug, Clone, PartialEq)]
pub struct FocalSlice {
    pub slope: f64,
    pub image: Image,
}

/// Slices ordered by strictly increasing slope, all sharing the source
/// field's spatial dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalStack {
    slices: Vec<FocalSlice>,
    source_dims: (usize, usize, usize),
}

impl FocalStack {
    pub fn slices(&self) -> &[FocalSlice] {
        &self.slices
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.slope).collect()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// `(H, W, C)` of the source light field.
    pub fn source_dims(&self) -> (usize, usize, usize) {
        self.source_dims
    }
}

/// Renders one focal slice by averaging disparity-shifted views.
pub fn synthesize_slice(lf: &LightField, slope: f64) -> Result<FocalSlice, RefocusError> {
    let (h, w, c) = (lf.height(), lf.width(), lf.channels());
    let u_c = (lf.angular_cols() - 1) as f64 / 2.0;
    let v_c = (lf.angular_rows() - 1) as f64 / 2.0;
    let max_off = u_c.max(v_c);
    let max_shift = slope.abs() * max_off;
    let limit = h.min(w);
    if !slope.is_finite() || max_shift >= limit as f64 {
        return Err(RefocusError::SlopeTooLarge {
            slope,
            max_shift,
            limit,
        });
    }

    let mut acc = vec![0.0f64; h * w * c];
    let mut weight = vec![0.0f64; h * w];
    for v in 0..lf.angular_rows() {
        for u in 0..lf.angular_cols() {
            let du = u as f64 - u_c;
            let dv = v as f64 - v_c;
            let view = lf
                .extract_view(crate::lightfield::ViewCoord::new(u, v))
                .expect("grid coordinate is in range");
            accumulate_shifted(&view, slope * du, slope * dv, &mut acc, &mut weight);
        }
    }

    let mut out = vec![0.0f32; h * w * c];
    for p in 0..h * w {
        if weight[p] > 0.0 {
            for ch in 0..c {
                out[p * c + ch] = (acc[p * c + ch] / weight[p]) as f32;
            }
        }
    }
    Ok(FocalSlice {
        slope,
        image: Image::new(h, w, c, out),
    })
}

/// Adds `view` translated by `(tx, ty)` into the accumulators. Sampling is
/// bilinear with zero padding; `weight` collects the in-bounds bilinear
/// coverage per pixel.
fn accumulate_shifted(view: &Image, tx: f64, ty: f64, acc: &mut [f64], weight: &mut [f64]) {
    let (h, w, c) = (view.height(), view.width(), view.channels());
    for y in 0..h {
        let sy = y as f64 - ty;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0 = y0 as i64;
        for x in 0..w {
            let sx = x as f64 - tx;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0 = x0 as i64;
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            let p = y * w + x;
            for (cy, cx, wgt) in corners {
                if wgt == 0.0 || cy < 0 || cx < 0 || cy >= h as i64 || cx >= w as i64 {
                    continue;
                }
                let (cy, cx) = (cy as usize, cx as usize);
                weight[p] += wgt;
                for ch in 0..c {
                    acc[p * c + ch] += wgt * f64::from(view.at(cy, cx, ch));
                }
            }
        }
    }
}

/// Renders one slice per slope. Slopes must be strictly increasing and the
/// stack is capped at [`MAX_STACK_SLICES`].
pub fn build_stack(lf: &LightField, slopes: &[f64]) -> Result<FocalStack, RefocusError> {
    if slopes.is_empty() {
        return Err(RefocusError::EmptySlopes);
    }
    if slopes.len() > MAX_STACK_SLICES {
        return Err(RefocusError::TooManySlopes(slopes.len()));
    }
    if slopes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RefocusError::UnsortedSlopes);
    }
    let slices = slopes
        .iter()
        .map(|&s| synthesize_slice(lf, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FocalStack {
        slices,
        source_dims: (lf.height(), lf.width(), lf.channels()),
    })
}

/// Angular-offset magnitude at which scene depth `d` is in focus, given the
/// calibration distance `z`: `z / d`. Monotone decreasing in `d`.
pub fn slope_from_depth(d: f64, z: f64) -> Result<f64, RefocusError> {
    if !(d > 0.0) || !(z > 0.0) {
        return Err(RefocusError::NonPositiveInput { d, z });
    }
    Ok(z / d)
}

/// Variance of the 5-point discrete Laplacian over interior pixels,
/// averaged across channels. Zero for constant images; larger for images
/// with more high-frequency content.
pub fn sharpness(image: &Image) -> Result<f64, RefocusError> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if h < 3 || w < 3 {
        return Err(RefocusError::ImageTooSmall { h, w });
    }
    let count = ((h - 2) * (w - 2)) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let lap = 4.0 * f64::from(image.at(y, x, ch))
                    - f64::from(image.at(y - 1, x, ch))
                    - f64::from(image.at(y + 1, x, ch))
                    - f64::from(image.at(y, x - 1, ch))
                    - f64::from(image.at(y, x + 1, ch));
                sum += lap;
                sum_sq += lap * lap;
            }
        }
        let mean = sum / count;
        total += (sum_sq / count - mean * mean).max(0.0);
    }
    Ok(total / c as f64)
}

/// Writes each slice as a single-view LFR file (`slice_000.lfr`, ...) plus a
/// `slopes.txt` sidecar listing one slope per line. Returns the file paths,
/// sidecar last.
pub fn export_stack(stack: &FocalStack, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, RefocusError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(LightFieldError::Io)?;
    let mut paths = Vec::with_capacity(stack.len() + 1);
    let mut manifest = String::new();
    for (i, slice) in stack.slices().iter().enumerate() {
        let img = &slice.image;
        let lf = LightField::new(
            1,
            1,
            img.height(),
            img.width(),
            img.channels(),
            img.data().to_vec(),
        )?;
        let path = dir.join(format!("slice_{i:03}.lfr"));
        save_lfr(&lf, &path)?;
        paths.push(path);
        writeln!(manifest, "{}", slice.slope).expect("writing to a String cannot fail");
    }
    let sidecar = dir.join("slopes.txt");
    std::fs::write(&sidecar, manifest).map_err(LightFieldError::Io)?;
    paths.push(sidecar);
    Ok(paths)
}
