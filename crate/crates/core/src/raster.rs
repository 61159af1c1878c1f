//! Grayscale rasters, fit-inside resizing and PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Full-resolution target box used before patch sampling, as (height, width).
pub const TARGET_BOX: (usize, usize) = (1375, 750);

/// Intensity raster with every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage {
    pixels: Array2<f32>,
}

impl GrayscaleImage {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("image must be nonempty, got {h}x{w}")));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }
}

/// Output dimensions of the fit-inside rule: the scale is
/// `min(target_h / h, target_w / w)` applied to both axes.
pub fn fit_inside_dims(dims: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = dims;
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot resize a zero-sized image"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid("resize target must be nonzero"));
    }
    let scale = (target.0 as f64 / h as f64).min(target.1 as f64 / w as f64);
    let oh = ((h as f64 * scale).round() as usize).clamp(1, target.0);
    let ow = ((w as f64 * scale).round() as usize).clamp(1, target.1);
    Ok((oh, ow))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: ArrayView2<'_, f32>, out_dims: (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    let (oh, ow) = out_dims;
    if (oh, ow) == (h, w) {
        return src.to_owned();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let axis = |o: usize, s: f64, n: usize| {
        let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (c - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..ow).map(|x| axis(x, sx, w)).collect();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (y0, y1, fy) = axis(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

/// Resize so the image fits inside `target` with its aspect ratio kept.
pub fn resize_to_target(image: &GrayscaleImage, target: (usize, usize)) -> Result<GrayscaleImage> {
    let dims = fit_inside_dims(image.dims(), target)?;
    GrayscaleImage::new(resize_bilinear(image.view(), dims))
}

/// Read an 8- or 16-bit grayscale PNG, normalising by the bit-depth maximum.
pub fn load_png(path: &Path) -> Result<GrayscaleImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => to_array(&buf, 255.0),
        DynamicImage::ImageLuma16(buf) => to_array(&buf, 65535.0),
        other => to_array(&other.to_luma16(), 65535.0),
    };
    GrayscaleImage::new(pixels)
}

fn to_array<P>(buf: &ImageBuffer<Luma<P>, Vec<P>>, max: f32) -> Array2<f32>
where
    P: image::Primitive + Into<f32>,
    Luma<P>: image::Pixel<Subpixel = P>,
{
    let (w, h) = buf.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        buf.get_pixel(x as u32, y as u32)[0].into() / max
    })
}

/// Write a 16-bit grayscale PNG.
pub fn save_png16(path: &Path, pixels: ArrayView2<'_, f32>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([(pixels[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Write an 8-bit grayscale PNG.
pub fn save_png8(path: &Path, pixels: ArrayView2<'_, f32>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([(pixels[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Read a binary mask PNG; values at or above half scale become 1.
pub fn load_mask_png(path: &Path) -> Result<Array2<f32>> {
    let img = load_png(path)?;
    Ok(img.into_pixels().mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Write a binary mask as an 8-bit PNG with values {0, 255}.
pub fn save_mask_png(path: &Path, mask: ArrayView2<'_, f32>) -> Result<()> {
    save_png8(path, mask.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }).view())
}
