//! Multi-channel image storage with bilinear subpixel access.
//!
//! Intensities are `f64` in `[0, 255]` regardless of the source bit depth so
//! that the SSIM constants (which assume an 8-bit dynamic range) apply
//! uniformly. Pixel `(x, y)` addresses column `x` of row `y`; subpixel
//! coordinates interpolate bilinearly between the four surrounding centers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height}x{channels} are invalid")]
    BadDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("pixel data length {got} does not match {want}")]
    BadDataLength { got: usize, want: usize },
    #[error("patch at center ({cx:.2}, {cy:.2}) with side {side} leaves the image")]
    PatchOutOfBounds { cx: f64, cy: f64, side: usize },
    #[error("rectangle [{x0}, {x1})x[{y0}, {y1}) is outside the image or empty")]
    RectOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
}

/// Row-major, channel-interleaved image with intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::BadDimensions {
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        })
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        let mut img = Self::new(width, height, channels)?;
        if data.len() != img.data.len() {
            return Err(ImageError::BadDataLength {
                got: data.len(),
                want: img.data.len(),
            });
        }
        img.data = data;
        Ok(img)
    }

    pub fn from_u8(
        width: usize,
        height: usize,
        channels: usize,
        data: &[u8],
    ) -> Result<Self, ImageError> {
        let floats = data.iter().map(|&b| b as f64).collect();
        Self::from_data(width, height, channels, floats)
    }

    /// Fill from a per-pixel closure returning one value per channel.
    pub fn fill_with(&mut self, mut f: impl FnMut(usize, usize, usize) -> f64) {
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let v = f(x, y, c);
                    self.data[(y * self.width + x) * self.channels + c] = v;
                }
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample of one channel at a subpixel location. The location
    /// must satisfy `0 <= x <= width-1` and `0 <= y <= height-1`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let (v, _, _) = self.sample_with_grad(x, y, c);
        v
    }

    /// Bilinear sample plus its spatial derivative `(value, d/dx, d/dy)`.
    #[inline]
    pub fn sample_with_grad(&self, x: f64, y: f64, c: usize) -> (f64, f64, f64) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0, c);
        let v10 = self.get(x1, y0, c);
        let v01 = self.get(x0, y1, c);
        let v11 = self.get(x1, y1, c);
        let top = v00 + (v10 - v00) * fx;
        let bot = v01 + (v11 - v01) * fx;
        let val = top + (bot - top) * fy;
        let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        (val, dx, dy)
    }

    /// Integer-rect crop, right-exclusive. All channels are kept.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Patch, ImageError> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(ImageError::RectOutOfBounds { x0, y0, x1, y1 });
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut pixels = Vec::with_capacity(w * h * self.channels);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..self.channels {
                    pixels.push(self.get(x, y, c));
                }
            }
        }
        Ok(Patch {
            width: w,
            height: h,
            channels: self.channels,
            origin: (x0 as f64, y0 as f64),
            pixels,
        })
    }

    /// Bilinear resize to the requested dimensions.
    pub fn resize_patch(patch: &Patch, width: usize, height: usize) -> Patch {
        let mut pixels = vec![0.0; width * height * patch.channels];
        let sx = if width > 1 {
            (patch.width - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let sy = if height > 1 {
            (patch.height - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        for y in 0..height {
            for x in 0..width {
                let u = x as f64 * sx;
                let v = y as f64 * sy;
                let x0 = (u.floor() as usize).min(patch.width - 1);
                let y0 = (v.floor() as usize).min(patch.height - 1);
                let x1 = (x0 + 1).min(patch.width - 1);
                let y1 = (y0 + 1).min(patch.height - 1);
                let fx = u - x0 as f64;
                let fy = v - y0 as f64;
                for c in 0..patch.channels {
                    let v00 = patch.get(x0, y0, c);
                    let v10 = patch.get(x1, y0, c);
                    let v01 = patch.get(x0, y1, c);
                    let v11 = patch.get(x1, y1, c);
                    let top = v00 + (v10 - v00) * fx;
                    let bot = v01 + (v11 - v01) * fx;
                    pixels[(y * width + x) * patch.channels + c] = top + (bot - top) * fy;
                }
            }
        }
        Patch {
            width,
            height,
            channels: patch.channels,
            origin: patch.origin,
            pixels,
        }
    }

    /// Extract the `side`-square patch whose grid is `center + (k - side/2)`
    /// for `k = 0..side` in each axis; subpixel centers are sampled
    /// bilinearly. Errors if any sample would leave the image.
    pub fn patch_at(&self, cx: f64, cy: f64, side: usize) -> Result<Patch, ImageError> {
        let (p, _) = self.patch_at_with_grad(cx, cy, side, false)?;
        Ok(p)
    }

    /// As [`Image::patch_at`], optionally returning per-pixel spatial
    /// gradients of the sampled values with respect to the center location.
    pub fn patch_at_with_grad(
        &self,
        cx: f64,
        cy: f64,
        side: usize,
        with_grad: bool,
    ) -> Result<(Patch, Option<PatchGrad>), ImageError> {
        let half = (side / 2) as f64;
        let lo_x = cx - half;
        let lo_y = cy - half;
        let hi_x = cx - half + (side - 1) as f64;
        let hi_y = cy - half + (side - 1) as f64;
        if lo_x < 0.0
            || lo_y < 0.0
            || hi_x > (self.width - 1) as f64
            || hi_y > (self.height - 1) as f64
        {
            return Err(ImageError::PatchOutOfBounds { cx, cy, side });
        }
        let mut pixels = Vec::with_capacity(side * side * self.channels);
        let mut grads = if with_grad {
            Vec::with_capacity(side * side * self.channels * 2)
        } else {
            Vec::new()
        };
        for ky in 0..side {
            let y = lo_y + ky as f64;
            for kx in 0..side {
                let x = lo_x + kx as f64;
                for c in 0..self.channels {
                    let (v, dx, dy) = self.sample_with_grad(x, y, c);
                    pixels.push(v);
                    if with_grad {
                        grads.push(dx);
                        grads.push(dy);
                    }
                }
            }
        }
        let patch = Patch {
            width: side,
            height: side,
            channels: self.channels,
            origin: (lo_x, lo_y),
            pixels,
        };
        let grad = with_grad.then_some(PatchGrad { grads });
        Ok((patch, grad))
    }

    /// Inclusive range of centers for which a `side`-square patch stays
    /// inside the image, or `None` if no center fits.
    pub fn feasible_center_box(&self, side: usize) -> Option<(f64, f64, f64, f64)> {
        let half = (side / 2) as f64;
        let lo = half;
        let hi_x = (self.width - 1) as f64 - ((side - 1) as f64 - half);
        let hi_y = (self.height - 1) as f64 - ((side - 1) as f64 - half);
        (hi_x >= lo && hi_y >= lo).then_some((lo, lo, hi_x, hi_y))
    }
}

/// A rectangular sub-image with its origin in the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    width: usize,
    height: usize,
    channels: usize,
    /// Source-image coordinates of pixel (0, 0) of this patch.
    pub origin: (f64, f64),
    pixels: Vec<f64>,
}

impl Patch {
    pub fn from_pixels(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::BadDimensions {
                width,
                height,
                channels,
            });
        }
        if pixels.len() != width * height * channels {
            return Err(ImageError::BadDataLength {
                got: pixels.len(),
                want: width * height * channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            origin: (0.0, 0.0),
            pixels,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::from_pixels(width, height, channels, vec![value; width * height * channels])
            .expect("constant patch dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Patch) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Per-pixel spatial gradients of a sampled patch, interleaved as
/// `(d/dcx, d/dcy)` per pixel per channel.
#[derive(Debug, Clone)]
pub struct PatchGrad {
    grads: Vec<f64>,
}

impl PatchGrad {
    #[inline]
    pub fn at(&self, idx: usize) -> (f64, f64) {
        (self.grads[2 * idx], self.grads[2 * idx + 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image() -> Image {
        let mut img = Image::new(16, 12, 1).unwrap();
        img.fill_with(|x, y, _| (x as f64) * 3.0 + (y as f64) * 5.0);
        img
    }

    #[test]
    fn bilinear_matches_grid_at_integers() {
        let img = ramp_image();
        assert_eq!(img.sample(4.0, 7.0, 0), 4.0 * 3.0 + 7.0 * 5.0);
    }

    #[test]
    fn bilinear_interpolates_linearly() {
        let img = ramp_image();
        let v = img.sample(4.5, 7.25, 0);
        assert!((v - (4.5 * 3.0 + 7.25 * 5.0)).abs() < 1e-12);
        let (_, dx, dy) = img.sample_with_grad(4.5, 7.25, 0);
        assert!((dx - 3.0).abs() < 1e-12);
        assert!((dy - 5.0).abs() < 1e-12);
    }

    #[test]
    fn patch_at_integer_center_copies_pixels() {
        let img = ramp_image();
        let p = img.patch_at(8.0, 6.0, 4).unwrap();
        assert_eq!(p.origin, (6.0, 4.0));
        assert_eq!(p.get(0, 0, 0), img.get(6, 4, 0));
        assert_eq!(p.get(3, 3, 0), img.get(9, 7, 0));
    }

    #[test]
    fn patch_out_of_bounds_is_an_error() {
        let img = ramp_image();
        assert!(img.patch_at(1.0, 6.0, 8).is_err());
        assert!(img.patch_at(8.0, 11.5, 4).is_err());
    }

    #[test]
    fn feasible_box_roundtrip() {
        let img = ramp_image();
        let (lx, ly, hx, hy) = img.feasible_center_box(4).unwrap();
        assert!(img.patch_at(lx, ly, 4).is_ok());
        assert!(img.patch_at(hx, hy, 4).is_ok());
        assert!(img.patch_at(hx + 0.01, hy, 4).is_err());
    }

    #[test]
    fn resize_preserves_constant_patches() {
        let p = Patch::constant(5, 5, 3, 42.0);
        let r = Image::resize_patch(&p, 9, 7);
        assert!(r.pixels().iter().all(|&v| (v - 42.0).abs() < 1e-12));
    }
}
