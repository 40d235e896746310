//! Structural similarity over image patches, with the analytic gradient of
//! the windowed mean with respect to a patch's subpixel center.
//!
//! The metric is the two-term stabilized form
//!
//! ```text
//! SSIM(x, y) = (2 mu_x mu_y + c1) / (mu_x^2 + mu_y^2 + c1)
//!            * (2 cov_xy + c2)    / (var_x + var_y + c2)
//! ```
//!
//! with `c1 = (255 k1)^2`, `c2 = (255 k2)^2`. Multi-channel patches score
//! each channel independently and average. [`ssim_map`] slides a square
//! window at stride 1 over the patch pair and averages all fully contained
//! window scores; an 8x8 input therefore degenerates to a single
//! [`ssim_window`] evaluation.

use crate::image::{Image, Patch};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsimError {
    #[error("patch shapes differ: {0}x{1}x{2} vs {3}x{4}x{5}")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize),
    #[error("patch {0}x{1} is smaller than the {2}x{2} window")]
    PatchSmallerThanWindow(usize, usize, usize),
    #[error("window around ({0:.2}, {1:.2}) leaves the image")]
    WindowOutOfBounds(f64, f64),
}

/// Constants of the stabilized SSIM and the sliding-window side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    /// Side of the sliding window used by [`ssim_map`].
    pub window: usize,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            window: 8,
            dynamic_range: 255.0,
        }
    }
}

impl SsimConfig {
    /// Same constants with the window set to cover a whole `side`-square
    /// patch, turning [`ssim_map`] into a single whole-patch evaluation.
    pub fn whole_patch(side: usize) -> Self {
        Self {
            window: side,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.dynamic_range * self.k1).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.dynamic_range * self.k2).powi(2)
    }
}

/// First- and second-order window statistics of a patch pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimStats {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl SsimStats {
    pub fn from_slices(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mu_x = xs.iter().sum::<f64>() / n;
        let mu_y = ys.iter().sum::<f64>() / n;
        let mut var_x = 0.0;
        let mut var_y = 0.0;
        let mut cov_xy = 0.0;
        for (&x, &y) in xs.iter().zip(ys) {
            var_x += (x - mu_x) * (x - mu_x);
            var_y += (y - mu_y) * (y - mu_y);
            cov_xy += (x - mu_x) * (y - mu_y);
        }
        Self {
            mu_x,
            mu_y,
            var_x: (var_x / n).max(0.0),
            var_y: (var_y / n).max(0.0),
            cov_xy: cov_xy / n,
        }
    }

    pub fn ssim(&self, cfg: &SsimConfig) -> f64 {
        let c1 = cfg.c1();
        let c2 = cfg.c2();
        let lum = (2.0 * self.mu_x * self.mu_y + c1) / (self.mu_x * self.mu_x + self.mu_y * self.mu_y + c1);
        let st = (2.0 * self.cov_xy + c2) / (self.var_x + self.var_y + c2);
        lum * st
    }
}

/// Single-window SSIM over two whole patches of identical shape, averaged
/// across channels.
pub fn ssim_window(x: &Patch, y: &Patch, cfg: &SsimConfig) -> Result<f64, SsimError> {
    check_shapes(x, y)?;
    let c = x.channels();
    let mut acc = 0.0;
    let mut xs = Vec::with_capacity(x.width() * x.height());
    let mut ys = Vec::with_capacity(x.width() * x.height());
    for ch in 0..c {
        xs.clear();
        ys.clear();
        for py in 0..x.height() {
            for px in 0..x.width() {
                xs.push(x.get(px, py, ch));
                ys.push(y.get(px, py, ch));
            }
        }
        acc += SsimStats::from_slices(&xs, &ys).ssim(cfg);
    }
    Ok(acc / c as f64)
}

/// Mean SSIM over every fully contained stride-1 window position.
pub fn ssim_map(x: &Patch, y: &Patch, cfg: &SsimConfig) -> Result<f64, SsimError> {
    check_shapes(x, y)?;
    if x.width() < cfg.window || x.height() < cfg.window {
        return Err(SsimError::PatchSmallerThanWindow(
            x.width(),
            x.height(),
            cfg.window,
        ));
    }
    let mut total = 0.0;
    for ch in 0..x.channels() {
        total += channel_map(x, y, ch, cfg).0;
    }
    Ok(total / x.channels() as f64)
}

/// Gradient of `ssim_map(ref_patch, patch_at(img, center))` with respect to
/// the subpixel center, using bilinear sampling for the moving patch.
pub fn ssim_grad(
    ref_patch: &Patch,
    img: &Image,
    center: (f64, f64),
    cfg: &SsimConfig,
) -> Result<[f64; 2], SsimError> {
    let (_, grad) = ssim_map_at(ref_patch, img, center, cfg)?;
    Ok(grad)
}

/// SSIM-map value and center gradient in one pass; the moving patch is
/// sampled from `img` around `center` with the same shape as `ref_patch`.
pub fn ssim_map_at(
    ref_patch: &Patch,
    img: &Image,
    center: (f64, f64),
    cfg: &SsimConfig,
) -> Result<(f64, [f64; 2]), SsimError> {
    if ref_patch.width() != ref_patch.height() {
        return Err(SsimError::ShapeMismatch(
            ref_patch.width(),
            ref_patch.height(),
            ref_patch.channels(),
            ref_patch.height(),
            ref_patch.height(),
            ref_patch.channels(),
        ));
    }
    let side = ref_patch.width();
    if side < cfg.window {
        return Err(SsimError::PatchSmallerThanWindow(side, side, cfg.window));
    }
    let (moving, grads) = img
        .patch_at_with_grad(center.0, center.1, side, true)
        .map_err(|_| SsimError::WindowOutOfBounds(center.0, center.1))?;
    if moving.channels() != ref_patch.channels() {
        return Err(SsimError::ShapeMismatch(
            ref_patch.width(),
            ref_patch.height(),
            ref_patch.channels(),
            moving.width(),
            moving.height(),
            moving.channels(),
        ));
    }
    let grads = grads.expect("gradients requested");
    let channels = ref_patch.channels();
    let mut value = 0.0;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for ch in 0..channels {
        let (v, dss) = channel_map(ref_patch, &moving, ch, cfg);
        value += v;
        // chain rule through the bilinear sampler
        for (idx, &d) in dss.iter().enumerate() {
            let (dx, dy) = grads.at(idx * channels + ch);
            gx += d * dx;
            gy += d * dy;
        }
    }
    let n = channels as f64;
    Ok((value / n, [gx / n, gy / n]))
}

fn check_shapes(x: &Patch, y: &Patch) -> Result<(), SsimError> {
    if !x.same_shape(y) {
        return Err(SsimError::ShapeMismatch(
            x.width(),
            x.height(),
            x.channels(),
            y.width(),
            y.height(),
            y.channels(),
        ));
    }
    Ok(())
}

/// Windowed mean SSIM of one channel plus d(mean)/d(y_k) for every pixel of
/// the moving patch.
///
/// Each window's derivative with respect to a contained moving pixel is
/// affine in the pixel pair, `c_w + d_w x_k + e_w y_k`, so the per-pixel sum
/// over covering windows is accumulated with three rectangle scatter-adds
/// resolved by prefix sums.
fn channel_map(x: &Patch, y: &Patch, ch: usize, cfg: &SsimConfig) -> (f64, Vec<f64>) {
    let side = x.width();
    let rows = x.height();
    let win = cfg.window;
    let wcols = side - win + 1;
    let wrows = rows - win + 1;
    let n = (win * win) as f64;
    let nw = (wcols * wrows) as f64;
    let c1 = cfg.c1();
    let c2 = cfg.c2();

    // integral images over the channel
    let iw = side + 1;
    let mut sx = vec![0.0; iw * (rows + 1)];
    let mut sy = vec![0.0; iw * (rows + 1)];
    let mut sxx = vec![0.0; iw * (rows + 1)];
    let mut syy = vec![0.0; iw * (rows + 1)];
    let mut sxy = vec![0.0; iw * (rows + 1)];
    for py in 0..rows {
        for px in 0..side {
            let xv = x.get(px, py, ch);
            let yv = y.get(px, py, ch);
            let i = (py + 1) * iw + (px + 1);
            let up = py * iw + (px + 1);
            let left = (py + 1) * iw + px;
            let diag = py * iw + px;
            sx[i] = xv + sx[up] + sx[left] - sx[diag];
            sy[i] = yv + sy[up] + sy[left] - sy[diag];
            sxx[i] = xv * xv + sxx[up] + sxx[left] - sxx[diag];
            syy[i] = yv * yv + syy[up] + syy[left] - syy[diag];
            sxy[i] = xv * yv + sxy[up] + sxy[left] - sxy[diag];
        }
    }
    let rect = |s: &[f64], x0: usize, y0: usize| -> f64 {
        s[(y0 + win) * iw + (x0 + win)] - s[y0 * iw + (x0 + win)] - s[(y0 + win) * iw + x0]
            + s[y0 * iw + x0]
    };

    // scatter-add accumulators for the affine coefficients, padded with a
    // leading zero row and column for the prefix sums
    let pw = side + 2;
    let mut acc_c = vec![0.0; pw * (rows + 2)];
    let mut acc_d = vec![0.0; pw * (rows + 2)];
    let mut acc_e = vec![0.0; pw * (rows + 2)];
    let scatter = |acc: &mut [f64], x0: usize, y0: usize, v: f64| {
        acc[(y0 + 1) * pw + (x0 + 1)] += v;
        acc[(y0 + 1) * pw + (x0 + 1 + win)] -= v;
        acc[(y0 + 1 + win) * pw + (x0 + 1)] -= v;
        acc[(y0 + 1 + win) * pw + (x0 + 1 + win)] += v;
    };

    let mut total = 0.0;
    for wy in 0..wrows {
        for wx in 0..wcols {
            let mx = rect(&sx, wx, wy) / n;
            let my = rect(&sy, wx, wy) / n;
            let vx = (rect(&sxx, wx, wy) / n - mx * mx).max(0.0);
            let vy = (rect(&syy, wx, wy) / n - my * my).max(0.0);
            let cxy = rect(&sxy, wx, wy) / n - mx * my;
            let da = mx * mx + my * my + c1;
            let db = vx + vy + c2;
            let lum = (2.0 * mx * my + c1) / da;
            let st = (2.0 * cxy + c2) / db;
            total += lum * st;

            // d(lum)/dmu_y times 1/n, window-constant
            let dlum_dmy = (2.0 * mx * da - (2.0 * mx * my + c1) * 2.0 * my) / (da * da);
            // d(st)/dy_k = [2(x_k - mx) db - (2 cxy + c2) 2 (y_k - my)] / db^2 / n
            let cw = dlum_dmy * st / n
                + (lum / (db * db)) * (-2.0 * mx * db + (2.0 * cxy + c2) * 2.0 * my) / n;
            let dw = (lum / (db * db)) * (2.0 * db) / n;
            let ew = (lum / (db * db)) * (-(2.0 * cxy + c2) * 2.0) / n;
            scatter(&mut acc_c, wx, wy, cw);
            scatter(&mut acc_d, wx, wy, dw);
            scatter(&mut acc_e, wx, wy, ew);
        }
    }

    // prefix-sum the scatters, then evaluate the affine form per pixel
    for acc in [&mut acc_c, &mut acc_d, &mut acc_e] {
        for py in 0..rows {
            for px in 0..side {
                let i = (py + 1) * iw + (px + 1);
                acc[i] += acc[py * iw + (px + 1)] + acc[(py + 1) * iw + px] - acc[py * iw + px];
            }
        }
    }
    let mut dss = vec![0.0; side * rows];
    for py in 0..rows {
        for px in 0..side {
            let i = (py + 1) * iw + (px + 1);
            dss[py * side + px] =
                (acc_c[i] + acc_d[i] * x.get(px, py, ch) + acc_e[i] * y.get(px, py, ch)) / nw;
        }
    }
    (total / nw, dss)
}
