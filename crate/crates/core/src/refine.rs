//! Keypoint correspondence refinement: bounded maximization of local SSIM
//! around each raw pair via projected gradient descent.
//!
//! For a correspondence `(p_l, p_f)` the loss is
//! `L = 1 - SSIM(phi_leader(p_l), phi_follower(p_f))` over square patches of
//! side [`RefineConfig::patch`]. The leader point stays frozen; the follower
//! point takes steps `p <- p - eta * step_scale * grad L`, each iterate
//! clamped to the feasibility box (the `|p - p_f0|_inf < region` constraint
//! intersected with the image interior). The best-loss iterate seen is
//! returned, so the output never scores worse than the input.

use crate::image::Image;
use crate::ssim::{ssim_map_at, SsimConfig, SsimError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("leader patch at ({0:.1}, {1:.1}) leaves the image")]
    LeaderPatchOutOfBounds(f64, f64),
    #[error(transparent)]
    Ssim(#[from] SsimError),
    #[error("empty correspondence list")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Side of the comparison patches.
    pub patch: usize,
    /// Half-width of the infinity-norm constraint box around the initial
    /// follower point.
    pub region: f64,
    /// Learning rate of the iterative update.
    pub eta: f64,
    /// Converts the dimensionless SSIM slope into a pixel-unit step; the
    /// update is `p - eta * step_scale * grad`.
    pub step_scale: f64,
    pub max_iter: usize,
    /// Stop once the post-clamp step falls under this many pixels.
    pub step_tol: f64,
    pub ssim: SsimConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            region: 32.0,
            eta: 0.003,
            step_scale: 6000.0,
            max_iter: 100,
            step_tol: 1e-4,
            // whole-patch evaluation: one window spanning the 32x32 patch
            ssim: SsimConfig::whole_patch(32),
        }
    }
}

/// A raw keypoint correspondence between the leader and follower views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Association index this pair belongs to.
    pub person: usize,
    /// Anatomy slot 0..17.
    pub slot: usize,
    /// Leader pixel, frozen during refinement.
    pub p_l: [f64; 2],
    /// Follower pixel, the refined quantity.
    pub p_f: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineFlag {
    /// Refinement ran normally.
    Refined,
    /// No feasible window position existed; the input was returned unchanged.
    InfeasibleWindow,
}

/// A refined correspondence with its optimization record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedCorrespondence {
    pub person: usize,
    pub slot: usize,
    pub p_l: [f64; 2],
    pub p_f0: [f64; 2],
    pub p_f: [f64; 2],
    pub loss0: f64,
    pub loss: f64,
    pub iters: usize,
    pub flag: RefineFlag,
}

/// The correspondence loss `1 - ssim_map(phi_l(p_l), phi_f(p_f))`.
pub fn refine_loss(
    img_leader: &Image,
    img_follower: &Image,
    c: &Correspondence,
    cfg: &RefineConfig,
) -> Result<f64, RefineError> {
    let leader = img_leader
        .patch_at(c.p_l[0], c.p_l[1], cfg.patch)
        .map_err(|_| RefineError::LeaderPatchOutOfBounds(c.p_l[0], c.p_l[1]))?;
    let (value, _) = ssim_map_at(&leader, img_follower, (c.p_f[0], c.p_f[1]), &cfg.ssim)?;
    Ok(1.0 - value)
}

/// Refine one correspondence. See the module docs for the update rule.
pub fn refine_one(
    img_leader: &Image,
    img_follower: &Image,
    c: &Correspondence,
    cfg: &RefineConfig,
) -> Result<RefinedCorrespondence, RefineError> {
    let leader = img_leader
        .patch_at(c.p_l[0], c.p_l[1], cfg.patch)
        .map_err(|_| RefineError::LeaderPatchOutOfBounds(c.p_l[0], c.p_l[1]))?;

    let p0 = c.p_f;
    // strict |p - p0|_inf < region, backed off by an epsilon
    let eps = 1e-6;
    let half = cfg.region - eps;
    let Some((ix0, iy0, ix1, iy1)) = img_follower.feasible_center_box(cfg.patch) else {
        return Ok(infeasible(c));
    };
    let bx0 = (p0[0] - half).max(ix0);
    let bx1 = (p0[0] + half).min(ix1);
    let by0 = (p0[1] - half).max(iy0);
    let by1 = (p0[1] + half).min(iy1);
    if bx0 > bx1 || by0 > by1 {
        return Ok(infeasible(c));
    }

    let clamp = |p: [f64; 2]| [p[0].clamp(bx0, bx1), p[1].clamp(by0, by1)];
    let mut p = clamp(p0);
    let step = cfg.eta * cfg.step_scale;

    let (v0, mut grad) = ssim_map_at(&leader, img_follower, (p[0], p[1]), &cfg.ssim)?;
    let loss0 = 1.0 - v0;
    let mut best = (loss0, p);
    let mut iters = 0;
    for it in 0..cfg.max_iter {
        iters = it + 1;
        // gradient of the loss is the negated SSIM gradient
        let next = clamp([p[0] + step * grad[0], p[1] + step * grad[1]]);
        let moved = ((next[0] - p[0]).powi(2) + (next[1] - p[1]).powi(2)).sqrt();
        p = next;
        if moved < cfg.step_tol {
            break;
        }
        let (v, g) = ssim_map_at(&leader, img_follower, (p[0], p[1]), &cfg.ssim)?;
        let loss = 1.0 - v;
        if loss < best.0 {
            best = (loss, p);
        }
        grad = g;
    }

    Ok(RefinedCorrespondence {
        person: c.person,
        slot: c.slot,
        p_l: c.p_l,
        p_f0: p0,
        p_f: best.1,
        loss0,
        loss: best.0,
        iters,
        flag: RefineFlag::Refined,
    })
}

fn infeasible(c: &Correspondence) -> RefinedCorrespondence {
    RefinedCorrespondence {
        person: c.person,
        slot: c.slot,
        p_l: c.p_l,
        p_f0: c.p_f,
        p_f: c.p_f,
        loss0: f64::NAN,
        loss: f64::NAN,
        iters: 0,
        flag: RefineFlag::InfeasibleWindow,
    }
}

/// Refine a batch; results are elementwise identical to mapping
/// [`refine_one`]. With `threads > 1` the batch fans out over that many
/// scoped worker threads.
pub fn refine_all(
    img_leader: &Image,
    img_follower: &Image,
    cs: &[Correspondence],
    cfg: &RefineConfig,
    threads: usize,
) -> Result<Vec<RefinedCorrespondence>, RefineError> {
    if cs.is_empty() {
        return Err(RefineError::EmptyBatch);
    }
    let threads = threads.max(1).min(cs.len());
    if threads == 1 {
        return cs
            .iter()
            .map(|c| refine_one(img_leader, img_follower, c, cfg))
            .collect();
    }
    let mut out: Vec<Option<Result<RefinedCorrespondence, RefineError>>> = Vec::new();
    out.resize_with(cs.len(), || None);
    let chunk = cs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (ci, (cs_chunk, out_chunk)) in
            cs.chunks(chunk).zip(out.chunks_mut(chunk)).enumerate()
        {
            let _ = ci;
            scope.spawn(move || {
                for (c, slot) in cs_chunk.iter().zip(out_chunk.iter_mut()) {
                    *slot = Some(refine_one(img_leader, img_follower, c, cfg));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("all slots filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Patch;
    use crate::ssim::ssim_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Seeded value noise evaluable at arbitrary coordinates.
    struct ValueNoise {
        grid: Vec<f64>,
        cols: usize,
        cell: f64,
    }

    impl ValueNoise {
        fn new(cell: f64, cols: usize, rows: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Self { grid, cols, cell }
        }

        fn at(&self, x: f64, y: f64) -> f64 {
            let gx = (x / self.cell).max(0.0);
            let gy = (y / self.cell).max(0.0);
            let i = (gx as usize).min(self.cols - 2);
            let j = (gy as usize).min(self.grid.len() / self.cols - 2);
            let fx = gx - i as f64;
            let fy = gy - j as f64;
            let sx = fx * fx * (3.0 - 2.0 * fx);
            let sy = fy * fy * (3.0 - 2.0 * fy);
            let v = |i: usize, j: usize| self.grid[j * self.cols + i];
            (v(i, j) * (1.0 - sx) + v(i + 1, j) * sx) * (1.0 - sy)
                + (v(i, j + 1) * (1.0 - sx) + v(i + 1, j + 1) * sx) * sy
        }
    }

    /// Radial luminance cone at `site` plus mild fine noise, rendered with
    /// an optional subpixel shift of the whole pattern.
    fn cone_image(w: usize, h: usize, site: (f64, f64), shift: (f64, f64), seed: u64) -> Image {
        let noise = ValueNoise::new(5.0, w / 5 + 3, h / 5 + 3, seed);
        let mut img = Image::new(w, h, 1).unwrap();
        img.fill_with(|x, y, _| {
            let sx = x as f64 - shift.0;
            let sy = y as f64 - shift.1;
            let r = ((sx - site.0).powi(2) + (sy - site.1).powi(2)).sqrt() / 48.0;
            let p = (1.0 - r).clamp(0.0, 1.0);
            let cone = 150.0 * p * p * (3.0 - 2.0 * p);
            (60.0 + cone + 12.0 * noise.at(sx.max(0.0), sy.max(0.0))).clamp(0.0, 255.0)
        });
        img
    }

    fn corr(p_l: [f64; 2], p_f: [f64; 2]) -> Correspondence {
        Correspondence {
            person: 0,
            slot: 0,
            p_l,
            p_f,
        }
    }

    #[test]
    fn loss_is_zero_on_exact_copy() {
        let img = cone_image(200, 200, (100.0, 100.0), (0.0, 0.0), 1);
        let cfg = RefineConfig::default();
        let c = corr([100.0, 100.0], [100.0, 100.0]);
        let l = refine_loss(&img, &img, &c, &cfg).unwrap();
        assert!(l.abs() < 1e-12, "loss {l}");
    }

    #[test]
    fn loss_on_constant_patches_matches_closed_form() {
        let mut zeros = Image::new(64, 64, 1).unwrap();
        zeros.fill_with(|_, _, _| 0.0);
        let mut bright = Image::new(64, 64, 1).unwrap();
        bright.fill_with(|_, _, _| 255.0);
        let cfg = RefineConfig::default();
        let c = corr([32.0, 32.0], [32.0, 32.0]);
        let l = refine_loss(&zeros, &bright, &c, &cfg).unwrap();
        // zero variances: SSIM = c1/(255^2+c1); L = 1 - that
        let c1 = cfg.ssim.c1();
        let expect = 1.0 - c1 / (255.0f64.powi(2) + c1);
        assert!((l - expect).abs() < 1e-12, "loss {l} vs {expect}");
    }

    #[test]
    fn loss_is_definitionally_one_minus_ssim_map() {
        let img_l = cone_image(200, 200, (90.0, 110.0), (0.0, 0.0), 2);
        let img_f = cone_image(200, 200, (90.0, 110.0), (0.0, 0.0), 3);
        let cfg = RefineConfig::default();
        let c = corr([92.0, 100.0], [95.5, 104.25]);
        let l = refine_loss(&img_l, &img_f, &c, &cfg).unwrap();
        let lp = img_l.patch_at(92.0, 100.0, 32).unwrap();
        let fp = img_f.patch_at(95.5, 104.25, 32).unwrap();
        let v = ssim_map(&lp, &fp, &cfg.ssim).unwrap();
        assert_eq!(l, 1.0 - v);
    }

    #[test]
    fn stationary_start_stays_put() {
        let img = cone_image(200, 200, (100.0, 100.0), (0.0, 0.0), 4);
        let cfg = RefineConfig::default();
        let c = corr([100.0, 100.0], [100.0, 100.0]);
        let r = refine_one(&img, &img, &c, &cfg).unwrap();
        let moved = ((r.p_f[0] - 100.0).powi(2) + (r.p_f[1] - 100.0).powi(2)).sqrt();
        assert!(moved < 1e-3, "moved {moved}");
    }

    #[test]
    fn known_shift_is_recovered() {
        // follower = leader translated by (+5, -3)
        let site = (100.0, 100.0);
        let img_l = cone_image(220, 220, site, (0.0, 0.0), 5);
        let img_f = cone_image(220, 220, site, (5.0, -3.0), 5);
        let cfg = RefineConfig::default();
        let c = corr([site.0, site.1], [site.0, site.1]);
        let r = refine_one(&img_l, &img_f, &c, &cfg).unwrap();
        let err = ((r.p_f[0] - 105.0).powi(2) + (r.p_f[1] - 97.0).powi(2)).sqrt();
        assert!(err < 0.5, "recovered ({}, {}), err {err}", r.p_f[0], r.p_f[1]);
        assert!(r.loss <= r.loss0);
    }

    #[test]
    fn out_of_box_truth_pins_to_the_boundary() {
        // half-wave pattern: cos with half-period 45 px sustains the pull
        // across the whole march; truth offset +40 exceeds the 32 px box
        let (w, h) = (320, 240);
        let truth_x = 200.0;
        let noise = ValueNoise::new(5.0, w / 5 + 3, h / 5 + 3, 6);
        let mut img = Image::new(w, h, 1).unwrap();
        img.fill_with(|x, y, _| {
            let v = 128.0
                + 105.0 * (std::f64::consts::PI * (x as f64 - truth_x) / 45.0).cos()
                + 5.0 * noise.at(x as f64, y as f64);
            v.clamp(0.0, 255.0)
        });
        let cfg = RefineConfig {
            step_scale: 9000.0,
            ..Default::default()
        };
        let start = [truth_x - 40.0, 120.0];
        let c = corr([truth_x, 120.0], start);
        let r = refine_one(&img, &img, &c, &cfg).unwrap();
        let inf = (r.p_f[0] - start[0])
            .abs()
            .max((r.p_f[1] - start[1]).abs());
        assert!(inf > 30.0 && inf < cfg.region, "landed at inf-norm {inf}");
        assert!(r.loss <= r.loss0 + 1e-9);
    }

    #[test]
    fn iterates_never_leave_the_constraint_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let site = (110.0, 110.0);
        let img = cone_image(240, 240, site, (0.0, 0.0), 8);
        let cfg = RefineConfig::default();
        for _ in 0..25 {
            let p0 = [
                site.0 + rng.gen_range(-25.0..25.0),
                site.1 + rng.gen_range(-25.0..25.0),
            ];
            let r = refine_one(&img, &img, &corr([site.0, site.1], p0), &cfg).unwrap();
            let dx = (r.p_f[0] - p0[0]).abs();
            let dy = (r.p_f[1] - p0[1]).abs();
            assert!(dx.max(dy) <= cfg.region, "left the box: ({dx}, {dy})");
            assert!(r.loss <= r.loss0 + 1e-9, "loss regressed");
        }
    }

    #[test]
    fn infeasible_window_returns_input_with_flag() {
        let img = cone_image(20, 20, (10.0, 10.0), (0.0, 0.0), 9);
        let big = RefineConfig::default(); // 32-patch cannot fit in 20x20
        let c = corr([10.0, 10.0], [10.0, 10.0]);
        let r = refine_one(&img, &img, &c, &big).unwrap();
        assert_eq!(r.flag, RefineFlag::InfeasibleWindow);
        assert_eq!(r.p_f, c.p_f);
    }

    #[test]
    fn batch_equals_singletons_and_is_order_equivariant() {
        let site_a = (80.0, 90.0);
        let site_b = (160.0, 140.0);
        let mut img = cone_image(240, 240, site_a, (0.0, 0.0), 10);
        // paint a second cone into the same image
        let second = cone_image(240, 240, site_b, (0.0, 0.0), 11);
        let w = img.width();
        for y in 0..img.height() {
            for x in 0..w {
                let v = img.get(x, y, 0).max(second.get(x, y, 0));
                img.set(x, y, 0, v);
            }
        }
        let cfg = RefineConfig::default();
        let cs = vec![
            corr([site_a.0, site_a.1], [site_a.0 - 4.0, site_a.1 + 3.0]),
            corr([site_b.0, site_b.1], [site_b.0 + 6.0, site_b.1 - 2.0]),
        ];
        let batch = refine_all(&img, &img, &cs, &cfg, 1).unwrap();
        for (c, r) in cs.iter().zip(&batch) {
            let single = refine_one(&img, &img, c, &cfg).unwrap();
            assert_eq!(&single, r);
        }
        let mut rev = cs.clone();
        rev.reverse();
        let batch_rev = refine_all(&img, &img, &rev, &cfg, 1).unwrap();
        assert_eq!(batch_rev[0], batch[1]);
        assert_eq!(batch_rev[1], batch[0]);
        // threaded fan-out must be bit-identical
        let batch_mt = refine_all(&img, &img, &cs, &cfg, 4).unwrap();
        assert_eq!(batch, batch_mt);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let img = cone_image(64, 64, (32.0, 32.0), (0.0, 0.0), 12);
        assert!(matches!(
            refine_all(&img, &img, &[], &RefineConfig::default(), 1),
            Err(RefineError::EmptyBatch)
        ));
    }

    #[test]
    fn whole_patch_config_degenerates_to_single_window() {
        let cfg = RefineConfig::default();
        assert_eq!(cfg.ssim.window, cfg.patch);
        let a = Patch::constant(32, 32, 1, 10.0);
        let b = Patch::constant(32, 32, 1, 10.0);
        assert!((ssim_map(&a, &b, &cfg.ssim).unwrap() - 1.0).abs() < 1e-12);
    }
}
