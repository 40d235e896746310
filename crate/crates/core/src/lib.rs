//! Robot-to-robot relative pose estimation from mutually visible human
//! body-pose keypoints.
//!
//! The pipeline stages map onto the modules below:
//!
//! - [`keypoints`]: 18-slot keypoint sets, left-to-right person ordering and
//!   hierarchical body-part bounding boxes.
//! - [`ssim`]: windowed structural similarity with an analytic gradient with
//!   respect to a patch's subpixel center.
//! - [`reid`]: person association across a leader and a follower view by
//!   aggregated part-wise SSIM.
//! - [`refine`]: bounded gradient refinement of keypoint correspondences.
//! - [`geometry`]: camera models, rigid transforms, triangulation and
//!   epipolar primitives.
//! - [`pnp`]: RANSAC PnP with nonlinear reprojection refinement.
//! - [`sfm`]: normalized 8-point two-view reconstruction with cheirality
//!   pose recovery and joint reprojection refinement.
//! - [`sync`]: timestamp-based pairing of leader/follower observations.

pub mod geometry;
pub mod image;
pub mod keypoints;
pub mod pnp;
pub mod refine;
pub mod reid;
pub mod sfm;
pub mod ssim;
pub mod sync;
