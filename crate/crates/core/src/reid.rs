//! Person re-identification across a leader and a follower view by
//! aggregated hierarchical SSIM over mutually visible body-part boxes.

use crate::image::{Image, ImageError};
use crate::keypoints::{extract_boxes, BodyPart, Box2, KeypointSet, MIN_BOX_AREA};
use crate::ssim::{ssim_window, SsimConfig, SsimError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("box {0:?} is invalid (area {1:.1} px^2 < {2} or outside the image)")]
    InvalidBox(Box2, f64, f64),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Ssim(#[from] SsimError),
    #[error("keypoint set does not match image size: {0:?} vs {1:?}")]
    ImageSizeMismatch((usize, usize), (usize, usize)),
    #[error("empty corpus")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReidConfig {
    /// Minimum aggregated score for an association to be emitted.
    pub delta_min: f64,
    /// Minimum part-box area in square pixels.
    pub min_area: f64,
    pub ssim: SsimConfig,
}

impl Default for ReidConfig {
    fn default() -> Self {
        Self {
            delta_min: 0.4,
            min_area: MIN_BOX_AREA,
            ssim: SsimConfig::default(),
        }
    }
}

/// One accepted follower-to-leader person match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub follower_index: usize,
    pub leader_index: usize,
    pub score: f64,
    pub parts_used: Vec<BodyPart>,
}

/// Whole-patch SSIM between two part crops; the leader crop is resized to
/// the follower crop's dimensions first.
pub fn part_similarity(
    img_leader: &Image,
    box_leader: &Box2,
    img_follower: &Image,
    box_follower: &Box2,
    cfg: &ReidConfig,
) -> Result<f64, ReidError> {
    let leader = crop_box(img_leader, box_leader, cfg.min_area)?;
    let follower = crop_box(img_follower, box_follower, cfg.min_area)?;
    let resized = Image::resize_patch(&leader, follower.width(), follower.height());
    Ok(ssim_window(&resized, &follower, &cfg.ssim)?)
}

fn crop_box(img: &Image, b: &Box2, min_area: f64) -> Result<crate::image::Patch, ReidError> {
    if b.area() < min_area
        || b.x_min < 0.0
        || b.y_min < 0.0
        || b.x_max > (img.width() - 1) as f64
        || b.y_max > (img.height() - 1) as f64
    {
        return Err(ReidError::InvalidBox(*b, b.area(), min_area));
    }
    let x0 = b.x_min.floor() as usize;
    let y0 = b.y_min.floor() as usize;
    let x1 = (b.x_max.ceil() as usize + 1).min(img.width());
    let y1 = (b.y_max.ceil() as usize + 1).min(img.height());
    Ok(img.crop(x0, y0, x1, y1)?)
}

/// Pairwise score of one leader/follower person pair: the mean of
/// [`part_similarity`] over the parts whose boxes are present for both.
/// Returns the score and the parts used; no mutual part yields `None`.
fn pair_score(
    img_l: &Image,
    boxes_l: &crate::keypoints::BodyPartBoxes,
    img_f: &Image,
    boxes_f: &crate::keypoints::BodyPartBoxes,
    cfg: &ReidConfig,
) -> Result<Option<(f64, Vec<BodyPart>)>, ReidError> {
    let mut total = 0.0;
    let mut used = Vec::new();
    for part in BodyPart::ALL {
        let (Some(bl), Some(bf)) = (boxes_l.get(part), boxes_f.get(part)) else {
            continue;
        };
        total += part_similarity(img_l, &bl, img_f, &bf, cfg)?;
        used.push(part);
    }
    if used.is_empty() {
        Ok(None)
    } else {
        Ok(Some((total / used.len() as f64, used)))
    }
}

/// Associate follower persons to leader persons.
///
/// Every follower is scored against every leader over mutually present part
/// boxes; candidates below `delta_min` are discarded. Assignment is greedy
/// by descending score with one-to-one leaders, except that exact ties
/// (within 1e-9) may share a leader; a follower blocked by a strictly
/// higher claim falls through to its next-best admissible leader.
pub fn associate(
    leader: (&Image, &KeypointSet),
    follower: (&Image, &KeypointSet),
    cfg: &ReidConfig,
) -> Result<Vec<Association>, ReidError> {
    let (img_l, kps_l) = leader;
    let (img_f, kps_f) = follower;
    check_sizes(img_l, kps_l)?;
    check_sizes(img_f, kps_f)?;

    let boxes_l: Vec<_> = kps_l
        .persons
        .iter()
        .map(|p| extract_boxes(p, kps_l.image_size).expect("parsed persons have visible keypoints"))
        .collect();
    let boxes_f: Vec<_> = kps_f
        .persons
        .iter()
        .map(|p| extract_boxes(p, kps_f.image_size).expect("parsed persons have visible keypoints"))
        .collect();

    // all admissible candidates
    struct Candidate {
        follower: usize,
        leader: usize,
        score: f64,
        parts: Vec<BodyPart>,
    }
    let mut candidates = Vec::new();
    for (fi, bf) in boxes_f.iter().enumerate() {
        for (li, bl) in boxes_l.iter().enumerate() {
            if let Some((score, parts)) = pair_score(img_l, bl, img_f, bf, cfg)? {
                if score >= cfg.delta_min {
                    candidates.push(Candidate {
                        follower: fi,
                        leader: li,
                        score,
                        parts,
                    });
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.follower.cmp(&b.follower))
            .then(a.leader.cmp(&b.leader))
    });

    const TIE_TOL: f64 = 1e-9;
    let mut claimed_at: Vec<Option<f64>> = vec![None; kps_l.persons.len()];
    let mut assigned: Vec<bool> = vec![false; kps_f.persons.len()];
    let mut out = Vec::new();
    for c in candidates {
        if assigned[c.follower] {
            continue;
        }
        let admissible = match claimed_at[c.leader] {
            None => true,
            Some(s) => c.score >= s - TIE_TOL,
        };
        if admissible {
            if claimed_at[c.leader].is_none() {
                claimed_at[c.leader] = Some(c.score);
            }
            assigned[c.follower] = true;
            out.push(Association {
                follower_index: c.follower,
                leader_index: c.leader,
                score: c.score,
                parts_used: c.parts,
            });
        }
    }
    out.sort_by(|a, b| a.follower_index.cmp(&b.follower_index));
    Ok(out)
}

fn check_sizes(img: &Image, kps: &KeypointSet) -> Result<(), ReidError> {
    if (img.width(), img.height()) != kps.image_size {
        return Err(ReidError::ImageSizeMismatch(
            (img.width(), img.height()),
            kps.image_size,
        ));
    }
    Ok(())
}

/// One labeled score sample for ROC analysis.
#[derive(Debug, Clone, Copy)]
pub struct LabeledScore {
    pub score: f64,
    pub same_person: bool,
}

/// Per-threshold (threshold, TPR, FPR) over a labeled score corpus. A sample
/// is predicted positive when `score >= threshold`.
pub fn roc_sweep(
    corpus: &[LabeledScore],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64, f64)>, ReidError> {
    if corpus.is_empty() {
        return Err(ReidError::EmptyCorpus);
    }
    let positives = corpus.iter().filter(|s| s.same_person).count().max(1) as f64;
    let negatives = corpus.iter().filter(|s| !s.same_person).count().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = corpus
                .iter()
                .filter(|s| s.same_person && s.score >= t)
                .count() as f64;
            let fp = corpus
                .iter()
                .filter(|s| !s.same_person && s.score >= t)
                .count() as f64;
            (t, tp / positives, fp / negatives)
        })
        .collect())
}

/// Area under the ROC curve by trapezoidal integration over a threshold
/// sweep spanning the score range.
pub fn roc_auc(corpus: &[LabeledScore]) -> Result<f64, ReidError> {
    if corpus.is_empty() {
        return Err(ReidError::EmptyCorpus);
    }
    let mut thresholds: Vec<f64> = corpus.iter().map(|s| s.score).collect();
    thresholds.push(f64::INFINITY);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let pts = roc_sweep(corpus, &thresholds)?;
    let mut auc = 0.0;
    for w in pts.windows(2) {
        let (_, tpr0, fpr0) = w[0];
        let (_, tpr1, fpr1) = w[1];
        auc += (fpr1 - fpr0) * (tpr0 + tpr1) * 0.5;
    }
    Ok(auc)
}
