//! Keypoint-set data model: the 18-slot anatomy convention, left-to-right
//! person ordering, and hierarchical body-part bounding boxes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of anatomical keypoint slots per person.
pub const SLOT_COUNT: usize = 18;

/// Fixed 18-point anatomy order (the OpenPose COCO convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Slot {
    Nose = 0,
    Neck = 1,
    RightShoulder = 2,
    RightElbow = 3,
    RightWrist = 4,
    LeftShoulder = 5,
    LeftElbow = 6,
    LeftWrist = 7,
    RightHip = 8,
    RightKnee = 9,
    RightAnkle = 10,
    LeftHip = 11,
    LeftKnee = 12,
    LeftAnkle = 13,
    RightEye = 14,
    LeftEye = 15,
    RightEar = 16,
    LeftEar = 17,
}

/// The six hierarchical body-part groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Face,
    UpperBody,
    LowerBody,
    LeftArm,
    RightArm,
    FullBody,
}

impl BodyPart {
    pub const ALL: [BodyPart; 6] = [
        BodyPart::Face,
        BodyPart::UpperBody,
        BodyPart::LowerBody,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::FullBody,
    ];

    /// Member keypoint slots. Hips belong to both the upper- and lower-body
    /// groups; the full-body group spans every slot.
    pub fn member_slots(self) -> &'static [usize] {
        use Slot::*;
        match self {
            BodyPart::Face => &[
                Nose as usize,
                RightEye as usize,
                LeftEye as usize,
                RightEar as usize,
                LeftEar as usize,
            ],
            BodyPart::UpperBody => &[
                Neck as usize,
                RightShoulder as usize,
                LeftShoulder as usize,
                RightHip as usize,
                LeftHip as usize,
            ],
            BodyPart::LowerBody => &[
                RightHip as usize,
                LeftHip as usize,
                RightKnee as usize,
                LeftKnee as usize,
                RightAnkle as usize,
                LeftAnkle as usize,
            ],
            BodyPart::LeftArm => &[
                LeftShoulder as usize,
                LeftElbow as usize,
                LeftWrist as usize,
            ],
            BodyPart::RightArm => &[
                RightShoulder as usize,
                RightElbow as usize,
                RightWrist as usize,
            ],
            BodyPart::FullBody => &[
                0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17,
            ],
        }
    }
}

/// One person's keypoints; `None` marks an occluded or undetected slot.
pub type PersonKeypoints = [Option<(f64, f64)>; SLOT_COUNT];

/// Parsed keypoints of one image, persons ordered left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub persons: Vec<PersonKeypoints>,
    /// (width, height) in pixels.
    pub image_size: (usize, usize),
    /// Monotonic capture time in seconds.
    pub timestamp: f64,
    /// Source image name carried through from the document.
    pub image_name: String,
}

/// Axis-aligned box in pixel coordinates, right/bottom inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2 {
    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn contains_box(&self, other: &Box2) -> bool {
        self.x_min <= other.x_min + 1e-9
            && self.y_min <= other.y_min + 1e-9
            && self.x_max >= other.x_max - 1e-9
            && self.y_max >= other.y_max - 1e-9
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min - 1e-9 && x <= self.x_max + 1e-9 && y >= self.y_min - 1e-9 && y <= self.y_max + 1e-9
    }
}

/// The six per-person part boxes; a box is absent when fewer than two member
/// keypoints are visible or its area falls under the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BodyPartBoxes {
    pub face: Option<Box2>,
    pub upper_body: Option<Box2>,
    pub lower_body: Option<Box2>,
    pub left_arm: Option<Box2>,
    pub right_arm: Option<Box2>,
    pub full_body: Option<Box2>,
}

impl BodyPartBoxes {
    pub fn get(&self, part: BodyPart) -> Option<Box2> {
        match part {
            BodyPart::Face => self.face,
            BodyPart::UpperBody => self.upper_body,
            BodyPart::LowerBody => self.lower_body,
            BodyPart::LeftArm => self.left_arm,
            BodyPart::RightArm => self.right_arm,
            BodyPart::FullBody => self.full_body,
        }
    }

    fn set(&mut self, part: BodyPart, b: Option<Box2>) {
        match part {
            BodyPart::Face => self.face = b,
            BodyPart::UpperBody => self.upper_body = b,
            BodyPart::LowerBody => self.lower_body = b,
            BodyPart::LeftArm => self.left_arm = b,
            BodyPart::RightArm => self.right_arm = b,
            BodyPart::FullBody => self.full_body = b,
        }
    }
}

/// Minimum kept box area in square pixels.
pub const MIN_BOX_AREA: f64 = 600.0;
/// Per-side expansion as a fraction of the keypoint span.
pub const BOX_EXPANSION: f64 = 0.10;
/// Half-width floor applied to a zero-width span before the area test.
pub const ZERO_SPAN_HALF_WIDTH: f64 = 12.5;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("document is not valid keypoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("person {person} has {got} keypoint entries, expected {SLOT_COUNT}")]
    WrongSlotCount { person: usize, got: usize },
    #[error("person {person} slot {slot} at ({x}, {y}) is outside the {width}x{height} image")]
    OutOfBounds {
        person: usize,
        slot: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("image dimensions {width}x{height} are invalid")]
    BadImageSize { width: i64, height: i64 },
    #[error("person has no visible keypoints")]
    NoVisibleKeypoints,
}

/// Non-fatal conditions encountered while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// A person with all 18 slots missing was dropped (original index).
    DroppedEmptyPerson(usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    image: String,
    width: i64,
    height: i64,
    timestamp: f64,
    people: Vec<RawPerson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawPerson {
    keypoints: Vec<[f64; 2]>,
}

/// Parse a keypoint JSON document. Missing markers `(-1, -1)` become `None`,
/// persons with zero visible keypoints are dropped with a warning, and the
/// survivors are sorted left to right by mean x of their visible keypoints
/// (ties by mean y, then original index).
pub fn parse_keypoints(raw: &str) -> Result<(KeypointSet, Vec<ParseWarning>), KeypointError> {
    let doc: RawDocument = serde_json::from_str(raw)?;
    if doc.width <= 0 || doc.height <= 0 {
        return Err(KeypointError::BadImageSize {
            width: doc.width,
            height: doc.height,
        });
    }
    let (width, height) = (doc.width as usize, doc.height as usize);
    let mut warnings = Vec::new();
    let mut persons: Vec<(PersonKeypoints, usize)> = Vec::new();
    for (pi, person) in doc.people.iter().enumerate() {
        if person.keypoints.len() != SLOT_COUNT {
            return Err(KeypointError::WrongSlotCount {
                person: pi,
                got: person.keypoints.len(),
            });
        }
        let mut slots: PersonKeypoints = [None; SLOT_COUNT];
        let mut any = false;
        for (si, &[x, y]) in person.keypoints.iter().enumerate() {
            if x == -1.0 && y == -1.0 {
                continue;
            }
            if x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64 {
                return Err(KeypointError::OutOfBounds {
                    person: pi,
                    slot: si,
                    x,
                    y,
                    width,
                    height,
                });
            }
            slots[si] = Some((x, y));
            any = true;
        }
        if any {
            persons.push((slots, pi));
        } else {
            warnings.push(ParseWarning::DroppedEmptyPerson(pi));
        }
    }
    persons.sort_by(|(a, ai), (b, bi)| {
        let ka = sort_key(a);
        let kb = sort_key(b);
        ka.partial_cmp(&kb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ai.cmp(bi))
    });
    Ok((
        KeypointSet {
            persons: persons.into_iter().map(|(p, _)| p).collect(),
            image_size: (width, height),
            timestamp: doc.timestamp,
            image_name: doc.image,
        },
        warnings,
    ))
}

/// Serialize back to the document schema, `(-1, -1)` for missing slots.
pub fn serialize_keypoints(set: &KeypointSet) -> String {
    let doc = RawDocument {
        image: set.image_name.clone(),
        width: set.image_size.0 as i64,
        height: set.image_size.1 as i64,
        timestamp: set.timestamp,
        people: set
            .persons
            .iter()
            .map(|p| RawPerson {
                keypoints: p
                    .iter()
                    .map(|kp| kp.map(|(x, y)| [x, y]).unwrap_or([-1.0, -1.0]))
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("keypoint document serialization")
}

fn sort_key(p: &PersonKeypoints) -> (f64, f64) {
    let visible: Vec<(f64, f64)> = p.iter().flatten().copied().collect();
    let n = visible.len() as f64;
    let mx = visible.iter().map(|v| v.0).sum::<f64>() / n;
    let my = visible.iter().map(|v| v.1).sum::<f64>() / n;
    (mx, my)
}

/// Number of visible keypoints among the given slots.
fn visible_in(person: &PersonKeypoints, slots: &[usize]) -> usize {
    slots.iter().filter(|&&s| person[s].is_some()).count()
}

/// Extract the six hierarchical part boxes for one person.
///
/// Each present box is the span of its visible member keypoints expanded by
/// 10% of the span per side per dimension (a zero span expands from its
/// centroid by a 12.5 px half-width instead), clamped to image bounds, and
/// kept only when at least two member keypoints are visible and the clamped
/// area reaches 600 px².
pub fn extract_boxes(
    person: &PersonKeypoints,
    image_size: (usize, usize),
) -> Result<BodyPartBoxes, KeypointError> {
    if person.iter().all(|kp| kp.is_none()) {
        return Err(KeypointError::NoVisibleKeypoints);
    }
    let mut out = BodyPartBoxes::default();
    for part in BodyPart::ALL {
        let slots = part.member_slots();
        if visible_in(person, slots) < 2 {
            continue;
        }
        let pts: Vec<(f64, f64)> = slots.iter().filter_map(|&s| person[s]).collect();
        let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        let (x0, x1) = expand_span(x_min, x_max);
        let (y0, y1) = expand_span(y_min, y_max);
        let b = Box2 {
            x_min: x0.max(0.0),
            y_min: y0.max(0.0),
            x_max: x1.min((image_size.0 - 1) as f64),
            y_max: y1.min((image_size.1 - 1) as f64),
        };
        if b.area() >= MIN_BOX_AREA {
            out.set(part, Some(b));
        }
    }
    // Keep group boxes nested in the full-body box. Only zero-span rescued
    // boxes can stick out; they are intersected and re-tested.
    if let Some(full) = out.full_body {
        for part in BodyPart::ALL {
            if part == BodyPart::FullBody {
                continue;
            }
            if let Some(b) = out.get(part) {
                let clipped = Box2 {
                    x_min: b.x_min.max(full.x_min),
                    y_min: b.y_min.max(full.y_min),
                    x_max: b.x_max.min(full.x_max),
                    y_max: b.y_max.min(full.y_max),
                };
                out.set(
                    part,
                    (clipped.area() >= MIN_BOX_AREA).then_some(clipped),
                );
            }
        }
    }
    Ok(out)
}

fn expand_span(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span == 0.0 {
        let c = lo;
        (c - ZERO_SPAN_HALF_WIDTH, c + ZERO_SPAN_HALF_WIDTH)
    } else {
        (lo - BOX_EXPANSION * span, hi + BOX_EXPANSION * span)
    }
}
