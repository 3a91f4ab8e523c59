//! COCO joint ordering, the eight transformable limbs and their mapping onto
//! body-part parsing labels.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_JOINTS: usize = 17;
pub const NUM_LIMBS: usize = 8;
/// Highest body-part label in a parsing mask (0 is background).
pub const MAX_PART_LABEL: u8 = 14;

pub const NOSE: usize = 0;
pub const LEFT_EYE: usize = 1;
pub const RIGHT_EYE: usize = 2;
pub const LEFT_EAR: usize = 3;
pub const RIGHT_EAR: usize = 4;
pub const LEFT_SHOULDER: usize = 5;
pub const RIGHT_SHOULDER: usize = 6;
pub const LEFT_ELBOW: usize = 7;
pub const RIGHT_ELBOW: usize = 8;
pub const LEFT_WRIST: usize = 9;
pub const RIGHT_WRIST: usize = 10;
pub const LEFT_HIP: usize = 11;
pub const RIGHT_HIP: usize = 12;
pub const LEFT_KNEE: usize = 13;
pub const RIGHT_KNEE: usize = 14;
pub const LEFT_ANKLE: usize = 15;
pub const RIGHT_ANKLE: usize = 16;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// COCO skeleton edges, 1-based as in the annotation files.
pub const COCO_SKELETON: [[usize; 2]; 19] = [
    [16, 14],
    [14, 12],
    [17, 15],
    [15, 13],
    [12, 13],
    [6, 12],
    [7, 13],
    [6, 7],
    [6, 8],
    [7, 9],
    [8, 10],
    [9, 11],
    [2, 3],
    [1, 2],
    [1, 3],
    [2, 4],
    [3, 5],
    [4, 6],
    [5, 7],
];

/// Standard COCO per-keypoint OKS sigmas.
pub const COCO_SIGMAS: [f64; NUM_JOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Limb ids. Upper segments come first so that id order is also the
/// compositing order (upper before lower, left before right).
pub const LEFT_UPPER_ARM: usize = 0;
pub const RIGHT_UPPER_ARM: usize = 1;
pub const LEFT_UPPER_LEG: usize = 2;
pub const RIGHT_UPPER_LEG: usize = 3;
pub const LEFT_LOWER_ARM: usize = 4;
pub const RIGHT_LOWER_ARM: usize = 5;
pub const LEFT_LOWER_LEG: usize = 6;
pub const RIGHT_LOWER_LEG: usize = 7;

pub const LIMB_NAMES: [&str; NUM_LIMBS] = [
    "left_upper_arm",
    "right_upper_arm",
    "left_upper_leg",
    "right_upper_leg",
    "left_lower_arm",
    "right_lower_arm",
    "left_lower_leg",
    "right_lower_leg",
];

/// (src joint = rotation center, dst joint, parent limb)
const LIMB_GEOMETRY: [(usize, usize, Option<usize>); NUM_LIMBS] = [
    (LEFT_SHOULDER, LEFT_ELBOW, None),
    (RIGHT_SHOULDER, RIGHT_ELBOW, None),
    (LEFT_HIP, LEFT_KNEE, None),
    (RIGHT_HIP, RIGHT_KNEE, None),
    (LEFT_ELBOW, LEFT_WRIST, Some(LEFT_UPPER_ARM)),
    (RIGHT_ELBOW, RIGHT_WRIST, Some(RIGHT_UPPER_ARM)),
    (LEFT_KNEE, LEFT_ANKLE, Some(LEFT_UPPER_LEG)),
    (RIGHT_KNEE, RIGHT_ANKLE, Some(RIGHT_UPPER_LEG)),
];

/// 14-part coarse body labeling used by the default mapping.
pub mod part {
    pub const TORSO: u8 = 1;
    pub const RIGHT_HAND: u8 = 2;
    pub const LEFT_HAND: u8 = 3;
    pub const LEFT_FOOT: u8 = 4;
    pub const RIGHT_FOOT: u8 = 5;
    pub const RIGHT_UPPER_LEG: u8 = 6;
    pub const LEFT_UPPER_LEG: u8 = 7;
    pub const RIGHT_LOWER_LEG: u8 = 8;
    pub const LEFT_LOWER_LEG: u8 = 9;
    pub const LEFT_UPPER_ARM: u8 = 10;
    pub const RIGHT_UPPER_ARM: u8 = 11;
    pub const LEFT_LOWER_ARM: u8 = 12;
    pub const RIGHT_LOWER_ARM: u8 = 13;
    pub const HEAD: u8 = 14;
}

#[derive(Debug, Error)]
pub enum LimbError {
    #[error("limb {0} has an empty label set")]
    EmptyLabels(usize),
    #[error("label {label} for limb {limb} is outside 1..={MAX_PART_LABEL}")]
    LabelOutOfRange { limb: usize, label: u8 },
    #[error("mapping must list exactly {NUM_LIMBS} label sets, got {0}")]
    WrongCount(usize),
    #[error("reading limb mapping: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing limb mapping: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limb {
    pub id: usize,
    pub src_joint: usize,
    pub dst_joint: usize,
    pub parent: Option<usize>,
    pub part_labels: Vec<u8>,
}

impl Limb {
    pub fn name(&self) -> &'static str {
        LIMB_NAMES[self.id]
    }

    pub fn is_lower(&self) -> bool {
        self.parent.is_some()
    }
}

/// Per-limb parsing-label sets, as stored in the mapping file:
///
/// ```toml
/// labels = [[10], [11], [7], [6], [12, 3], [13, 2], [9, 4], [8, 5]]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimbLabelMap {
    pub labels: Vec<Vec<u8>>,
}

impl Default for LimbLabelMap {
    fn default() -> Self {
        use part::*;
        Self {
            labels: vec![
                vec![LEFT_UPPER_ARM],
                vec![RIGHT_UPPER_ARM],
                vec![LEFT_UPPER_LEG],
                vec![RIGHT_UPPER_LEG],
                vec![LEFT_LOWER_ARM, LEFT_HAND],
                vec![RIGHT_LOWER_ARM, RIGHT_HAND],
                vec![LEFT_LOWER_LEG, LEFT_FOOT],
                vec![RIGHT_LOWER_LEG, RIGHT_FOOT],
            ],
        }
    }
}

impl LimbLabelMap {
    pub fn load(path: &Path) -> Result<Self, LimbError> {
        let text = std::fs::read_to_string(path)?;
        let map: Self = toml::from_str(&text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), LimbError> {
        if self.labels.len() != NUM_LIMBS {
            return Err(LimbError::WrongCount(self.labels.len()));
        }
        for (limb, set) in self.labels.iter().enumerate() {
            if set.is_empty() {
                return Err(LimbError::EmptyLabels(limb));
            }
            if let Some(&label) = set.iter().find(|&&l| l == 0 || l > MAX_PART_LABEL) {
                return Err(LimbError::LabelOutOfRange { limb, label });
            }
        }
        Ok(())
    }
}

/// The eight limbs with their label sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimbTable {
    limbs: Vec<Limb>,
}

impl Default for LimbTable {
    fn default() -> Self {
        Self::new(&LimbLabelMap::default()).expect("default mapping is valid")
    }
}

impl LimbTable {
    pub fn new(map: &LimbLabelMap) -> Result<Self, LimbError> {
        map.validate()?;
        let limbs = LIMB_GEOMETRY
            .iter()
            .enumerate()
            .map(|(id, &(src_joint, dst_joint, parent))| Limb {
                id,
                src_joint,
                dst_joint,
                parent,
                part_labels: map.labels[id].clone(),
            })
            .collect();
        Ok(Self { limbs })
    }

    pub fn limbs(&self) -> &[Limb] {
        &self.limbs
    }

    pub fn get(&self, id: usize) -> &Limb {
        &self.limbs[id]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Limb> {
        self.limbs.iter()
    }

    /// Lower segment whose parent is `upper`, if any.
    pub fn child_of(&self, upper: usize) -> Option<&Limb> {
        self.limbs.iter().find(|l| l.parent == Some(upper))
    }
}
