//! Shared value types: keypoints, poses, boxes, limb transforms and the
//! homogeneous affine matrix used by the limb transformation stage.

use std::ops::Mul;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limbs::NUM_JOINTS;

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error("visibility flag {0} is not one of 0, 1, 2")]
    BadVisibility(f64),
    #[error("non-finite coordinate for labeled joint {0}")]
    NonFinite(usize),
    #[error("expected {expected} keypoint values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("bounding box must have positive width and height, got {w}x{h}")]
    DegenerateBox { w: f64, h: f64 },
    #[error("scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("affine matrix bottom row must be [0, 0, 1]")]
    NotAffine,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// COCO visibility flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Visibility {
    #[default]
    NotLabeled,
    LabeledOccluded,
    LabeledVisible,
}

impl Visibility {
    pub fn from_coco(v: f64) -> Result<Self, TypeError> {
        match v {
            v if v == 0.0 => Ok(Self::NotLabeled),
            v if v == 1.0 => Ok(Self::LabeledOccluded),
            v if v == 2.0 => Ok(Self::LabeledVisible),
            other => Err(TypeError::BadVisibility(other)),
        }
    }

    pub fn as_coco(self) -> u8 {
        self.into()
    }

    pub fn is_labeled(self) -> bool {
        self != Self::NotLabeled
    }
}

impl From<Visibility> for u8 {
    fn from(v: Visibility) -> u8 {
        match v {
            Visibility::NotLabeled => 0,
            Visibility::LabeledOccluded => 1,
            Visibility::LabeledVisible => 2,
        }
    }
}

impl TryFrom<u8> for Visibility {
    type Error = TypeError;
    fn try_from(v: u8) -> Result<Self, TypeError> {
        Self::from_coco(v as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub vis: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, vis: Visibility) -> Self {
        Self { x, y, vis }
    }

    pub fn visible(x: f64, y: f64) -> Self {
        Self::new(x, y, Visibility::LabeledVisible)
    }

    pub fn missing() -> Self {
        Self::default()
    }

    pub fn is_labeled(&self) -> bool {
        self.vis.is_labeled()
    }
}

/// A 2D pose of exactly [`NUM_JOINTS`] keypoints in COCO joint order
/// (see [`crate::limbs`] for the index constants).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: [Keypoint; NUM_JOINTS],
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            joints: [Keypoint::missing(); NUM_JOINTS],
        }
    }
}

impl Pose {
    pub fn new(joints: [Keypoint; NUM_JOINTS]) -> Result<Self, TypeError> {
        for (i, kp) in joints.iter().enumerate() {
            if kp.is_labeled() && !(kp.x.is_finite() && kp.y.is_finite()) {
                return Err(TypeError::NonFinite(i));
            }
        }
        Ok(Self { joints })
    }

    /// Parses a flat COCO `[x1, y1, v1, ...]` array. Unlabeled joints are
    /// stored as (0, 0).
    pub fn from_coco_flat(values: &[f64]) -> Result<Self, TypeError> {
        if values.len() != 3 * NUM_JOINTS {
            return Err(TypeError::WrongLength {
                expected: 3 * NUM_JOINTS,
                got: values.len(),
            });
        }
        let mut joints = [Keypoint::missing(); NUM_JOINTS];
        for (j, chunk) in values.chunks_exact(3).enumerate() {
            let vis = Visibility::from_coco(chunk[2])?;
            joints[j] = if vis.is_labeled() {
                Keypoint::new(chunk[0], chunk[1], vis)
            } else {
                Keypoint::missing()
            };
        }
        Self::new(joints)
    }

    pub fn to_coco_flat(&self) -> Vec<f64> {
        self.joints
            .iter()
            .flat_map(|kp| [kp.x, kp.y, kp.vis.as_coco() as f64])
            .collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.joints.iter().filter(|kp| kp.is_labeled()).count()
    }

    /// Extent of the labeled keypoints, if any.
    pub fn labeled_extent(&self) -> Option<Extent> {
        Extent::from_points(
            self.joints
                .iter()
                .filter(|kp| kp.is_labeled())
                .map(|kp| (kp.x, kp.y)),
        )
    }
}

/// Pose expressed in its normalized crop frame. Labeled coordinates are in
/// `[0, 1]`; unlabeled joints hold [`NormalizedPose::FILL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPose {
    pub coords: [[f64; 2]; NUM_JOINTS],
    pub vis: [Visibility; NUM_JOINTS],
}

impl NormalizedPose {
    /// Crop-center fill for unlabeled joints.
    pub const FILL: [f64; 2] = [0.5, 0.5];
    pub const DIM: usize = 2 * NUM_JOINTS;

    pub fn num_labeled(&self) -> usize {
        self.vis.iter().filter(|v| v.is_labeled()).count()
    }

    /// Flat `[x0, y0, x1, y1, ...]` vector used by the clustering module.
    pub fn feature_vector(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| [c[0], c[1]]).collect()
    }

    pub fn from_feature_vector(values: &[f64]) -> Result<Self, TypeError> {
        if values.len() != Self::DIM {
            return Err(TypeError::WrongLength {
                expected: Self::DIM,
                got: values.len(),
            });
        }
        let mut coords = [[0.0; 2]; NUM_JOINTS];
        for (j, c) in values.chunks_exact(2).enumerate() {
            coords[j] = [c[0], c[1]];
        }
        Ok(Self {
            coords,
            vis: [Visibility::LabeledVisible; NUM_JOINTS],
        })
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, TypeError> {
        if !(w > 0.0 && h > 0.0) || !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(TypeError::DegenerateBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn extent(&self) -> Extent {
        Extent {
            min_x: self.x,
            min_y: self.y,
            max_x: self.x + self.w,
            max_y: self.y + self.h,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }
}

/// Min/max accumulator over points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Extent {
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Option<Self> {
        let mut it = points.into_iter();
        let (x0, y0) = it.next()?;
        let mut e = Extent {
            min_x: x0,
            min_y: y0,
            max_x: x0,
            max_y: y0,
        };
        for (x, y) in it {
            e.include(x, y);
        }
        Some(e)
    }

    pub fn include(&mut self, x: f64, y: f64) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn union(mut self, other: &Extent) -> Extent {
        self.include(other.min_x, other.min_y);
        self.include(other.max_x, other.max_y);
        self
    }

    pub fn clip(self, width: f64, height: f64) -> Extent {
        Extent {
            min_x: self.min_x.clamp(0.0, width),
            min_y: self.min_y.clamp(0.0, height),
            max_x: self.max_x.clamp(0.0, width),
            max_y: self.max_y.clamp(0.0, height),
        }
    }

    pub fn to_bbox(&self) -> Result<BBox, TypeError> {
        BBox::new(
            self.min_x,
            self.min_y,
            self.max_x - self.min_x,
            self.max_y - self.min_y,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonInstance {
    pub image_id: u64,
    /// COCO annotation id.
    pub instance_id: u64,
    pub bbox: BBox,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<std::path::PathBuf>,
    pub area: f64,
}

/// Per-limb scale and rotation (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbTransform {
    pub scale: f64,
    pub rotation: f64,
}

impl LimbTransform {
    pub const IDENTITY: LimbTransform = LimbTransform {
        scale: 1.0,
        rotation: 0.0,
    };

    pub fn new(scale: f64, rotation: f64) -> Result<Self, TypeError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(TypeError::InvalidScale(scale));
        }
        Ok(Self { scale, rotation })
    }
}

/// 3x3 homogeneous matrix whose bottom row is `[0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct AffineMatrix {
    m: [[f64; 3]; 3],
}

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Builds from the top two rows `[[a, b, tx], [c, d, ty]]`.
    pub fn from_rows(top: [[f64; 3]; 2]) -> Self {
        Self {
            m: [top[0], top[1], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[row][col]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<AffineMatrix> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty], _] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Some(Self::from_rows([
            [ia, ib, -(ia * tx + ib * ty)],
            [ic, id, -(ic * tx + id * ty)],
        ]))
    }

    pub fn max_abs_diff(&self, other: &AffineMatrix) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                d = d.max((self.m[r][c] - other.m[r][c]).abs());
            }
        }
        d
    }
}

impl Mul for AffineMatrix {
    type Output = AffineMatrix;

    fn mul(self, rhs: AffineMatrix) -> AffineMatrix {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[r][k] * rhs.m[k][c]).sum();
            }
        }
        // keep the homogeneous row exact
        out[2] = [0.0, 0.0, 1.0];
        AffineMatrix { m: out }
    }
}

impl TryFrom<[[f64; 3]; 3]> for AffineMatrix {
    type Error = TypeError;
    fn try_from(m: [[f64; 3]; 3]) -> Result<Self, TypeError> {
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(TypeError::NotAffine);
        }
        Ok(Self { m })
    }
}

impl From<AffineMatrix> for [[f64; 3]; 3] {
    fn from(a: AffineMatrix) -> Self {
        a.m
    }
}

/// Augmentation parameters. Angles are radians in memory and degrees in the
/// serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub per_limb_prob: f64,
    pub scale_range: [f64; 2],
    #[serde(rename = "rotation_range_deg", with = "degrees_pair")]
    pub rotation_range: [f64; 2],
    pub scale_std: f64,
    #[serde(rename = "rotation_std_deg", with = "degrees")]
    pub rotation_std: f64,
    pub pool_size: usize,
    pub plausibility_threshold: f64,
    pub n_components: usize,
    pub rng_seed: u64,
    pub max_pool_attempts: usize,
    pub inpaint_max_iters: usize,
    pub inpaint_tol: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        let scale_range = [0.75, 1.25];
        let rotation_range = [(-35.0f64).to_radians(), 35.0f64.to_radians()];
        Self {
            per_limb_prob: 0.5,
            scale_range,
            rotation_range,
            scale_std: (scale_range[1] - scale_range[0]) / 4.0,
            rotation_std: (rotation_range[1] - rotation_range[0]) / 4.0,
            pool_size: 5,
            plausibility_threshold: 0.7,
            n_components: 20,
            rng_seed: 0,
            max_pool_attempts: 50,
            inpaint_max_iters: 2000,
            inpaint_tol: 0.1,
        }
    }
}

impl AugConfig {
    /// Same ranges as `self` but with sampling std-devs reset to a quarter of
    /// each range width.
    pub fn with_ranges(mut self, scale_range: [f64; 2], rotation_range: [f64; 2]) -> Self {
        self.scale_range = scale_range;
        self.rotation_range = rotation_range;
        self.scale_std = (scale_range[1] - scale_range[0]) / 4.0;
        self.rotation_std = (rotation_range[1] - rotation_range[0]) / 4.0;
        self
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |msg: &str| Err(TypeError::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&self.per_limb_prob) {
            return bad("per_limb_prob must lie in [0, 1]");
        }
        let [smin, smax] = self.scale_range;
        if !(smin > 0.0 && smin <= 1.0 && 1.0 <= smax) {
            return bad("scale_range must be positive and contain 1");
        }
        let [rmin, rmax] = self.rotation_range;
        if !(rmin <= 0.0 && 0.0 <= rmax) {
            return bad("rotation_range must contain 0");
        }
        if !(self.scale_std >= 0.0 && self.rotation_std >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        if self.pool_size == 0 {
            return bad("pool_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.plausibility_threshold) {
            return bad("plausibility_threshold must lie in [0, 1]");
        }
        if self.n_components == 0 {
            return bad("n_components must be at least 1");
        }
        if self.max_pool_attempts == 0 {
            return bad("max_pool_attempts must be at least 1");
        }
        Ok(())
    }
}

mod degrees {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.to_degrees())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(f64::deserialize(d)?.to_radians())
    }
}

mod degrees_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 2], s: S) -> Result<S::Ok, S::Error> {
        [v[0].to_degrees(), v[1].to_degrees()].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 2], D::Error> {
        let [a, b] = <[f64; 2]>::deserialize(d)?;
        Ok([a.to_radians(), b.to_radians()])
    }
}
