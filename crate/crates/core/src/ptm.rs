//! Limb-level pose transformation: per-limb scale/rotation sampling,
//! center-anchored affine matrices composed along the kinematic chain, and
//! the erase / inpaint / composite image path.
//!
//! Pixel `(col, row)` is sampled at the continuous point `(col + 0.5, row + 0.5)`,
//! the same frame keypoints live in.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inpaint::{inpaint, InpaintError};
use crate::limbs::{LimbTable, NUM_LIMBS};
use crate::mask::{BinaryMask, ParsingMask};
use crate::types::{AffineMatrix, AugConfig, BBox, Extent, LimbTransform, PersonInstance, Pose, Visibility};

/// Rejection-sampling budget for one truncated-normal draw.
pub const MAX_SAMPLE_DRAWS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum PtmError {
    #[error("no accepted (scale, rotation) draw after {MAX_SAMPLE_DRAWS} tries; check std/range settings")]
    NonConvergent,
    #[error("scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("raster is {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("effective matrix of limb {limb} is not invertible")]
    SingularMatrix { limb: usize },
    #[error("no limb of this instance can be transformed")]
    NoTransformableLimb,
    #[error("limb {limb} has a transform but its rotation center is unlabeled")]
    UnanchoredLimb { limb: usize },
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error(transparent)]
    Inpaint(#[from] InpaintError),
}

/// Draws `(s, r)` from independent normals around the identity `(1, 0)`,
/// rejecting draws outside the configured box.
pub fn sample_limb_transform<R: Rng + ?Sized>(config: &AugConfig, rng: &mut R) -> Result<LimbTransform, PtmError> {
    config.validate().map_err(|e| PtmError::Config(e.to_string()))?;
    let scale = Normal::new(1.0, config.scale_std).map_err(|e| PtmError::Config(e.to_string()))?;
    let rot = Normal::new(0.0, config.rotation_std).map_err(|e| PtmError::Config(e.to_string()))?;
    let [smin, smax] = config.scale_range;
    let [rmin, rmax] = config.rotation_range;
    for _ in 0..MAX_SAMPLE_DRAWS {
        let s: f64 = scale.sample(rng);
        let r: f64 = rot.sample(rng);
        if (smin..=smax).contains(&s) && (rmin..=rmax).contains(&r) && s > 0.0 {
            return Ok(LimbTransform { scale: s, rotation: r });
        }
    }
    Err(PtmError::NonConvergent)
}

/// Similarity that scales by `s` and rotates by `r` about `center`, i.e.
/// `T(c) R(r) S(s) T(-c)`. Always fixes `center`; with `s = 1` the
/// translation column is `((1 - cos r) cx + cy sin r, (1 - cos r) cy - cx sin r)`.
pub fn affine_matrix(t: &LimbTransform, center: (f64, f64)) -> Result<AffineMatrix, PtmError> {
    if !(t.scale > 0.0) {
        return Err(PtmError::InvalidScale(t.scale));
    }
    let (cx, cy) = center;
    let (sin, cos) = t.rotation.sin_cos();
    let a = t.scale * cos;
    let b = t.scale * sin;
    Ok(AffineMatrix::from_rows([
        [a, -b, (1.0 - a) * cx + b * cy],
        [b, a, (1.0 - a) * cy - b * cx],
    ]))
}

/// Total motion of a lower segment: `upper * lower` (lower applied first).
pub fn compose_hierarchy(upper: &AffineMatrix, lower: &AffineMatrix) -> AffineMatrix {
    *upper * *lower
}

/// Which limbs move this round and with which effective matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbPlan {
    pub transforms: [Option<LimbTransform>; NUM_LIMBS],
    pub effective: [AffineMatrix; NUM_LIMBS],
    /// Transformed itself or carried by a transformed parent.
    pub moved: [bool; NUM_LIMBS],
}

impl LimbPlan {
    pub fn empty() -> Self {
        Self {
            transforms: [None; NUM_LIMBS],
            effective: [AffineMatrix::IDENTITY; NUM_LIMBS],
            moved: [false; NUM_LIMBS],
        }
    }

    /// Builds effective matrices; each limb pivots about its source joint in
    /// the ORIGINAL pose and lower limbs are composed with their parent.
    pub fn build(pose: &Pose, table: &LimbTable, transforms: [Option<LimbTransform>; NUM_LIMBS]) -> Result<Self, PtmError> {
        let mut own = [None; NUM_LIMBS];
        for limb in table.iter() {
            if let Some(t) = &transforms[limb.id] {
                let c = pose.joints[limb.src_joint];
                if !c.is_labeled() {
                    return Err(PtmError::UnanchoredLimb { limb: limb.id });
                }
                own[limb.id] = Some(affine_matrix(t, (c.x, c.y))?);
            }
        }
        let mut plan = Self {
            transforms,
            ..Self::empty()
        };
        // parents have lower ids than children
        for limb in table.iter() {
            let parent = limb.parent.filter(|&p| plan.moved[p]);
            plan.effective[limb.id] = match (parent, own[limb.id]) {
                (Some(p), Some(m)) => compose_hierarchy(&plan.effective[p], &m),
                (Some(p), None) => plan.effective[p],
                (None, Some(m)) => m,
                (None, None) => AffineMatrix::IDENTITY,
            };
            plan.moved[limb.id] = own[limb.id].is_some() || parent.is_some();
        }
        Ok(plan)
    }

    pub fn num_transformed(&self) -> usize {
        self.transforms.iter().filter(|t| t.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.num_transformed() == 0
    }
}

/// Moves each moved limb's destination joint by its effective matrix. Since a
/// lower limb pivots on its parent's destination joint, elbows and knees are
/// carried by the parent and the chain stays connected.
pub fn transform_pose(pose: &Pose, plan: &LimbPlan, table: &LimbTable) -> Pose {
    let mut out = *pose;
    for limb in table.iter() {
        if !plan.moved[limb.id] {
            continue;
        }
        let kp = pose.joints[limb.dst_joint];
        if kp.is_labeled() {
            let (x, y) = plan.effective[limb.id].apply(kp.x, kp.y);
            out.joints[limb.dst_joint].x = x;
            out.joints[limb.dst_joint].y = y;
        }
    }
    out
}

/// Marks the union of `regions`, dilated by one pixel, as a hole and blanks
/// those pixels.
pub fn erase_limbs(image: &RgbImage, regions: &[&BinaryMask]) -> Result<(RgbImage, BinaryMask), PtmError> {
    let dims = image.dimensions();
    let mut union = BinaryMask::new(dims.0, dims.1);
    for r in regions {
        if r.dims() != dims {
            return Err(PtmError::DimensionMismatch {
                expected: dims,
                got: r.dims(),
            });
        }
        union.union_with(r);
    }
    if union.is_empty() {
        return Ok((image.clone(), union));
    }
    let hole = union.dilate(1);
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if hole.get(x, y) {
            *p = image::Rgb([0, 0, 0]);
        }
    }
    Ok((out, hole))
}

/// One limb to paste: source pixels inside `region`, moved by `matrix`.
#[derive(Debug, Clone, Copy)]
pub struct LimbPatch<'a> {
    pub pixels: &'a RgbImage,
    pub region: &'a BinaryMask,
    pub matrix: AffineMatrix,
}

/// Continuous-coordinate extent of `region` after mapping by `matrix`.
pub fn warped_extent(region: &BinaryMask, matrix: &AffineMatrix) -> Option<Extent> {
    let (x0, y0, x1, y1) = region.bounds()?;
    let (x0, y0, x1, y1) = (x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0);
    Extent::from_points([(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| matrix.apply(x, y)))
}

/// Pastes each patch onto `base` by inverse-warp bilinear sampling. A
/// destination pixel is written when the interpolated region coverage is at
/// least one half; its color is the coverage-weighted bilinear mean of the
/// source pixels inside the region. Later patches overdraw earlier ones.
pub fn composite(base: &RgbImage, patches: &[LimbPatch<'_>]) -> Result<RgbImage, PtmError> {
    let dims = base.dimensions();
    let mut out = base.clone();
    for (k, patch) in patches.iter().enumerate() {
        if patch.pixels.dimensions() != dims || patch.region.dims() != dims {
            return Err(PtmError::DimensionMismatch {
                expected: dims,
                got: patch.region.dims(),
            });
        }
        let inv = patch.matrix.inverse().ok_or(PtmError::SingularMatrix { limb: k })?;
        let Some(ext) = warped_extent(patch.region, &patch.matrix) else {
            continue;
        };
        let (w, h) = (dims.0 as i64, dims.1 as i64);
        let xs = (ext.min_x.floor() as i64 - 1).max(0)..=(ext.max_x.ceil() as i64 + 1).min(w - 1);
        let ys = (ext.min_y.floor() as i64 - 1).max(0)..=(ext.max_y.ceil() as i64 + 1).min(h - 1);
        for py in ys {
            for px in xs.clone() {
                let (sx, sy) = inv.apply(px as f64 + 0.5, py as f64 + 0.5);
                if let Some(rgb) = sample_masked(patch.pixels, patch.region, sx - 0.5, sy - 0.5) {
                    out.put_pixel(px as u32, py as u32, image::Rgb(rgb));
                }
            }
        }
    }
    Ok(out)
}

fn sample_masked(img: &RgbImage, region: &BinaryMask, fx: f64, fy: f64) -> Option<[u8; 3]> {
    if !(fx.is_finite() && fy.is_finite()) {
        return None;
    }
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let taps = [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x0 + 1, y0, tx * (1.0 - ty)),
        (x0, y0 + 1, (1.0 - tx) * ty),
        (x0 + 1, y0 + 1, tx * ty),
    ];
    let mut cover = 0.0;
    let mut acc = [0.0f64; 3];
    for (x, y, wgt) in taps {
        if wgt > 0.0 && region.get_signed(x, y) {
            let p = img.get_pixel(x as u32, y as u32).0;
            cover += wgt;
            for c in 0..3 {
                acc[c] += wgt * p[c] as f64;
            }
        }
    }
    if cover < 0.5 {
        return None;
    }
    Some(acc.map(|v| (v / cover).round().clamp(0.0, 255.0) as u8))
}

/// Limb regions of an instance plus which limbs may be transformed: both
/// endpoints visible and a non-empty mask region.
#[derive(Debug, Clone)]
pub struct LimbRegions {
    pub regions: Vec<BinaryMask>,
    pub transformable: [bool; NUM_LIMBS],
}

impl LimbRegions {
    pub fn new(pose: &Pose, mask: &ParsingMask, table: &LimbTable) -> Self {
        let regions: Vec<BinaryMask> = table.iter().map(|l| mask.limb_region(l)).collect();
        let mut transformable = [false; NUM_LIMBS];
        for limb in table.iter() {
            let visible = |j: usize| pose.joints[j].vis == Visibility::LabeledVisible;
            transformable[limb.id] =
                visible(limb.src_joint) && visible(limb.dst_joint) && !regions[limb.id].is_empty();
        }
        Self { regions, transformable }
    }

    pub fn any_transformable(&self) -> bool {
        self.transformable.iter().any(|&t| t)
    }
}

/// Draws the per-limb gates and transforms in limb-id order.
pub fn plan_ptm<R: Rng + ?Sized>(
    pose: &Pose,
    transformable: &[bool; NUM_LIMBS],
    table: &LimbTable,
    config: &AugConfig,
    rng: &mut R,
) -> Result<LimbPlan, PtmError> {
    if !transformable.iter().any(|&t| t) {
        return Err(PtmError::NoTransformableLimb);
    }
    let mut transforms = [None; NUM_LIMBS];
    for (id, slot) in transforms.iter_mut().enumerate() {
        if transformable[id] && rng.random::<f64>() < config.per_limb_prob {
            *slot = Some(sample_limb_transform(config, rng)?);
        }
    }
    LimbPlan::build(pose, table, transforms)
}

/// Rendered image for `plan` and the extent covered by moved limbs.
pub fn render_ptm(
    image: &RgbImage,
    regions: &LimbRegions,
    plan: &LimbPlan,
    config: &AugConfig,
) -> Result<(RgbImage, Option<Extent>), PtmError> {
    let moved: Vec<usize> = (0..NUM_LIMBS)
        .filter(|&i| plan.moved[i] && !regions.regions[i].is_empty())
        .collect();
    if moved.is_empty() {
        return Ok((image.clone(), None));
    }
    let to_erase: Vec<&BinaryMask> = moved.iter().map(|&i| &regions.regions[i]).collect();
    let (erased, hole) = erase_limbs(image, &to_erase)?;
    let base = inpaint(&erased, &hole, config.inpaint_max_iters, config.inpaint_tol)?;
    let patches: Vec<LimbPatch<'_>> = moved
        .iter()
        .map(|&i| LimbPatch {
            pixels: image,
            region: &regions.regions[i],
            matrix: plan.effective[i],
        })
        .collect();
    let out = composite(&base, &patches)?;
    let extent = moved
        .iter()
        .filter_map(|&i| warped_extent(&regions.regions[i], &plan.effective[i]))
        .reduce(|a, b| a.union(&b));
    Ok((out, extent))
}

/// Box used for a transformed pose: the source box grown to cover the
/// moved keypoints and any warped limb pixels, clipped to the image.
pub fn augmented_bbox(source: &BBox, pose: &Pose, limb_extent: Option<&Extent>, image_dims: (u32, u32)) -> BBox {
    let mut ext = source.extent();
    if let Some(k) = pose.labeled_extent() {
        ext = ext.union(&k);
    }
    if let Some(l) = limb_extent {
        ext = ext.union(l);
    }
    ext.clip(image_dims.0 as f64, image_dims.1 as f64)
        .to_bbox()
        .unwrap_or(*source)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_instance_id: u64,
    pub plan: LimbPlan,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: RgbImage,
    pub pose: Pose,
    pub bbox: BBox,
    /// Filled in by the discriminator.
    pub plausibility: Option<f64>,
    pub provenance: Provenance,
}

/// Full limb transformation of one instance, deterministic in `seed`.
pub fn apply_ptm(
    instance: &PersonInstance,
    image: &RgbImage,
    mask: &ParsingMask,
    table: &LimbTable,
    config: &AugConfig,
    seed: u64,
) -> Result<AugmentedSample, PtmError> {
    if image.dimensions() != mask.dims() {
        return Err(PtmError::DimensionMismatch {
            expected: image.dimensions(),
            got: mask.dims(),
        });
    }
    let regions = LimbRegions::new(&instance.pose, mask, table);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_ptm(&instance.pose, &regions.transformable, table, config, &mut rng)?;
    let pose = transform_pose(&instance.pose, &plan, table);
    let (out, extent) = render_ptm(image, &regions, &plan, config)?;
    let bbox = augmented_bbox(&instance.bbox, &pose, extent.as_ref(), image.dimensions());
    Ok(AugmentedSample {
        image: out,
        pose,
        bbox,
        plausibility: None,
        provenance: Provenance {
            source_instance_id: instance.instance_id,
            plan,
            rng_seed: seed,
        },
    })
}
