//! Procedural stick-figure people with matching parsing masks and COCO
//! annotations. Used for fixtures, demos and the rebalancing experiment.

use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::{
    save_parsing_mask, write_coco_document, CocoAnnotation, CocoCategory, CocoDocument, CocoImage, IngestError,
};
use crate::limbs::*;
use crate::mask::ParsingMask;
use crate::types::{BBox, Extent, Keypoint, PersonInstance, Pose};

/// Default canvas `(width, height)`.
pub const CANVAS: (u32, u32) = (80, 96);

/// Joint angles in degrees, measured from straight down; positive values
/// swing the limb away from the body midline. Index 0 is the person's left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureParams {
    pub center_x: f64,
    pub top: f64,
    pub unit: f64,
    pub upper_arm: [f64; 2],
    pub elbow_bend: [f64; 2],
    pub upper_leg: [f64; 2],
    pub knee_bend: [f64; 2],
    /// Length multipliers for the left and right arm.
    pub arm_scale: [f64; 2],
    pub leg_scale: [f64; 2],
}

impl FigureParams {
    pub fn standing() -> Self {
        Self {
            center_x: CANVAS.0 as f64 / 2.0,
            top: 6.0,
            unit: 1.0,
            upper_arm: [12.0, 12.0],
            elbow_bend: [5.0, 5.0],
            upper_leg: [4.0, 4.0],
            knee_bend: [0.0, 0.0],
            arm_scale: [1.0, 1.0],
            leg_scale: [1.0, 1.0],
        }
    }
}

const HEAD_RADIUS: f64 = 6.0;
const ARM_RADIUS: f64 = 2.0;
const LEG_RADIUS: f64 = 2.5;

/// Keypoints of a figure, all `LabeledVisible`.
pub fn figure_pose(p: &FigureParams) -> Pose {
    let u = p.unit;
    let cx = p.center_x;
    let nose_y = p.top + 8.0 * u;
    let shoulder_y = nose_y + 10.0 * u;
    let hip_y = shoulder_y + 22.0 * u;
    let mut pose = Pose::default();
    let mut set = |j: usize, x: f64, y: f64| pose.joints[j] = Keypoint::visible(x, y);
    set(NOSE, cx, nose_y);
    set(LEFT_EYE, cx + 2.0 * u, nose_y - 2.0 * u);
    set(RIGHT_EYE, cx - 2.0 * u, nose_y - 2.0 * u);
    set(LEFT_EAR, cx + 4.0 * u, nose_y - u);
    set(RIGHT_EAR, cx - 4.0 * u, nose_y - u);

    // side 0 = left = +x in the image (figure faces the camera)
    let sides = [(1.0, LEFT_SHOULDER, LEFT_ELBOW, LEFT_WRIST, LEFT_HIP, LEFT_KNEE, LEFT_ANKLE),
        (-1.0, RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_WRIST, RIGHT_HIP, RIGHT_KNEE, RIGHT_ANKLE)];
    for (k, &(sign, sh, el, wr, hip, kn, an)) in sides.iter().enumerate() {
        let dir = |deg: f64| {
            let a = deg.to_radians();
            (sign * a.sin(), a.cos())
        };
        let s = (cx + sign * 8.0 * u, shoulder_y);
        let d1 = dir(p.upper_arm[k]);
        let ua = u * p.arm_scale[k];
        let e = (s.0 + 12.0 * ua * d1.0, s.1 + 12.0 * ua * d1.1);
        let d2 = dir(p.upper_arm[k] + p.elbow_bend[k]);
        let w = (e.0 + 11.0 * ua * d2.0, e.1 + 11.0 * ua * d2.1);
        let h = (cx + sign * 5.0 * u, hip_y);
        let d3 = dir(p.upper_leg[k]);
        let ul = u * p.leg_scale[k];
        let kk = (h.0 + 16.0 * ul * d3.0, h.1 + 16.0 * ul * d3.1);
        let d4 = dir(p.upper_leg[k] + p.knee_bend[k]);
        let a = (kk.0 + 15.0 * ul * d4.0, kk.1 + 15.0 * ul * d4.1);
        set(sh, s.0, s.1);
        set(el, e.0, e.1);
        set(wr, w.0, w.1);
        set(hip, h.0, h.1);
        set(kn, kk.0, kk.1);
        set(an, a.0, a.1);
    }
    pose
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    dx * dx + dy * dy
}

fn part_color(label: u8) -> [u8; 3] {
    match label {
        part::TORSO => [200, 60, 60],
        part::HEAD => [230, 190, 150],
        part::LEFT_UPPER_ARM | part::RIGHT_UPPER_ARM => [60, 90, 200],
        part::LEFT_LOWER_ARM | part::RIGHT_LOWER_ARM => [80, 150, 230],
        part::LEFT_HAND | part::RIGHT_HAND => [230, 180, 140],
        part::LEFT_UPPER_LEG | part::RIGHT_UPPER_LEG => [50, 140, 70],
        part::LEFT_LOWER_LEG | part::RIGHT_LOWER_LEG => [90, 190, 90],
        part::LEFT_FOOT | part::RIGHT_FOOT => [60, 50, 40],
        _ => [0, 0, 0],
    }
}

/// Rasterizes a figure: image, parsing mask and its pose.
pub fn render_figure(p: &FigureParams, canvas: (u32, u32)) -> (RgbImage, ParsingMask, Pose) {
    let pose = figure_pose(p);
    let j = |k: usize| (pose.joints[k].x, pose.joints[k].y);
    let u = p.unit;
    let head_c = (p.center_x, pose.joints[NOSE].y - u);

    // (label, segment a, segment b, radius); later entries win
    let mut capsules: Vec<(u8, (f64, f64), (f64, f64), f64)> = vec![(part::HEAD, head_c, head_c, HEAD_RADIUS * u)];
    let torso = [j(LEFT_SHOULDER), j(RIGHT_SHOULDER), j(RIGHT_HIP), j(LEFT_HIP)];
    let limbs = [
        (part::LEFT_UPPER_LEG, LEFT_HIP, LEFT_KNEE, LEG_RADIUS),
        (part::RIGHT_UPPER_LEG, RIGHT_HIP, RIGHT_KNEE, LEG_RADIUS),
        (part::LEFT_LOWER_LEG, LEFT_KNEE, LEFT_ANKLE, LEG_RADIUS),
        (part::RIGHT_LOWER_LEG, RIGHT_KNEE, RIGHT_ANKLE, LEG_RADIUS),
        (part::LEFT_UPPER_ARM, LEFT_SHOULDER, LEFT_ELBOW, ARM_RADIUS),
        (part::RIGHT_UPPER_ARM, RIGHT_SHOULDER, RIGHT_ELBOW, ARM_RADIUS),
        (part::LEFT_LOWER_ARM, LEFT_ELBOW, LEFT_WRIST, ARM_RADIUS),
        (part::RIGHT_LOWER_ARM, RIGHT_ELBOW, RIGHT_WRIST, ARM_RADIUS),
    ];
    for &(label, a, b, r) in &limbs {
        capsules.push((label, j(a), j(b), r * u));
    }
    capsules.push((part::LEFT_HAND, j(LEFT_WRIST), j(LEFT_WRIST), 2.0 * u));
    capsules.push((part::RIGHT_HAND, j(RIGHT_WRIST), j(RIGHT_WRIST), 2.0 * u));
    capsules.push((part::LEFT_FOOT, j(LEFT_ANKLE), j(LEFT_ANKLE), 2.2 * u));
    capsules.push((part::RIGHT_FOOT, j(RIGHT_ANKLE), j(RIGHT_ANKLE), 2.2 * u));

    let (w, h) = canvas;
    let mut labels = vec![0u8; (w * h) as usize];
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        // soft background gradient
        image::Rgb([(180 + x / 4) as u8, (200 - y / 4) as u8, 170])
    });
    for y in 0..h {
        for x in 0..w {
            let pt = (x as f64 + 0.5, y as f64 + 0.5);
            let mut label = 0u8;
            if point_in_quad(pt, &torso) {
                label = part::TORSO;
            }
            for &(l, a, b, r) in &capsules {
                if seg_dist2(pt, a, b) <= r * r {
                    label = l;
                }
            }
            if label != 0 {
                labels[(y * w + x) as usize] = label;
                let c = part_color(label);
                let shade = ((x + 2 * y) % 7) as u8;
                img.put_pixel(x, y, image::Rgb([c[0].saturating_sub(shade), c[1].saturating_sub(shade), c[2]]));
            }
        }
    }
    (img, ParsingMask::from_raw(w, h, labels), pose)
}

fn point_in_quad(p: (f64, f64), q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

/// Keypoint extent padded to include the head and limb thickness, clipped to
/// the canvas.
pub fn figure_bbox(pose: &Pose, canvas: (u32, u32)) -> BBox {
    let ext = pose.labeled_extent().expect("figure has keypoints");
    let pad = Extent {
        min_x: ext.min_x - 3.0,
        min_y: ext.min_y - HEAD_RADIUS - 1.0,
        max_x: ext.max_x + 3.0,
        max_y: ext.max_y + 3.0,
    };
    pad.clip(canvas.0 as f64, canvas.1 as f64).to_bbox().expect("non-degenerate")
}

/// A pose archetype with per-angle Gaussian jitter (degrees), uniform
/// per-limb length jitter (relative) and Gaussian keypoint annotation noise
/// (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Archetype {
    pub name: &'static str,
    pub base: FigureParams,
    pub angle_jitter: f64,
    pub length_jitter: f64,
    pub keypoint_noise: f64,
}

impl Archetype {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FigureParams {
        let n = Normal::new(0.0, self.angle_jitter).expect("finite jitter");
        let mut p = self.base;
        for v in p
            .upper_arm
            .iter_mut()
            .chain(p.elbow_bend.iter_mut())
            .chain(p.upper_leg.iter_mut())
            .chain(p.knee_bend.iter_mut())
        {
            *v += n.sample(rng);
        }
        if self.length_jitter > 0.0 {
            let r = self.length_jitter;
            for v in p.arm_scale.iter_mut().chain(p.leg_scale.iter_mut()) {
                *v *= rng.random_range(1.0 - r..1.0 + r);
            }
        }
        p.unit *= rng.random_range(0.95..1.05);
        p.center_x += rng.random_range(-3.0..3.0);
        p.top += rng.random_range(-2.0..2.0);
        p
    }

    /// Adds annotation noise to an already rendered pose.
    pub fn perturb<R: Rng + ?Sized>(&self, pose: &mut Pose, rng: &mut R) {
        if self.keypoint_noise <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, self.keypoint_noise).expect("finite noise");
        for kp in pose.joints.iter_mut() {
            kp.x += n.sample(rng);
            kp.y += n.sample(rng);
        }
    }
}

/// Standing, left-arm-raised and right-leg-raised archetypes.
pub fn default_archetypes() -> [Archetype; 3] {
    let standing = FigureParams::standing();
    let mut waving = standing;
    waving.upper_arm[0] = 100.0;
    waving.elbow_bend[0] = 15.0;
    let mut kicking = standing;
    kicking.upper_leg[1] = 75.0;
    kicking.knee_bend[1] = 10.0;
    let make = |name, base| Archetype {
        name,
        base,
        angle_jitter: 10.0,
        length_jitter: 0.15,
        keypoint_noise: 0.5,
    };
    [make("standing", standing), make("waving", waving), make("kicking", kicking)]
}

/// One rendered person per image.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub instance: PersonInstance,
    pub image: RgbImage,
    pub mask: ParsingMask,
    pub cluster: usize,
}

/// Draws `n` figures whose archetype counts follow `proportions` exactly
/// (largest-remainder rounding), shuffled by `seed`.
pub fn long_tailed_set(n: usize, archetypes: &[Archetype], proportions: &[f64], seed: u64) -> Vec<SyntheticSample> {
    assert_eq!(archetypes.len(), proportions.len());
    let total: f64 = proportions.iter().sum();
    let raw: Vec<f64> = proportions.iter().map(|p| p / total * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, cluster)| {
            let params = archetypes[cluster].sample(&mut rng);
            let (image, mask, mut pose) = render_figure(&params, CANVAS);
            archetypes[cluster].perturb(&mut pose, &mut rng);
            let bbox = figure_bbox(&pose, CANVAS);
            let id = i as u64 + 1;
            SyntheticSample {
                instance: PersonInstance {
                    image_id: id,
                    instance_id: id,
                    bbox,
                    pose,
                    mask_ref: None,
                    area: bbox.w * bbox.h,
                },
                image,
                mask,
                cluster,
            }
        })
        .collect()
}

/// Writes `annotations.json`, `images/<id>.png` and
/// `masks/<image_id>_<instance_id>.png` under `dir`.
pub fn write_set(dir: &Path, samples: &[SyntheticSample]) -> Result<(), IngestError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IngestError::Io { path, source }
    };
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(io(&images_dir))?;
    std::fs::create_dir_all(&masks_dir).map_err(io(&masks_dir))?;
    let mut doc = CocoDocument {
        info: None,
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![CocoCategory::default()],
    };
    for s in samples {
        let inst = &s.instance;
        let file_name = format!("{:06}.png", inst.image_id);
        let img_path = images_dir.join(&file_name);
        s.image.save(&img_path).map_err(|e| IngestError::Decode {
            path: img_path.clone(),
            message: e.to_string(),
        })?;
        save_parsing_mask(&crate::ingest::mask_path(&masks_dir, inst), &s.mask)?;
        doc.images.push(CocoImage {
            id: inst.image_id,
            file_name,
            width: s.image.width(),
            height: s.image.height(),
        });
        doc.annotations.push(CocoAnnotation::from_instance(inst));
    }
    write_coco_document(&dir.join("annotations.json"), &doc)
}
