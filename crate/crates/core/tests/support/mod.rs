//! Independent reference implementations used by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use posetrans::limbs::{LimbTable, COCO_SIGMAS, NUM_JOINTS};
use posetrans::discriminator::DiscriminatorModel;
use posetrans::mask::BinaryMask;
use posetrans::metrics::Prediction;
use posetrans::pcm::GmmModel;
use posetrans::synthetic::{figure_bbox, figure_pose, FigureParams, CANVAS};
use posetrans::{LimbTransform, NormalizedPose, PersonInstance, Pose};
use rand::Rng;

// ---------------------------------------------------------------------------
// Poses

/// Stick figure with every joint angle drawn uniformly.
pub fn random_figure<R: Rng + ?Sized>(rng: &mut R) -> FigureParams {
    let mut p = FigureParams::standing();
    for v in p.upper_arm.iter_mut().chain(p.upper_leg.iter_mut()) {
        *v = rng.random_range(-40.0..140.0);
    }
    for v in p.elbow_bend.iter_mut().chain(p.knee_bend.iter_mut()) {
        *v = rng.random_range(-60.0..120.0);
    }
    for v in p.arm_scale.iter_mut().chain(p.leg_scale.iter_mut()) {
        *v = rng.random_range(0.8..1.2);
    }
    p.unit = rng.random_range(0.6..1.4);
    p.center_x = rng.random_range(20.0..60.0);
    p.top = rng.random_range(0.0..10.0);
    p
}

/// A labeled person built from `params`, boxed on the default canvas.
pub fn figure_instance(params: &FigureParams, image_id: u64, id: u64) -> PersonInstance {
    let pose = figure_pose(params);
    let bbox = figure_bbox(&pose, CANVAS);
    PersonInstance {
        image_id,
        instance_id: id,
        bbox,
        pose,
        mask_ref: None,
        area: bbox.w * bbox.h,
    }
}

// ---------------------------------------------------------------------------
// Affine and kinematic chain

/// The printed unit-scale rotation matrix about `c`, entry by entry.
pub fn printed_rotation(r: f64, c: (f64, f64)) -> [[f64; 3]; 3] {
    let (cx, cy) = c;
    [
        [r.cos(), -r.sin(), (1.0 - r.cos()) * cx + cy * r.sin()],
        [r.sin(), r.cos(), (1.0 - r.cos()) * cy - cx * r.sin()],
        [0.0, 0.0, 1.0],
    ]
}

fn polar_move(origin: (f64, f64), v: (f64, f64), scale: f64, rot: f64) -> (f64, f64) {
    let len = v.0.hypot(v.1) * scale;
    let ang = v.1.atan2(v.0) + rot;
    (origin.0 + len * ang.cos(), origin.1 + len * ang.sin())
}

/// Moves each limb chain in two explicit steps: swing the upper segment about
/// its root, then re-attach the lower segment at the moved middle joint with
/// the accumulated scale and rotation.
pub fn two_step_chain(pose: &Pose, table: &LimbTable, transforms: &[Option<LimbTransform>]) -> Pose {
    let mut out = *pose;
    for upper in table.iter().filter(|l| l.parent.is_none()) {
        let lower = table.child_of(upper.id).expect("every upper limb has a child");
        let root = pose.joints[upper.src_joint];
        let mid = pose.joints[upper.dst_joint];
        let tip = pose.joints[lower.dst_joint];
        let (su, ru) = transforms[upper.id].map(|t| (t.scale, t.rotation)).unwrap_or((1.0, 0.0));
        let (sl, rl) = transforms[lower.id].map(|t| (t.scale, t.rotation)).unwrap_or((1.0, 0.0));
        let new_mid = polar_move((root.x, root.y), (mid.x - root.x, mid.y - root.y), su, ru);
        let new_tip = polar_move(new_mid, (tip.x - mid.x, tip.y - mid.y), su * sl, ru + rl);
        if transforms[upper.id].is_some() {
            out.joints[upper.dst_joint].x = new_mid.0;
            out.joints[upper.dst_joint].y = new_mid.1;
        }
        if transforms[upper.id].is_some() || transforms[lower.id].is_some() {
            out.joints[lower.dst_joint].x = new_tip.0;
            out.joints[lower.dst_joint].y = new_tip.1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Inpainting

/// Solves the discrete Laplace equation on the hole directly (dense LU);
/// neighbors outside the raster are dropped from the stencil.
pub fn direct_laplace(field: &[f64], hole: &BinaryMask) -> Vec<f64> {
    let (w, h) = (hole.width() as i64, hole.height() as i64);
    let idx: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| hole.get(x as u32, y as u32))
        .collect();
    let mut slot = vec![usize::MAX; (w * h) as usize];
    for (r, &(x, y)) in idx.iter().enumerate() {
        slot[(y * w + x) as usize] = r;
    }
    let n = idx.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (r, &(x, y)) in idx.iter().enumerate() {
        for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            a[(r, r)] += 1.0;
            let k = (ny * w + nx) as usize;
            if slot[k] != usize::MAX {
                a[(r, slot[k])] -= 1.0;
            } else {
                b[r] += field[k];
            }
        }
    }
    let sol = a.lu().solve(&b).expect("hole touches known pixels");
    let mut out = field.to_vec();
    for (r, &(x, y)) in idx.iter().enumerate() {
        out[(y * w + x) as usize] = sol[r];
    }
    out
}

pub fn channel(img: &image::RgbImage, ch: usize) -> Vec<f64> {
    img.as_raw().iter().skip(ch).step_by(3).map(|&v| v as f64).collect()
}

// ---------------------------------------------------------------------------
// Mixture rarity

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let diff = x - mean;
    let maha = (diff.transpose() * inv * &diff)[(0, 0)];
    let log_det = cov.clone().lu().determinant().ln();
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + maha)
}

/// `sum_n alpha_n w^n` for one query, from explicit inverses and determinants.
pub fn explicit_rarity(model: &GmmModel, x: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    let logs: Vec<f64> = (0..model.n_components())
        .map(|k| model.weights()[k].ln() + log_gauss(&xv, &model.means()[k], &model.covariances()[k]))
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    logs.iter()
        .zip(model.weights())
        .map(|(l, a)| a * (l - top).exp() / z)
        .sum()
}

/// Index of the smallest value, first one on ties.
pub fn brute_argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..values.len() {
        if values[i] < values[best] {
            best = i;
        }
    }
    best
}

pub fn pose_from_vec(v: &[f64]) -> NormalizedPose {
    NormalizedPose::from_feature_vector(v).unwrap()
}

// ---------------------------------------------------------------------------
// Discriminator oracles

/// Plain logistic regression fitted by full-batch gradient descent.
pub struct Logistic {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Logistic {
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], epochs: usize, lr: f64) -> Logistic {
        let d = xs[0].len();
        let mut m = Logistic { w: vec![0.0; d], b: 0.0 };
        let n = xs.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(ys) {
                let e = m.prob(x) - y;
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += e * v;
                }
                gb += e;
            }
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= lr * g / n;
            }
            m.b -= lr * gb / n;
        }
        m
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        let z: f64 = self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let ok = xs.iter().zip(ys).filter(|(x, &y)| (self.prob(x) >= 0.5) == (y > 0.5)).count();
        ok as f64 / xs.len() as f64
    }
}

fn set_param(m: &mut DiscriminatorModel, layer: usize, k: usize, v: f64) {
    let l = &mut m.layers[layer];
    let nw = l.weights.len();
    if k < nw {
        l.weights[k] = v;
    } else {
        l.biases[k - nw] = v;
    }
}

/// Max relative error between analytic and central-difference gradients over
/// every weight and bias of every layer.
pub fn gradient_check(m: &DiscriminatorModel, xs: &[Vec<f64>], ts: &[f64]) -> f64 {
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (_, g) = m.loss_and_grad(&refs, ts).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = m.clone();
    for li in 0..m.layers.len() {
        let params = m.layers[li].weights.iter().chain(&m.layers[li].biases);
        let grads = g[li].weights.iter().chain(&g[li].biases);
        for (k, (&orig, &an)) in params.zip(grads).enumerate() {
            set_param(&mut probe, li, k, orig + h);
            let up = probe.loss(&refs, ts).unwrap();
            set_param(&mut probe, li, k, orig - h);
            let down = probe.loss(&refs, ts).unwrap();
            set_param(&mut probe, li, k, orig);
            let fd = (up - down) / (2.0 * h);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(err);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Keypoint AP

pub struct BruteReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

fn oks_ref(pred: &Prediction, gt: &PersonInstance) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for j in 0..NUM_JOINTS {
        let kp = gt.pose.joints[j];
        if !kp.is_labeled() {
            continue;
        }
        let dx = pred.keypoints[j][0] - kp.x;
        let dy = pred.keypoints[j][1] - kp.y;
        let var = (2.0 * COCO_SIGMAS[j]).powi(2);
        total += (-(dx * dx + dy * dy) / var / (2.0 * gt.area)).exp();
        n += 1.0;
    }
    total / n
}

fn kp_area(p: &Prediction) -> f64 {
    let xs: Vec<f64> = p.keypoints.iter().map(|k| k[0]).collect();
    let ys: Vec<f64> = p.keypoints.iter().map(|k| k[1]).collect();
    let span = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
    span(&xs) * span(&ys)
}

/// Returns `(ap, max recall)` at one threshold for GTs with area in `(lo, hi]`,
/// or `None` without any such GT.
fn brute_threshold(preds: &[Prediction], gts: &[PersonInstance], thr: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let in_range = |a: f64| (a > lo && a <= hi) || (lo == 0.0 && a == 0.0);
    let images: BTreeSet<u64> = gts.iter().map(|g| g.image_id).chain(preds.iter().map(|p| p.image_id)).collect();
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut positives = 0usize;
    let cut = thr.min(1.0 - 1e-10);
    for img in images {
        let g: Vec<&PersonInstance> = gts.iter().filter(|x| x.image_id == img).collect();
        let mut p: Vec<&Prediction> = preds.iter().filter(|x| x.image_id == img).collect();
        p.sort_by(|a, b| b.score.total_cmp(&a.score));
        p.truncate(20);
        let ignore: Vec<bool> = g.iter().map(|x| !in_range(x.area)).collect();
        positives += ignore.iter().filter(|&&i| !i).count();
        let mut taken = vec![false; g.len()];
        for d in &p {
            let ok: Vec<f64> = g.iter().map(|x| oks_ref(d, x)).collect();
            let pick = |want_ignored: bool| {
                let mut best: Option<usize> = None;
                for k in 0..g.len() {
                    if taken[k] || ignore[k] != want_ignored || ok[k] < cut {
                        continue;
                    }
                    if best.is_none_or(|b| ok[k] > ok[b]) {
                        best = Some(k);
                    }
                }
                best
            };
            match pick(false).or_else(|| pick(true)) {
                Some(k) => {
                    taken[k] = true;
                    if !ignore[k] {
                        ranked.push((d.score, true));
                    }
                }
                None => {
                    if in_range(kp_area(d)) {
                        ranked.push((d.score, false));
                    }
                }
            }
        }
    }
    if positives == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / positives as f64);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = (0..ranked.len())
            .filter(|&k| rec[k] >= r)
            .map(|k| prec[k])
            .fold(0.0, f64::max);
        sum += best;
    }
    Some((sum / 101.0, rec.last().copied().unwrap_or(0.0)))
}

fn brute_range(preds: &[Prediction], gts: &[PersonInstance], lo: f64, hi: f64) -> Option<(f64, f64, Vec<f64>)> {
    let per: Option<Vec<(f64, f64)>> = (0..10)
        .map(|i| brute_threshold(preds, gts, 0.5 + 0.05 * i as f64, lo, hi))
        .collect();
    let per = per?;
    let ap = per.iter().map(|p| p.0).sum::<f64>() / 10.0;
    let ar = per.iter().map(|p| p.1).sum::<f64>() / 10.0;
    Some((ap, ar, per.iter().map(|p| p.0).collect()))
}

pub fn brute_force_ap(preds: &[Prediction], gts: &[PersonInstance]) -> BruteReport {
    let (ap, ar, per) = brute_range(preds, gts, 0.0, f64::INFINITY).expect("ground truth present");
    BruteReport {
        ap,
        ap50: per[0],
        ap75: per[5],
        ar,
        ap_medium: brute_range(preds, gts, 32.0 * 32.0, 96.0 * 96.0).map(|r| r.0),
        ap_large: brute_range(preds, gts, 96.0 * 96.0, f64::INFINITY).map(|r| r.0),
    }
}

/// Small random evaluation problem: up to 5 images with up to 4 people each,
/// predictions that are jittered copies of ground truth or stray poses, and
/// scores on a coarse grid so ties occur.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R) -> (Vec<Prediction>, Vec<PersonInstance>) {
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let n_img = rng.random_range(1..=5u64);
    let mut id = 1;
    for img in 1..=n_img {
        let n_gt = rng.random_range(if img == 1 { 1 } else { 0 }..=4);
        let mut here = Vec::new();
        for _ in 0..n_gt {
            let mut g = figure_instance(&random_figure(rng), img, id);
            id += 1;
            for kp in g.pose.joints.iter_mut() {
                if rng.random_bool(0.15) {
                    *kp = posetrans::Keypoint::missing();
                }
            }
            if g.pose.num_labeled() == 0 {
                g.pose.joints[0] = posetrans::Keypoint::visible(10.0, 10.0);
            }
            g.area = [rng.random_range(200.0..1024.0), rng.random_range(1025.0..9216.0), rng.random_range(9217.0..20000.0)]
                [rng.random_range(0..3)];
            here.push(g);
        }
        let n_pred = if rng.random_bool(0.1) { rng.random_range(15..25) } else { rng.random_range(0..6) };
        for _ in 0..n_pred {
            let score = rng.random_range(0..10) as f64 / 10.0;
            let p = if !here.is_empty() && rng.random_bool(0.7) {
                let src: &PersonInstance = &here[rng.random_range(0..here.len())];
                let noise = rng.random_range(0.0..6.0);
                let mut pose = src.pose;
                for kp in pose.joints.iter_mut() {
                    kp.x += rng.random_range(-noise..=noise);
                    kp.y += rng.random_range(-noise..=noise);
                }
                Prediction::from_pose(img, &pose, score)
            } else {
                let f = figure_pose(&random_figure(rng));
                Prediction::from_pose(img, &f, score)
            };
            preds.push(p);
        }
        gts.extend(here);
    }
    (preds, gts)
}
