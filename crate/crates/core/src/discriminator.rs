//! Pose plausibility scorer: a small MLP over hand-built pose features,
//! trained with the least-squares GAN objective against transformed poses.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limbs::*;
use crate::types::NormalizedPose;

pub const NUM_RAW_FEATURES: usize = 62;
pub const NUM_FEATURES: usize = 2 * NUM_RAW_FEATURES;
pub const FORMAT_TAG: &str = "posetrans-disc";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound applied to lower/upper limb length ratios.
pub const MAX_LENGTH_RATIO: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("need at least {need} real poses, got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("checkpoint {path}: {message}")]
    File { path: String, message: String },
}

pub const MIN_REAL_POSES: usize = 100;

// ---------------------------------------------------------------------------
// Features

/// Arm and leg chains as (proximal, middle, distal) joints.
const CHAINS: [(usize, usize, usize); 4] = [
    (LEFT_SHOULDER, LEFT_ELBOW, LEFT_WRIST),
    (RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_WRIST),
    (LEFT_HIP, LEFT_KNEE, LEFT_ANKLE),
    (RIGHT_HIP, RIGHT_KNEE, RIGHT_ANKLE),
];

/// Limb endpoints in limb-id order.
const SEGMENTS: [(usize, usize); NUM_LIMBS] = [
    (LEFT_SHOULDER, LEFT_ELBOW),
    (RIGHT_SHOULDER, RIGHT_ELBOW),
    (LEFT_HIP, LEFT_KNEE),
    (RIGHT_HIP, RIGHT_KNEE),
    (LEFT_ELBOW, LEFT_WRIST),
    (RIGHT_ELBOW, RIGHT_WRIST),
    (LEFT_KNEE, LEFT_ANKLE),
    (RIGHT_KNEE, RIGHT_ANKLE),
];

/// 62 values followed by a 62-entry presence mask (1 present, 0 missing).
///
/// Layout: 34 joint coordinates; (sin, cos) of the 8 limb directions; the
/// 4 lower/upper length ratios (left arm, right arm, left leg, right leg);
/// (sin, cos) of the elbow and knee interior angles in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeatures(pub Vec<f64>);

impl PoseFeatures {
    pub fn values(&self) -> &[f64] {
        &self.0[..NUM_RAW_FEATURES]
    }

    pub fn presence(&self) -> &[f64] {
        &self.0[NUM_RAW_FEATURES..]
    }
}

pub fn extract_pose_features(pose: &NormalizedPose) -> PoseFeatures {
    let mut f = vec![0.0; NUM_FEATURES];
    let put = |f: &mut Vec<f64>, i: usize, v: f64| {
        f[i] = v;
        f[NUM_RAW_FEATURES + i] = 1.0;
    };
    let labeled = |j: usize| pose.vis[j].is_labeled();
    let p = |j: usize| pose.coords[j];
    let sub = |a: [f64; 2], b: [f64; 2]| [a[0] - b[0], a[1] - b[1]];
    let norm = |v: [f64; 2]| v[0].hypot(v[1]);

    for j in 0..NUM_JOINTS {
        if labeled(j) {
            put(&mut f, 2 * j, p(j)[0]);
            put(&mut f, 2 * j + 1, p(j)[1]);
        }
    }
    let mut base = 2 * NUM_JOINTS;
    for (k, &(a, b)) in SEGMENTS.iter().enumerate() {
        if labeled(a) && labeled(b) {
            let d = sub(p(b), p(a));
            let len = norm(d);
            if len > 0.0 {
                put(&mut f, base + 2 * k, d[1] / len);
                put(&mut f, base + 2 * k + 1, d[0] / len);
            }
        }
    }
    base += 2 * NUM_LIMBS;
    for (k, &(a, m, b)) in CHAINS.iter().enumerate() {
        if labeled(a) && labeled(m) && labeled(b) {
            let upper = norm(sub(p(m), p(a)));
            let lower = norm(sub(p(b), p(m)));
            if upper > 0.0 {
                put(&mut f, base + k, (lower / upper).min(MAX_LENGTH_RATIO));
            }
        }
    }
    base += CHAINS.len();
    for (k, &(a, m, b)) in CHAINS.iter().enumerate() {
        if labeled(a) && labeled(m) && labeled(b) {
            let u = sub(p(a), p(m));
            let v = sub(p(b), p(m));
            let (nu, nv) = (norm(u), norm(v));
            if nu > 0.0 && nv > 0.0 {
                // interior angle in [0, pi]
                let cross = (u[0] * v[1] - u[1] * v[0]).abs();
                let dot = u[0] * v[0] + u[1] * v[1];
                let theta = cross.atan2(dot);
                put(&mut f, base + 2 * k, theta.sin());
                put(&mut f, base + 2 * k + 1, theta.cos());
            }
        }
    }
    PoseFeatures(f)
}

// ---------------------------------------------------------------------------
// Network

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Dense {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn xavier<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Dense {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
    /// Widened transform ranges used to produce fakes.
    pub fake_scale_range: [f64; 2],
    pub fake_rotation_range_deg: [f64; 2],
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            epochs: 200,
            holdout_fraction: 0.2,
            fake_scale_range: [0.4, 1.8],
            fake_rotation_range_deg: [-120.0, 120.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

/// MLP with tanh hidden layers and a sigmoid output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorModel {
    pub layers: Vec<Dense>,
    pub config: DiscConfig,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept (lowest held-out loss).
    pub best_epoch: Option<usize>,
}

/// Per-layer gradients, same shapes as the model's layers.
pub type Gradients = Vec<Dense>;

impl DiscriminatorModel {
    pub fn from_layers(layers: Vec<Dense>, config: DiscConfig) -> Result<Self, DiscError> {
        if layers.is_empty() {
            return Err(DiscError::InvalidModel("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(DiscError::InvalidModel(format!("layer {i} has inconsistent shape")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(DiscError::InvalidModel(format!("layer {i} does not chain")));
            }
        }
        if layers.last().unwrap().outputs != 1 {
            return Err(DiscError::InvalidModel("output layer must have one unit".into()));
        }
        Ok(Self {
            layers,
            config,
            history: Vec::new(),
            best_epoch: None,
        })
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, config: &DiscConfig, rng: &mut R) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let layers = sizes.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect();
        Self::from_layers(layers, config.clone()).expect("consistent shapes")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    fn check(&self, x: &[f64]) -> Result<(), DiscError> {
        if x.len() != self.input_dim() {
            return Err(DiscError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(l.outputs);
            l.affine(acts.last().unwrap(), &mut z);
            if i == last {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, DiscError> {
        self.check(x)?;
        Ok(self.activations(x).last().unwrap()[0])
    }

    /// Plausibility of a pose. The image is accepted for interface
    /// compatibility and currently unused.
    pub fn score(&self, pose: &NormalizedPose, _image: Option<&RgbImage>) -> Result<f64, DiscError> {
        self.forward(&extract_pose_features(pose).0)
    }

    /// LS-GAN loss `mean_real (D-1)^2 + mean_fake D^2` over a batch and its
    /// gradient. `targets` are 1 for real and 0 for fake.
    pub fn loss_and_grad(&self, xs: &[&[f64]], targets: &[f64]) -> Result<(f64, Gradients), DiscError> {
        let n_real = targets.iter().filter(|&&t| t > 0.5).count();
        let n_fake = targets.len() - n_real;
        let mut grads: Gradients = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        for (x, &t) in xs.iter().zip(targets) {
            self.check(x)?;
            let c = if t > 0.5 { 1.0 / n_real as f64 } else { 1.0 / n_fake as f64 };
            let acts = self.activations(x);
            let d = acts[last + 1][0];
            loss += c * (d - t) * (d - t);
            // delta = dL/dz for the current layer
            let mut delta = vec![2.0 * c * (d - t) * d * (1.0 - d)];
            for li in (0..=last).rev() {
                let l = &self.layers[li];
                let input = &acts[li];
                let g = &mut grads[li];
                for o in 0..l.outputs {
                    g.biases[o] += delta[o];
                    let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += delta[o] * v;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut prev = vec![0.0; l.inputs];
                for o in 0..l.outputs {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, xs: &[&[f64]], targets: &[f64]) -> Result<f64, DiscError> {
        let (mut sr, mut nr, mut sf, mut nf) = (0.0, 0usize, 0.0, 0usize);
        for (x, &t) in xs.iter().zip(targets) {
            let d = self.forward(x)?;
            if t > 0.5 {
                sr += (d - 1.0) * (d - 1.0);
                nr += 1;
            } else {
                sf += d * d;
                nf += 1;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok(mean(sr, nr) + mean(sf, nf))
    }

    pub fn weights_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DiscError> {
        let file = Checkpoint {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            model: self.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&file).expect("serializable");
        std::fs::write(path, bytes).map_err(|e| DiscError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DiscError> {
        let err = |message: String| DiscError::File {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let file: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
            return Err(err(format!("unsupported format {} v{}", file.format, file.version)));
        }
        let m = file.model;
        let mut checked = DiscriminatorModel::from_layers(m.layers, m.config)?;
        checked.history = m.history;
        checked.best_epoch = m.best_epoch;
        Ok(checked)
    }
}

/// Checkpoint record: format tag, version, and the model (layer shapes,
/// row-major weights, config, training history).
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: DiscriminatorModel,
}

pub fn is_plausible(model: &DiscriminatorModel, pose: &NormalizedPose, threshold: f64) -> Result<bool, DiscError> {
    Ok(model.score(pose, None)? >= threshold)
}

// ---------------------------------------------------------------------------
// Training

fn stratified_split<R: Rng + ?Sized>(n: usize, holdout: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = ((n as f64) * holdout).round() as usize;
    let k = if holdout > 0.0 { k.clamp(1, n.saturating_sub(1)) } else { 0 };
    let held = idx[..k].to_vec();
    let train = idx[k..].to_vec();
    (train, held)
}

/// Trains on precomputed feature vectors with momentum SGD and returns the
/// weights with the lowest held-out loss.
pub fn train_on_features<R: Rng + ?Sized>(
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    config: &DiscConfig,
    rng: &mut R,
) -> Result<DiscriminatorModel, DiscError> {
    let dim = real.first().or(fake.first()).map(|x| x.len()).unwrap_or(0);
    let mut model = DiscriminatorModel::init(dim, config, rng);

    let (rt, rh) = stratified_split(real.len(), config.holdout_fraction, rng);
    let (ft, fh) = stratified_split(fake.len(), config.holdout_fraction, rng);
    let mut train: Vec<(&[f64], f64)> = rt.iter().map(|&i| (real[i].as_slice(), 1.0)).collect();
    train.extend(ft.iter().map(|&i| (fake[i].as_slice(), 0.0)));
    let mut held: Vec<(&[f64], f64)> = rh.iter().map(|&i| (real[i].as_slice(), 1.0)).collect();
    held.extend(fh.iter().map(|&i| (fake[i].as_slice(), 0.0)));
    if held.is_empty() {
        held = train.clone();
    }
    let held_x: Vec<&[f64]> = held.iter().map(|s| s.0).collect();
    let held_t: Vec<f64> = held.iter().map(|s| s.1).collect();

    let mut velocity: Gradients = model.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
    let mut best: Option<(f64, Vec<Dense>, usize)> = None;
    let batch = config.batch_size.max(1);

    for epoch in 0..config.epochs {
        train.shuffle(rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in train.chunks(batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|s| s.0).collect();
            let ts: Vec<f64> = chunk.iter().map(|s| s.1).collect();
            let (loss, grads) = model.loss_and_grad(&xs, &ts)?;
            loss_sum += loss;
            batches += 1;
            for ((layer, g), v) in model.layers.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
                let gs = g.weights.iter().chain(&g.biases);
                let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
                for ((p, g), v) in params.zip(gs).zip(vs) {
                    *v = config.momentum * *v - config.learning_rate * g;
                    *p += *v;
                }
            }
            if !loss.is_finite() || !model.weights_finite() {
                return Err(DiscError::Diverged { epoch });
            }
        }
        let heldout_loss = model.loss(&held_x, &held_t)?;
        if !heldout_loss.is_finite() {
            return Err(DiscError::Diverged { epoch });
        }
        let correct = held
            .iter()
            .filter(|(x, t)| (model.forward(x).unwrap() >= 0.5) == (*t > 0.5))
            .count();
        model.history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            heldout_loss,
            heldout_accuracy: correct as f64 / held.len() as f64,
        });
        if best.as_ref().is_none_or(|b| heldout_loss < b.0) {
            best = Some((heldout_loss, model.layers.clone(), epoch));
        }
    }
    if let Some((_, layers, epoch)) = best {
        model.layers = layers;
        model.best_epoch = Some(epoch);
    }
    Ok(model)
}

/// Trains D on real poses against fakes. `fake_generator(i, rng)` produces a
/// transformed version of real pose `i`, or `None` when none can be made.
pub fn train_discriminator<R, G>(
    real: &[NormalizedPose],
    mut fake_generator: G,
    config: &DiscConfig,
    rng: &mut R,
) -> Result<DiscriminatorModel, DiscError>
where
    R: Rng + ?Sized,
    G: FnMut(usize, &mut R) -> Option<NormalizedPose>,
{
    if real.len() < MIN_REAL_POSES {
        return Err(DiscError::InsufficientData {
            have: real.len(),
            need: MIN_REAL_POSES,
        });
    }
    let real_f: Vec<Vec<f64>> = real.iter().map(|p| extract_pose_features(p).0).collect();
    let fake_f: Vec<Vec<f64>> = (0..real.len())
        .filter_map(|i| fake_generator(i, rng))
        .map(|p| extract_pose_features(&p).0)
        .collect();
    if fake_f.is_empty() {
        return Err(DiscError::InsufficientData { have: 0, need: 1 });
    }
    train_on_features(&real_f, &fake_f, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Visibility;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose_with(points: &[(usize, [f64; 2])]) -> NormalizedPose {
        let mut p = NormalizedPose {
            coords: [NormalizedPose::FILL; NUM_JOINTS],
            vis: [Visibility::NotLabeled; NUM_JOINTS],
        };
        for &(j, c) in points {
            p.coords[j] = c;
            p.vis[j] = Visibility::LabeledVisible;
        }
        p
    }

    const ELBOW_L: usize = 2 * NUM_JOINTS + 2 * NUM_LIMBS + 4;
    const RATIO_L: usize = 2 * NUM_JOINTS + 2 * NUM_LIMBS;

    #[test]
    fn missing_pose_is_all_zero() {
        let f = extract_pose_features(&pose_with(&[]));
        assert_eq!(f.0.len(), NUM_FEATURES);
        assert!(f.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_arm() {
        let p = pose_with(&[(LEFT_SHOULDER, [0.4, 0.5]), (LEFT_ELBOW, [0.5, 0.5]), (LEFT_WRIST, [0.6, 0.5])]);
        let f = extract_pose_features(&p);
        assert!(f.0[ELBOW_L].abs() < 1e-12);
        assert!((f.0[ELBOW_L + 1] + 1.0).abs() < 1e-12);
        assert!((f.0[RATIO_L] - 1.0).abs() < 1e-12);
        assert_eq!(f.presence()[ELBOW_L], 1.0);
        // right arm absent
        assert_eq!(f.presence()[ELBOW_L + 2], 0.0);
        assert_eq!(f.0[ELBOW_L + 2], 0.0);
    }

    #[test]
    fn right_angle_elbow() {
        let p = pose_with(&[(LEFT_SHOULDER, [0.4, 0.5]), (LEFT_ELBOW, [0.5, 0.5]), (LEFT_WRIST, [0.5, 0.7])]);
        let f = extract_pose_features(&p);
        assert!((f.0[ELBOW_L] - 1.0).abs() < 1e-12);
        assert!(f.0[ELBOW_L + 1].abs() < 1e-12);
        assert!((f.0[RATIO_L] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_half() {
        let cfg = DiscConfig::default();
        let layers = vec![Dense::zeros(NUM_FEATURES, 64), Dense::zeros(64, 32), Dense::zeros(32, 1)];
        let m = DiscriminatorModel::from_layers(layers, cfg).unwrap();
        assert_eq!(m.forward(&vec![0.3; NUM_FEATURES]).unwrap(), 0.5);
        assert!(matches!(m.forward(&[0.0; 3]), Err(DiscError::DimensionMismatch { .. })));
    }

    #[test]
    fn single_layer_is_logistic() {
        let l = Dense {
            inputs: 2,
            outputs: 1,
            weights: vec![0.7, -1.3],
            biases: vec![0.2],
        };
        let m = DiscriminatorModel::from_layers(vec![l], DiscConfig::default()).unwrap();
        let z: f64 = 0.7 * 0.5 - 1.3 * 2.0 + 0.2;
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((m.forward(&[0.5, 2.0]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn threshold_edges() {
        let l = Dense {
            inputs: NUM_FEATURES,
            outputs: 1,
            weights: vec![0.0; NUM_FEATURES],
            // sigmoid(b) = 0.71
            biases: vec![(0.71f64 / 0.29).ln()],
        };
        let m = DiscriminatorModel::from_layers(vec![l], DiscConfig::default()).unwrap();
        let p = pose_with(&[]);
        assert!(is_plausible(&m, &p, 0.0).unwrap());
        assert!(!is_plausible(&m, &p, 1.0).unwrap());
        assert!(is_plausible(&m, &p, 0.7).unwrap());
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ts = (0..n).map(|i| (i % 2) as f64).collect();
        (xs, ts)
    }

    /// Max relative error between analytic and central-difference gradients.
    pub(crate) fn gradient_check_error(m: &DiscriminatorModel, xs: &[Vec<f64>], ts: &[f64]) -> f64 {
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (_, g) = m.loss_and_grad(&refs, ts).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for li in 0..m.layers.len() {
            let np = m.layers[li].weights.len() + m.layers[li].biases.len();
            for k in 0..np {
                let bump = |delta: f64| {
                    let mut mm = m.clone();
                    let l = &mut mm.layers[li];
                    let nw = l.weights.len();
                    if k < nw {
                        l.weights[k] += delta;
                    } else {
                        l.biases[k - nw] += delta;
                    }
                    mm.loss(&refs, ts).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let nw = g[li].weights.len();
                let an = if k < nw { g[li].weights[k] } else { g[li].biases[k - nw] };
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DiscConfig {
            hidden: vec![6, 4],
            ..DiscConfig::default()
        };
        let m = DiscriminatorModel::init(8, &cfg, &mut rng);
        let (xs, ts) = random_batch(&mut rng, 10, 8);
        assert!(gradient_check_error(&m, &xs, &ts) <= 1e-4);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let fake: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-1.0..0.5)).collect()).collect();
        let cfg = DiscConfig {
            hidden: vec![8],
            learning_rate: 1e-2,
            momentum: 0.0,
            batch_size: 1000,
            epochs: 100,
            holdout_fraction: 0.0,
            ..DiscConfig::default()
        };
        let m = train_on_features(&real, &fake, &cfg, &mut rng).unwrap();
        for w in m.history.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_roundtrips() {
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let real: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let fake: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(0.5..1.5)).collect()).collect();
            let cfg = DiscConfig {
                hidden: vec![5],
                epochs: 5,
                batch_size: 8,
                ..DiscConfig::default()
            };
            train_on_features(&real, &fake, &cfg, &mut rng).unwrap()
        };
        let (a, b) = (gen(1), gen(1));
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        a.save(&path).unwrap();
        assert_eq!(DiscriminatorModel::load(&path).unwrap(), a);
    }

    #[test]
    fn too_few_real_poses() {
        let poses = vec![pose_with(&[]); 99];
        let r = train_discriminator(&poses, |_, _| None, &DiscConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(DiscError::InsufficientData { have: 99, need: 100 })));
    }

    proptest! {
        #[test]
        fn angle_encodings_are_unit_or_zero(coords in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0u8..3), 17)) {
            let mut p = pose_with(&[]);
            for (j, &(x, y, v)) in coords.iter().enumerate() {
                p.coords[j] = [x, y];
                p.vis[j] = Visibility::from_coco(v as f64).unwrap();
            }
            let f = extract_pose_features(&p);
            prop_assert!(f.0.iter().all(|v| v.is_finite()));
            let mut pairs: Vec<usize> = (0..NUM_LIMBS).map(|k| 2 * NUM_JOINTS + 2 * k).collect();
            pairs.extend((0..4).map(|k| ELBOW_L + 2 * k));
            for i in pairs {
                let r = f.0[i] * f.0[i] + f.0[i + 1] * f.0[i + 1];
                prop_assert!(r.abs() < 1e-9 || (r - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_threshold_never_admits_more(seed in any::<u64>(), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = DiscConfig { hidden: vec![4], ..DiscConfig::default() };
            let m = DiscriminatorModel::init(NUM_FEATURES, &cfg, &mut rng);
            let mut p = pose_with(&[]);
            for j in 0..NUM_JOINTS {
                p.coords[j] = [rng.random(), rng.random()];
                p.vis[j] = Visibility::LabeledVisible;
            }
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            if is_plausible(&m, &p, hi).unwrap() {
                prop_assert!(is_plausible(&m, &p, lo).unwrap());
            }
            let s = m.score(&p, None).unwrap();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
