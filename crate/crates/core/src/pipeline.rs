//! Command implementations behind the `posetrans` CLI: PCM fitting,
//! discriminator training, pool-based augmentation, evaluation, resampling
//! baselines and cluster reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{train_discriminator, DiscConfig, DiscError, DiscriminatorModel};
use crate::ingest::{
    self, crop_and_normalize, load_coco_annotations, load_parsing_mask, mask_path, normalize_with_bbox, CocoAnnotation,
    CocoDocument, CocoImage, Dataset, IngestError,
};
use crate::limbs::{LimbError, LimbLabelMap, LimbTable, COCO_SKELETON, NUM_LIMBS};
use crate::metrics::{self, EvalReport, MetricsError};
use crate::pcm::{self, GmmModel, PcmConfig, PcmError};
use crate::ptm::{augmented_bbox, plan_ptm, render_ptm, transform_pose, LimbPlan, LimbRegions, PtmError};
use crate::types::{AugConfig, BBox, NormalizedPose, PersonInstance, Pose, Visibility};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Pcm(#[from] PcmError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ptm(#[from] PtmError),
    #[error(transparent)]
    Limb(#[from] LimbError),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl PipelineError {
    /// 2 for configuration and input validation failures, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::Limb(_) => 2,
            _ => 3,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Validation(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub annotations: PathBuf,
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
    pub limb_labels: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            annotations: PathBuf::from("annotations.json"),
            images_dir: PathBuf::from("images"),
            masks_dir: PathBuf::from("masks"),
            limb_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcmOptions {
    pub reg_epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PcmOptions {
    fn default() -> Self {
        let d = PcmConfig::default();
        Self {
            reg_epsilon: d.reg_epsilon,
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Rarest candidate under the PCM.
    Pcm,
    /// Uniformly random candidate (w/o-PCM ablation).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub selection: Selection,
    /// Refit the PCM on original + selected poses after augmenting.
    pub refit: bool,
    /// Defaults to `<out_dir>/pcm_model.json`.
    pub pcm_model: Option<PathBuf>,
    /// Defaults to `<out_dir>/discriminator.json`.
    pub discriminator: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            workers: 0,
            selection: Selection::Pcm,
            refit: true,
            pcm_model: None,
            discriminator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub svg: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { svg: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub augment: AugConfig,
    pub discriminator: DiscConfig,
    pub pcm: PcmOptions,
    pub run: RunOptions,
    pub report: ReportOptions,
}

impl PipelineConfig {
    /// Parses a TOML config; relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    /// Config reading `annotations.json`, `images/` and `masks/` under `dir`.
    pub fn for_dataset(dir: &Path, out_dir: &Path) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.resolve_relative(dir);
        cfg.run.out_dir = out_dir.to_path_buf();
        cfg
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.annotations);
        fix(&mut self.data.images_dir);
        fix(&mut self.data.masks_dir);
        fix(&mut self.run.out_dir);
        for p in [&mut self.data.limb_labels, &mut self.run.pcm_model, &mut self.run.discriminator]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn pcm_config(&self) -> PcmConfig {
        PcmConfig {
            n_components: self.augment.n_components,
            reg_epsilon: self.pcm.reg_epsilon,
            max_iters: self.pcm.max_iters,
            tol: self.pcm.tol,
        }
    }

    pub fn pcm_model_path(&self) -> PathBuf {
        self.run
            .pcm_model
            .clone()
            .unwrap_or_else(|| self.run.out_dir.join("pcm_model.json"))
    }

    pub fn discriminator_path(&self) -> PathBuf {
        self.run
            .discriminator
            .clone()
            .unwrap_or_else(|| self.run.out_dir.join("discriminator.json"))
    }

    pub fn seed(&self) -> u64 {
        self.augment.rng_seed
    }

    /// Checks parameters and that the annotation file exists.
    pub fn validate(&self) -> Result<()> {
        self.augment.validate().map_err(|e| invalid(e.to_string()))?;
        let d = &self.discriminator;
        if d.batch_size == 0 || !(d.learning_rate > 0.0) || !(0.0..1.0).contains(&d.holdout_fraction) {
            return Err(invalid("discriminator batch_size, learning_rate or holdout_fraction out of range"));
        }
        if !(self.pcm.reg_epsilon > 0.0) || self.pcm.max_iters == 0 {
            return Err(invalid("pcm reg_epsilon must be positive and max_iters at least 1"));
        }
        require_file(&self.data.annotations, "annotation file")?;
        if let Some(p) = &self.data.limb_labels {
            require_file(p, "limb label mapping")?;
        }
        Ok(())
    }

    pub fn limb_table(&self) -> Result<LimbTable> {
        let map = match &self.data.limb_labels {
            Some(p) => LimbLabelMap::load(p)?,
            None => LimbLabelMap::default(),
        };
        Ok(LimbTable::new(&map)?)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.run.workers)
            .build()
            .map_err(|e| invalid(format!("worker pool: {e}")))
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(io_err(p))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(io_err(p))
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Rng stream for one annotation, independent of scheduling.
pub fn instance_rng(seed: u64, annotation_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(annotation_id);
    rng
}

/// Limbs whose endpoints are both visible.
pub fn pose_transformable(pose: &Pose, table: &LimbTable) -> [bool; NUM_LIMBS] {
    let mut t = [false; NUM_LIMBS];
    for limb in table.iter() {
        let v = |j: usize| pose.joints[j].vis == Visibility::LabeledVisible;
        t[limb.id] = v(limb.src_joint) && v(limb.dst_joint);
    }
    t
}

/// Normalized form of a transformed pose, using the source box grown to
/// cover the moved keypoints.
pub fn candidate_pose(source: &PersonInstance, pose: &Pose, dims: (u32, u32)) -> std::result::Result<NormalizedPose, IngestError> {
    let bbox = augmented_bbox(&source.bbox, pose, None, dims);
    normalize_with_bbox(pose, &bbox)
}

fn image_dims(ds: &Dataset, inst: &PersonInstance) -> (u32, u32) {
    ds.image(inst.image_id).map(|im| (im.width, im.height)).unwrap_or((0, 0))
}

fn normalized_poses(ds: &Dataset) -> Result<Vec<NormalizedPose>> {
    ds.instances
        .iter()
        .map(|i| crop_and_normalize(i).map_err(PipelineError::from))
        .collect()
}

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let ds = load_coco_annotations(&cfg.data.annotations)?;
    if ds.dropped > 0 {
        info!("dropped {} annotations without labeled keypoints", ds.dropped);
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// fit-pcm and cluster reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub count: usize,
    pub fraction: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_components: usize,
    pub n_samples: usize,
    /// Sorted by count, descending; ties by cluster index.
    pub clusters: Vec<ClusterRow>,
    pub labels: Vec<usize>,
    /// First two principal components of the posterior vectors.
    pub posterior_pca: Vec<[f64; 2]>,
}

pub fn cluster_counts(labels: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Projects rows onto their two leading principal axes. Each axis is signed
/// so its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&c) = order.get(k) else {
            return vec![0.0; d];
        };
        let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let (a0, a1) = (axis(0), axis(1));
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&a0), p(&a1)]
        })
        .collect()
}

const SVG_SIZE: f64 = 200.0;

fn palette(k: usize, n: usize) -> String {
    let hue = 360.0 * k as f64 / n.max(1) as f64;
    format!("hsl({hue:.0},70%,45%)")
}

pub fn skeleton_svg(coords: &[f64]) -> String {
    let mut s = String::new();
    let p = |j: usize| (coords[2 * j] * SVG_SIZE, coords[2 * j + 1] * SVG_SIZE);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        SVG_SIZE
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for [a, b] in COCO_SKELETON {
        let ((x1, y1), (x2, y2)) = (p(a - 1), p(b - 1));
        let _ = writeln!(
            s,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="black" stroke-width="2"/>"#
        );
    }
    for j in 0..coords.len() / 2 {
        let (x, y) = p(j);
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="crimson"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

pub fn scatter_svg(points: &[[f64; 2]], labels: &[usize], n: usize) -> String {
    let mut s = String::new();
    let size = 2.0 * SVG_SIZE;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        size
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let scale = |v: f64, k: usize| {
        let span = hi[k] - lo[k];
        let t = if span > 0.0 { (v - lo[k]) / span } else { 0.5 };
        10.0 + t * (size - 20.0)
    };
    for (p, &l) in points.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
            scale(p[0], 0),
            size - scale(p[1], 1),
            palette(l, n)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Cluster statistics of `poses` under `model`; writes
/// `cluster_report.json`, and when `svg` is set one mean-skeleton SVG per
/// cluster plus `posterior_pca.svg`, into `dir`.
pub fn cluster_report(model: &GmmModel, poses: &[NormalizedPose], dir: &Path, svg: bool) -> Result<ClusterReport> {
    let assignments = poses
        .iter()
        .map(|p| pcm::responsibilities(model, p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = assignments.iter().map(|a| a.label).collect();
    let n = model.n_components();
    let counts = cluster_counts(&labels, n);
    let mut clusters: Vec<ClusterRow> = (0..n)
        .map(|k| ClusterRow {
            cluster: k,
            count: counts[k],
            fraction: counts[k] as f64 / poses.len().max(1) as f64,
            weight: model.weights()[k],
        })
        .collect();
    clusters.sort_by(|a, b| b.count.cmp(&a.count).then(a.cluster.cmp(&b.cluster)));
    let posteriors: Vec<Vec<f64>> = assignments.iter().map(|a| a.posterior.clone()).collect();
    let report = ClusterReport {
        n_components: n,
        n_samples: poses.len(),
        clusters,
        posterior_pca: pca_2d(&posteriors),
        labels,
    };
    create_dir(dir)?;
    write_file(
        &dir.join("cluster_report.json"),
        &serde_json::to_vec_pretty(&report).expect("serializable"),
    )?;
    if svg {
        for (k, mu) in model.means().iter().enumerate() {
            write_file(&dir.join(format!("cluster_{k:02}.svg")), skeleton_svg(mu.as_slice()).as_bytes())?;
        }
        write_file(
            &dir.join("posterior_pca.svg"),
            scatter_svg(&report.posterior_pca, &report.labels, n).as_bytes(),
        )?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FitPcmOutput {
    pub model: GmmModel,
    pub model_path: PathBuf,
    pub report: ClusterReport,
}

pub fn cmd_fit_pcm(cfg: &PipelineConfig) -> Result<FitPcmOutput> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let poses = normalized_poses(&ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let pool = cfg.thread_pool()?;
    let model = pool.install(|| pcm::fit_poses(&poses, &cfg.pcm_config(), &mut rng))?;
    info!(
        "fitted {} components on {} poses in {} iterations",
        model.n_components(),
        poses.len(),
        model.metadata().iterations
    );
    create_dir(&cfg.run.out_dir)?;
    let model_path = cfg.pcm_model_path();
    model.save(&model_path)?;
    let report = cluster_report(&model, &poses, &cfg.run.out_dir.join("cluster_report"), cfg.report.svg)?;
    Ok(FitPcmOutput {
        model,
        model_path,
        report,
    })
}

pub fn cmd_cluster_report(cfg: &PipelineConfig) -> Result<ClusterReport> {
    cfg.validate()?;
    let model_path = cfg.pcm_model_path();
    require_file(&model_path, "PCM model")?;
    let model = GmmModel::load(&model_path)?;
    let ds = load_dataset(cfg)?;
    let poses = normalized_poses(&ds)?;
    cluster_report(&model, &poses, &cfg.run.out_dir.join("cluster_report"), cfg.report.svg)
}

// ---------------------------------------------------------------------------
// train-disc

/// Augmentation settings used to produce training fakes: every eligible limb
/// moves, with the discriminator's widened ranges.
pub fn fake_aug_config(cfg: &PipelineConfig) -> AugConfig {
    let d = &cfg.discriminator;
    let rot = [d.fake_rotation_range_deg[0].to_radians(), d.fake_rotation_range_deg[1].to_radians()];
    AugConfig {
        per_limb_prob: 1.0,
        ..cfg.augment.clone().with_ranges(d.fake_scale_range, rot)
    }
}

#[derive(Debug, Clone)]
pub struct TrainDiscOutput {
    pub model: DiscriminatorModel,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

pub fn cmd_train_discriminator(cfg: &PipelineConfig) -> Result<TrainDiscOutput> {
    cfg.validate()?;
    let fake_cfg = fake_aug_config(cfg);
    fake_cfg.validate().map_err(|e| invalid(format!("fake ranges: {e}")))?;
    let table = cfg.limb_table()?;
    let ds = load_dataset(cfg)?;
    let real = normalized_poses(&ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let generator = |i: usize, rng: &mut ChaCha8Rng| {
        let inst = &ds.instances[i];
        let transformable = pose_transformable(&inst.pose, &table);
        let plan = plan_ptm(&inst.pose, &transformable, &table, &fake_cfg, rng).ok()?;
        let pose = transform_pose(&inst.pose, &plan, &table);
        candidate_pose(inst, &pose, image_dims(&ds, inst)).ok()
    };
    let model = train_discriminator(&real, generator, &cfg.discriminator, &mut rng)?;
    if let Some(last) = model.history.last() {
        info!(
            "discriminator: best epoch {:?}, final held-out loss {:.4}, accuracy {:.3}",
            model.best_epoch, last.heldout_loss, last.heldout_accuracy
        );
    }
    create_dir(&cfg.run.out_dir)?;
    let checkpoint = cfg.discriminator_path();
    model.save(&checkpoint)?;
    let curve = checkpoint.with_extension("csv");
    let mut w = csv::Writer::from_path(&curve).map_err(|e| PipelineError::Io {
        path: curve.clone(),
        source: e.into(),
    })?;
    for rec in &model.history {
        w.serialize(rec).map_err(|e| PipelineError::Io {
            path: curve.clone(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io_err(&curve))?;
    Ok(TrainDiscOutput {
        model,
        checkpoint,
        curve,
    })
}

// ---------------------------------------------------------------------------
// augment

/// Candidate pool trace of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub annotation_id: u64,
    pub image_id: u64,
    pub attempts: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Plausibility of every attempt, in order.
    pub scores: Vec<f64>,
    /// Attempt index of every accepted candidate.
    pub accepted_attempts: Vec<usize>,
    /// Rarity of every accepted candidate (when a PCM model is loaded).
    pub rarities: Vec<f64>,
    /// Index into the accepted candidates.
    pub chosen: Option<usize>,
    pub chosen_plausibility: Option<f64>,
    pub chosen_rarity: Option<f64>,
    pub new_annotation_id: Option<u64>,
    pub skipped: Option<String>,
}

impl PoolRecord {
    fn new(inst: &PersonInstance) -> Self {
        Self {
            annotation_id: inst.instance_id,
            image_id: inst.image_id,
            attempts: 0,
            accepted: 0,
            rejected: 0,
            scores: Vec::new(),
            accepted_attempts: Vec::new(),
            rarities: Vec::new(),
            chosen: None,
            chosen_plausibility: None,
            chosen_rarity: None,
            new_annotation_id: None,
            skipped: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    attempt: usize,
    seed: u64,
    plan: LimbPlan,
    pose: Pose,
    normalized: NormalizedPose,
    plausibility: f64,
}

#[derive(Debug, Clone)]
struct Selected {
    candidate: Candidate,
    rarity: Option<f64>,
    image: RgbImage,
    bbox: BBox,
}

struct AugmentContext<'a> {
    cfg: &'a PipelineConfig,
    ds: &'a Dataset,
    table: &'a LimbTable,
    disc: &'a DiscriminatorModel,
    model: Option<&'a GmmModel>,
}

/// Provenance stored in the `posetrans` field of each emitted annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationProvenance {
    pub source_annotation_id: u64,
    pub source_image_id: u64,
    pub attempt: usize,
    pub rng_seed: u64,
    pub plan: LimbPlan,
    pub plausibility: f64,
    pub rarity: Option<f64>,
    pub selection: Selection,
}

fn augment_instance(ctx: &AugmentContext<'_>, inst: &PersonInstance) -> (PoolRecord, Option<Selected>) {
    let mut rec = PoolRecord::new(inst);
    match augment_instance_inner(ctx, inst, &mut rec) {
        Ok(sel) => (rec, Some(sel)),
        Err(reason) => {
            warn!("annotation {} skipped: {reason}", inst.instance_id);
            rec.skipped = Some(reason);
            (rec, None)
        }
    }
}

fn augment_instance_inner(
    ctx: &AugmentContext<'_>,
    inst: &PersonInstance,
    rec: &mut PoolRecord,
) -> std::result::Result<Selected, String> {
    let aug = &ctx.cfg.augment;
    let info = ctx.ds.image(inst.image_id).ok_or("image entry missing")?;
    let img_path = ctx.cfg.data.images_dir.join(&info.file_name);
    let image = image::open(&img_path)
        .map_err(|e| format!("reading {}: {e}", img_path.display()))?
        .to_rgb8();
    let mask = load_parsing_mask(&mask_path(&ctx.cfg.data.masks_dir, inst), image.dimensions()).map_err(|e| e.to_string())?;
    let regions = LimbRegions::new(&inst.pose, &mask, ctx.table);
    if !regions.any_transformable() {
        return Err("no transformable limb".into());
    }

    let mut rng = instance_rng(ctx.cfg.seed(), inst.instance_id);
    let mut pool: Vec<Candidate> = Vec::new();
    for attempt in 0..aug.max_pool_attempts {
        let seed = rng.next_u64();
        let mut arng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_ptm(&inst.pose, &regions.transformable, ctx.table, aug, &mut arng).map_err(|e| e.to_string())?;
        let pose = transform_pose(&inst.pose, &plan, ctx.table);
        let normalized = candidate_pose(inst, &pose, image.dimensions()).map_err(|e| e.to_string())?;
        let plausibility = ctx.disc.score(&normalized, None).map_err(|e| e.to_string())?;
        rec.attempts += 1;
        rec.scores.push(plausibility);
        if plausibility >= aug.plausibility_threshold {
            rec.accepted += 1;
            rec.accepted_attempts.push(attempt);
            pool.push(Candidate {
                attempt,
                seed,
                plan,
                pose,
                normalized,
                plausibility,
            });
            if pool.len() == aug.pool_size {
                break;
            }
        } else {
            rec.rejected += 1;
        }
    }
    if pool.len() < aug.pool_size {
        return Err(format!(
            "pool incomplete: {} of {} candidates reached plausibility {} in {} attempts",
            pool.len(),
            aug.pool_size,
            aug.plausibility_threshold,
            rec.attempts
        ));
    }

    if let Some(model) = ctx.model {
        for c in &pool {
            let a = pcm::responsibilities(model, &c.normalized).map_err(|e| e.to_string())?;
            rec.rarities.push(a.rarity);
        }
    }
    let chosen = match ctx.cfg.run.selection {
        Selection::Pcm => pcm::argmin_first(&rec.rarities).ok_or("no rarity scores")?,
        Selection::Random => rng.random_range(0..pool.len()),
    };
    let candidate = pool.swap_remove(chosen);
    rec.chosen = Some(chosen);
    rec.chosen_plausibility = Some(candidate.plausibility);
    let rarity = rec.rarities.get(chosen).copied();
    rec.chosen_rarity = rarity;

    let (out, extent) = render_ptm(&image, &regions, &candidate.plan, aug).map_err(|e| e.to_string())?;
    let bbox = augmented_bbox(&inst.bbox, &candidate.pose, extent.as_ref(), image.dimensions());
    Ok(Selected {
        candidate,
        rarity,
        image: out,
        bbox,
    })
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub dir: PathBuf,
    pub annotations: PathBuf,
    pub ledger: PathBuf,
    pub records: Vec<PoolRecord>,
    /// Normalized poses of the selected samples, in annotation order.
    pub selected_poses: Vec<NormalizedPose>,
    pub refit_model: Option<PathBuf>,
}

/// Builds one candidate pool per instance, keeps the rarest (or a random)
/// plausible candidate, and writes the augmented COCO set, its images and
/// the JSON-lines pool ledger under `<out_dir>/augmented`.
pub fn cmd_augment(cfg: &PipelineConfig) -> Result<AugmentOutput> {
    cfg.validate()?;
    require_dir(&cfg.data.images_dir, "images directory")?;
    require_dir(&cfg.data.masks_dir, "masks directory")?;
    let disc_path = cfg.discriminator_path();
    require_file(&disc_path, "discriminator checkpoint")?;
    let model_path = cfg.pcm_model_path();
    if cfg.run.selection == Selection::Pcm {
        require_file(&model_path, "PCM model")?;
    }
    let table = cfg.limb_table()?;
    let disc = DiscriminatorModel::load(&disc_path)?;
    let model = if model_path.is_file() {
        Some(GmmModel::load(&model_path)?)
    } else {
        None
    };
    let ds = load_dataset(cfg)?;

    let ctx = AugmentContext {
        cfg,
        ds: &ds,
        table: &table,
        disc: &disc,
        model: model.as_ref(),
    };
    let pool = cfg.thread_pool()?;
    let results: Vec<(PoolRecord, Option<Selected>)> =
        pool.install(|| ds.instances.par_iter().map(|inst| augment_instance(&ctx, inst)).collect());

    let dir = cfg.run.out_dir.join("augmented");
    let images_dir = dir.join("images");
    create_dir(&images_dir)?;
    let mut next_image_id = ds.images.iter().map(|i| i.id).max().unwrap_or(0) + 1;
    let mut next_ann_id = ds.instances.iter().map(|i| i.instance_id).max().unwrap_or(0) + 1;
    let mut doc = CocoDocument {
        info: None,
        images: Vec::new(),
        annotations: Vec::new(),
        categories: ds.to_document().categories,
    };
    let mut records = Vec::with_capacity(results.len());
    let mut selected_poses = Vec::new();
    for ((mut rec, sel), inst) in results.into_iter().zip(&ds.instances) {
        if let Some(sel) = sel {
            let file_name = format!("aug_{:08}.png", inst.instance_id);
            let path = images_dir.join(&file_name);
            sel.image.save(&path).map_err(|e| PipelineError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let new_inst = PersonInstance {
                image_id: next_image_id,
                instance_id: next_ann_id,
                bbox: sel.bbox,
                pose: sel.candidate.pose,
                mask_ref: None,
                area: sel.bbox.w * sel.bbox.h,
            };
            let mut ann = CocoAnnotation::from_instance(&new_inst);
            let prov = AnnotationProvenance {
                source_annotation_id: inst.instance_id,
                source_image_id: inst.image_id,
                attempt: sel.candidate.attempt,
                rng_seed: sel.candidate.seed,
                plan: sel.candidate.plan,
                plausibility: sel.candidate.plausibility,
                rarity: sel.rarity,
                selection: cfg.run.selection,
            };
            ann.posetrans = Some(serde_json::to_value(&prov).expect("serializable"));
            doc.images.push(CocoImage {
                id: next_image_id,
                file_name,
                width: sel.image.width(),
                height: sel.image.height(),
            });
            doc.annotations.push(ann);
            rec.new_annotation_id = Some(next_ann_id);
            selected_poses.push(sel.candidate.normalized);
            next_image_id += 1;
            next_ann_id += 1;
        }
        records.push(rec);
    }
    let annotations = dir.join("annotations.json");
    ingest::write_coco_document(&annotations, &doc)?;
    let ledger = dir.join("ledger.jsonl");
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r).expect("serializable");
        buf.push(b'\n');
    }
    write_file(&ledger, &buf)?;
    let skipped = records.iter().filter(|r| r.skipped.is_some()).count();
    info!(
        "augmented {} of {} instances ({} skipped)",
        selected_poses.len(),
        records.len(),
        skipped
    );

    let mut refit_model = None;
    if cfg.run.refit {
        if let Some(m) = &model {
            let original = normalized_poses(&ds)?;
            let refit = pool.install(|| pcm::refit_poses(m, &original, &selected_poses, &cfg.pcm_config()))?;
            let path = dir.join("pcm_model_refit.json");
            refit.save(&path)?;
            refit_model = Some(path);
        } else {
            warn!("no PCM model at {}, skipping refit", model_path.display());
        }
    }
    Ok(AugmentOutput {
        dir,
        annotations,
        ledger,
        records,
        selected_poses,
        refit_model,
    })
}

pub fn read_ledger(path: &Path) -> Result<Vec<PoolRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| invalid(format!("{}: {e}", path.display()))))
        .collect()
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOutput {
    pub report: EvalReport,
    /// Predictions whose image id is not in the ground truth set.
    pub ignored_predictions: usize,
}

pub fn cmd_evaluate(cfg: &PipelineConfig, predictions: &Path) -> Result<EvaluateOutput> {
    cfg.validate()?;
    require_file(predictions, "predictions file")?;
    let ds = load_dataset(cfg)?;
    let all = metrics::read_predictions(predictions)?;
    let total = all.len();
    let preds: Vec<_> = all.into_iter().filter(|p| ds.image(p.image_id).is_some()).collect();
    let ignored_predictions = total - preds.len();
    if ignored_predictions > 0 {
        warn!("ignored {ignored_predictions} predictions for unknown image ids");
    }
    let model_path = cfg.pcm_model_path();
    let model = if model_path.is_file() {
        Some(GmmModel::load(&model_path)?)
    } else {
        warn!("no PCM model at {}, balanced metrics omitted", model_path.display());
        None
    };
    let report = metrics::evaluate(&preds, &ds.instances, model.as_ref(), &ds.meta.sigmas)?;
    let out = EvaluateOutput {
        report,
        ignored_predictions,
    };
    create_dir(&cfg.run.out_dir)?;
    write_file(
        &cfg.run.out_dir.join("eval_report.json"),
        &serde_json::to_vec_pretty(&out).expect("serializable"),
    )?;
    let mut table = out.report.to_table();
    let _ = writeln!(table, "\nignored predictions: {ignored_predictions}");
    write_file(&cfg.run.out_dir.join("eval_report.txt"), table.as_bytes())?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    Oversample,
    Reweight,
}

pub const MAX_DUPLICATION: usize = 10;

/// Copies per instance of each cluster: `round(max_count / count)` capped
/// at 10; `None` for empty clusters.
pub fn oversample_factors(counts: &[usize]) -> Vec<Option<usize>> {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts
        .iter()
        .map(|&c| (c > 0).then(|| ((max as f64 / c as f64).round() as usize).clamp(1, MAX_DUPLICATION)))
        .collect()
}

/// Per-instance weights `max_count / count` normalized to mean 1.
pub fn reweight(labels: &[usize], counts: &[usize]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let raw: Vec<f64> = labels.iter().map(|&l| max / counts[l] as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutput {
    pub mode: BaselineMode,
    pub counts: Vec<usize>,
    pub path: PathBuf,
    /// Duplication factor per cluster (oversample).
    pub factors: Vec<Option<usize>>,
    /// Annotation id to weight (reweight).
    pub weights: BTreeMap<u64, f64>,
}

pub fn cmd_baselines(cfg: &PipelineConfig, mode: BaselineMode) -> Result<BaselineOutput> {
    cfg.validate()?;
    let model_path = cfg.pcm_model_path();
    require_file(&model_path, "PCM model")?;
    let model = GmmModel::load(&model_path)?;
    let ds = load_dataset(cfg)?;
    let poses = normalized_poses(&ds)?;
    let labels = poses
        .iter()
        .map(|p| pcm::assign_cluster(&model, p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let counts = cluster_counts(&labels, model.n_components());
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            warn!("cluster {k} has no instances, skipped");
        }
    }
    let dir = cfg.run.out_dir.join("baselines");
    create_dir(&dir)?;
    let mut out = BaselineOutput {
        mode,
        counts: counts.clone(),
        path: PathBuf::new(),
        factors: Vec::new(),
        weights: BTreeMap::new(),
    };
    match mode {
        BaselineMode::Oversample => {
            let factors = oversample_factors(&counts);
            let mut doc = ds.to_document();
            let mut next_id = ds.instances.iter().map(|i| i.instance_id).max().unwrap_or(0) + 1;
            for (inst, &l) in ds.instances.iter().zip(&labels) {
                for _ in 1..factors[l].unwrap_or(1) {
                    let mut dup = inst.clone();
                    dup.instance_id = next_id;
                    next_id += 1;
                    doc.annotations.push(CocoAnnotation::from_instance(&dup));
                }
            }
            out.path = dir.join("oversampled.json");
            ingest::write_coco_document(&out.path, &doc)?;
            out.factors = factors;
        }
        BaselineMode::Reweight => {
            let w = reweight(&labels, &counts);
            out.weights = ds.instances.iter().map(|i| i.instance_id).zip(w).collect();
            out.path = dir.join("weights.json");
            write_file(&out.path, &serde_json::to_vec_pretty(&out.weights).expect("serializable"))?;
        }
    }
    let summary = dir.join(format!("{}_summary.json", if mode == BaselineMode::Oversample { "oversample" } else { "reweight" }));
    let mut f = std::fs::File::create(&summary).map_err(io_err(&summary))?;
    f.write_all(&serde_json::to_vec_pretty(&out).expect("serializable"))
        .map_err(io_err(&summary))?;
    Ok(out)
}

/// Normalized Shannon entropy of a histogram (1 for uniform, 0 for a single
/// occupied bin).
pub fn normalized_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversample_examples() {
        assert_eq!(oversample_factors(&[50, 50]), vec![Some(1), Some(1)]);
        assert_eq!(oversample_factors(&[90, 10]), vec![Some(1), Some(9)]);
        assert_eq!(oversample_factors(&[1000, 1, 0]), vec![Some(1), Some(10), None]);
    }

    #[test]
    fn reweight_examples() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let w = reweight(&labels, &[90, 10]);
        // weights proportional to (1, 9), mean 1 over 100 instances
        let a = 100.0 / 180.0;
        assert!((w[0] - a).abs() < 1e-12);
        assert!((w[99] - 9.0 * a).abs() < 1e-12);
        assert!((w[99] - 5.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() / 100.0 - 1.0).abs() < 1e-12);

        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        assert!(reweight(&labels, &[5, 5]).iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn entropy() {
        assert_eq!(normalized_entropy(&[10, 0, 0]), 0.0);
        assert!((normalized_entropy(&[5, 5, 5]) - 1.0).abs() < 1e-12);
        assert!(normalized_entropy(&[9, 1, 0]) < normalized_entropy(&[7, 2, 1]));
    }

    #[test]
    fn pca_signs_and_shape() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let p = pca_2d(&rows);
        assert_eq!(p.len(), 3);
        // along the first axis the two pure rows sit on opposite sides
        assert!(p[0][0] * p[1][0] < 0.0);
        assert!(p[2][0].abs() < 1e-12);
    }

    #[test]
    fn config_toml_roundtrip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
[data]
annotations = "ann.json"

[augment]
pool_size = 3
rotation_range_deg = [-20.0, 20.0]

[run]
selection = "random"
"#;
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, text).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.data.annotations, dir.path().join("ann.json"));
        assert_eq!(cfg.data.images_dir, dir.path().join("images"));
        assert_eq!(cfg.augment.pool_size, 3);
        assert!((cfg.augment.rotation_range[1] - 20f64.to_radians()).abs() < 1e-15);
        assert_eq!(cfg.run.selection, Selection::Random);
        assert_eq!(cfg.pcm_config().n_components, 20);

        let back: PipelineConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.data, cfg.data);
        assert_eq!(back.run, cfg.run);

        std::fs::write(&path, "[data]\nbogus = 1\n").unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_annotations_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::for_dataset(dir.path(), &dir.path().join("out"));
        let err = cmd_fit_pcm(&cfg).unwrap_err();
        assert!(matches!(err, PipelineError::Validation(_)));
        assert_eq!(err.exit_code(), 2);
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn instance_streams_are_independent_of_order() {
        let a: Vec<u64> = {
            let mut r = instance_rng(7, 3);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let _ = instance_rng(7, 2).next_u64();
        let mut r = instance_rng(7, 3);
        let b: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], instance_rng(7, 4).next_u64());
    }
}
