//! COCO keypoint annotations, parsing masks and crop normalization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limbs::{JOINT_NAMES, COCO_SIGMAS, COCO_SKELETON, MAX_PART_LABEL, NUM_JOINTS};
use crate::mask::ParsingMask;
use crate::types::{BBox, NormalizedPose, PersonInstance, Pose, Visibility};

/// Instances with fewer labeled joints are left out of mixture fitting.
pub const MIN_LABELED_FOR_FIT: usize = 6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a valid JSON document: {message}")]
    MalformedFile { path: PathBuf, message: String },
    #[error("schema error{}: {message}", annotation_id.map(|id| format!(" in annotation {id}")).unwrap_or_default())]
    SchemaError {
        annotation_id: Option<u64>,
        message: String,
    },
    #[error("{path}: cannot decode raster: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: expected an 8-bit single-channel raster")]
    NotSingleChannel { path: PathBuf },
    #[error("mask is {got:?}, expected {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("mask label {value} at ({x}, {y}) exceeds {MAX_PART_LABEL}")]
    LabelOutOfRange { value: u8, x: u32, y: u32 },
    #[error("bounding box has non-positive size {w}x{h}")]
    DegenerateBox { w: f64, h: f64 },
}

// ---------------------------------------------------------------------------
// COCO file schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<serde_json::Value>,
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    #[serde(default)]
    pub keypoints: Option<Vec<f64>>,
    #[serde(default)]
    pub bbox: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_keypoints: Option<u64>,
    #[serde(default)]
    pub iscrowd: u8,
    /// Augmentation provenance; ignored by standard COCO readers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posetrans: Option<serde_json::Value>,
}

fn default_category() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(default)]
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
    /// Per-keypoint OKS sigmas; defaults to the COCO constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
}

impl Default for CocoCategory {
    fn default() -> Self {
        Self {
            id: 1,
            name: "person".into(),
            supercategory: Some("person".into()),
            keypoints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            skeleton: COCO_SKELETON.to_vec(),
            sigmas: None,
        }
    }
}

impl CocoAnnotation {
    pub fn from_instance(inst: &PersonInstance) -> Self {
        Self {
            id: inst.instance_id,
            image_id: inst.image_id,
            category_id: 1,
            keypoints: Some(inst.pose.to_coco_flat()),
            bbox: Some(inst.bbox.to_array().to_vec()),
            area: Some(inst.area),
            num_keypoints: Some(inst.pose.num_labeled() as u64),
            iscrowd: 0,
            posetrans: None,
        }
    }
}

// ---------------------------------------------------------------------------
// In-memory dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMeta {
    pub keypoint_names: Vec<String>,
    pub skeleton: Vec<[usize; 2]>,
    pub sigmas: [f64; NUM_JOINTS],
}

impl Default for CategoryMeta {
    fn default() -> Self {
        Self {
            keypoint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            skeleton: COCO_SKELETON.to_vec(),
            sigmas: COCO_SIGMAS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    /// Sorted by annotation id.
    pub instances: Vec<PersonInstance>,
    pub meta: CategoryMeta,
    /// Annotations dropped because no keypoint was labeled.
    pub dropped: usize,
}

impl Dataset {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images
            .binary_search_by_key(&id, |im| im.id)
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn to_document(&self) -> CocoDocument {
        CocoDocument {
            info: None,
            images: self
                .images
                .iter()
                .map(|im| CocoImage {
                    id: im.id,
                    file_name: im.file_name.clone(),
                    width: im.width,
                    height: im.height,
                })
                .collect(),
            annotations: self.instances.iter().map(CocoAnnotation::from_instance).collect(),
            categories: vec![CocoCategory {
                keypoints: self.meta.keypoint_names.clone(),
                skeleton: self.meta.skeleton.clone(),
                sigmas: (self.meta.sigmas != COCO_SIGMAS).then(|| self.meta.sigmas.to_vec()),
                ..CocoCategory::default()
            }],
        }
    }
}

fn schema(annotation_id: Option<u64>, message: impl Into<String>) -> IngestError {
    IngestError::SchemaError {
        annotation_id,
        message: message.into(),
    }
}

pub fn read_coco_document(path: &Path) -> Result<CocoDocument, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| IngestError::MalformedFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    serde_json::from_value(value).map_err(|e| schema(None, e.to_string()))
}

pub fn write_coco_document(path: &Path, doc: &CocoDocument) -> Result<(), IngestError> {
    let text = serde_json::to_vec_pretty(doc).expect("COCO documents always serialize");
    std::fs::write(path, text).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Builds a [`Dataset`] from a parsed document. Annotations without any
/// labeled keypoint are dropped and counted.
pub fn dataset_from_document(doc: &CocoDocument) -> Result<Dataset, IngestError> {
    let mut images: Vec<ImageInfo> = doc
        .images
        .iter()
        .map(|im| ImageInfo {
            id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
        })
        .collect();
    images.sort_by_key(|im| im.id);
    if images.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(schema(None, "duplicate image id"));
    }

    let meta = match doc.categories.first() {
        None => CategoryMeta::default(),
        Some(cat) => {
            let sigmas = match &cat.sigmas {
                None => COCO_SIGMAS,
                Some(s) => s.as_slice().try_into().map_err(|_| {
                    schema(None, format!("category sigmas must have {NUM_JOINTS} entries"))
                })?,
            };
            CategoryMeta {
                keypoint_names: cat.keypoints.clone(),
                skeleton: cat.skeleton.clone(),
                sigmas,
            }
        }
    };

    let mut instances = Vec::with_capacity(doc.annotations.len());
    let mut dropped = 0;
    for ann in &doc.annotations {
        let id = Some(ann.id);
        let kps = ann.keypoints.as_ref().ok_or_else(|| schema(id, "missing keypoints"))?;
        let bbox = ann.bbox.as_ref().ok_or_else(|| schema(id, "missing bbox"))?;
        let pose = Pose::from_coco_flat(kps).map_err(|e| schema(id, e.to_string()))?;
        if pose.num_labeled() == 0 {
            dropped += 1;
            continue;
        }
        let [bx, by, bw, bh]: [f64; 4] = bbox
            .as_slice()
            .try_into()
            .map_err(|_| schema(id, "bbox must have 4 numbers"))?;
        let bbox = BBox::new(bx, by, bw, bh).map_err(|e| schema(id, e.to_string()))?;
        if images.binary_search_by_key(&ann.image_id, |im| im.id).is_err() {
            return Err(schema(id, format!("unknown image id {}", ann.image_id)));
        }
        let area = match ann.area {
            Some(a) if a > 0.0 => a,
            _ => bw * bh,
        };
        instances.push(PersonInstance {
            image_id: ann.image_id,
            instance_id: ann.id,
            bbox,
            pose,
            mask_ref: None,
            area,
        });
    }
    instances.sort_by_key(|inst| inst.instance_id);
    if instances.windows(2).any(|w| w[0].instance_id == w[1].instance_id) {
        return Err(schema(None, "duplicate annotation id"));
    }
    Ok(Dataset {
        images,
        instances,
        meta,
        dropped,
    })
}

pub fn load_coco_annotations(path: &Path) -> Result<Dataset, IngestError> {
    dataset_from_document(&read_coco_document(path)?)
}

/// Per-instance mask file location: `<image_id>_<instance_id>.png`.
pub fn mask_path(masks_dir: &Path, inst: &PersonInstance) -> PathBuf {
    masks_dir.join(format!("{}_{}.png", inst.image_id, inst.instance_id))
}

pub fn load_parsing_mask(path: &Path, expected_dims: (u32, u32)) -> Result<ParsingMask, IngestError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => IngestError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => IngestError::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(IngestError::NotSingleChannel {
                path: path.to_path_buf(),
            })
        }
    };
    parsing_mask_from_gray(&gray, expected_dims)
}

pub fn parsing_mask_from_gray(gray: &image::GrayImage, expected_dims: (u32, u32)) -> Result<ParsingMask, IngestError> {
    let got = gray.dimensions();
    if got != expected_dims {
        return Err(IngestError::DimensionMismatch {
            expected: expected_dims,
            got,
        });
    }
    if let Some((x, y, p)) = gray.enumerate_pixels().find(|(_, _, p)| p.0[0] > MAX_PART_LABEL) {
        return Err(IngestError::LabelOutOfRange { value: p.0[0], x, y });
    }
    Ok(ParsingMask::from_raw(got.0, got.1, gray.as_raw().clone()))
}

pub fn save_parsing_mask(path: &Path, mask: &ParsingMask) -> Result<(), IngestError> {
    let gray = image::GrayImage::from_raw(mask.width(), mask.height(), mask.labels().to_vec())
        .expect("dimensions match buffer");
    gray.save(path).map_err(|e| IngestError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Maps labeled joints into the unit square of `bbox` (anisotropic, clamped);
/// unlabeled joints take the crop-center fill.
pub fn normalize_with_bbox(pose: &Pose, bbox: &BBox) -> Result<NormalizedPose, IngestError> {
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(IngestError::DegenerateBox { w: bbox.w, h: bbox.h });
    }
    let mut coords = [NormalizedPose::FILL; NUM_JOINTS];
    let mut vis = [Visibility::NotLabeled; NUM_JOINTS];
    for (j, kp) in pose.joints.iter().enumerate() {
        vis[j] = kp.vis;
        if kp.is_labeled() {
            coords[j] = [
                ((kp.x - bbox.x) / bbox.w).clamp(0.0, 1.0),
                ((kp.y - bbox.y) / bbox.h).clamp(0.0, 1.0),
            ];
        }
    }
    Ok(NormalizedPose { coords, vis })
}

pub fn crop_and_normalize(instance: &PersonInstance) -> Result<NormalizedPose, IngestError> {
    normalize_with_bbox(&instance.pose, &instance.bbox)
}
