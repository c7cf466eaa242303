//! COCO-format dataset ingestion, class metadata, and K-shot subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Where an image's bytes come from. Loading is deferred until the bytes
/// are actually needed by a backend request.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Bytes(Arc<Vec<u8>>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: u64,
    pub source: ImageSource,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    pub fn load_bytes(&self) -> Result<Arc<Vec<u8>>> {
        match &self.source {
            ImageSource::Bytes(b) => Ok(b.clone()),
            ImageSource::Path(p) => std::fs::read(p)
                .map(|b| Arc::new(b))
                .map_err(|e| Error::io(p.clone(), e)),
        }
    }
}

/// A ground-truth instance, always in pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BoundingBox,
}

/// Per-class metadata: the name, the seed description from the dataset
/// README, and the annotator instructions (either may be empty).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Dense id in `0..C-1`, assigned in ascending source-id order.
    pub id: u32,
    /// Original category id from the annotation file.
    pub source_id: u64,
    pub name: String,
    #[serde(default)]
    pub seed_description: String,
    #[serde(default)]
    pub instructions: String,
}

/// Case- and whitespace-insensitive normal form used for label matching.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Default)]
pub struct ClassTable {
    classes: Vec<ClassSpec>,
    by_source_id: BTreeMap<u64, u32>,
    by_norm_name: BTreeMap<String, u32>,
}

impl ClassTable {
    pub fn new(classes: Vec<ClassSpec>) -> Result<Self> {
        let mut by_source_id = BTreeMap::new();
        let mut by_norm_name = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Dataset(format!(
                    "class ids must be dense 0..C-1, got {} at index {i}",
                    c.id
                )));
            }
            if c.name.is_empty() {
                return Err(Error::Dataset(format!("class {} has an empty name", c.id)));
            }
            by_source_id.insert(c.source_id, c.id);
            by_norm_name.insert(normalize_name(&c.name), c.id);
        }
        Ok(Self {
            classes,
            by_source_id,
            by_norm_name,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassSpec> {
        self.classes.iter()
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassSpec> {
        self.classes.get(class_id as usize)
    }

    pub fn by_source_id(&self, source_id: u64) -> Option<&ClassSpec> {
        self.by_source_id.get(&source_id).map(|&i| &self.classes[i as usize])
    }

    /// Match a model-emitted label to a class (case/whitespace-insensitive
    /// exact match). Unknown labels return `None` and are dropped upstream.
    pub fn match_label(&self, label: &str) -> Option<&ClassSpec> {
        self.by_norm_name
            .get(&normalize_name(label))
            .map(|&i| &self.classes[i as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// An immutable set of images plus their ground truth, indexed by image
/// and by class.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub role: SplitRole,
    images: BTreeMap<u64, ImageRecord>,
    ground_truths: Vec<GroundTruthBox>,
    by_image: BTreeMap<u64, Vec<usize>>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl DatasetSplit {
    pub fn new(
        role: SplitRole,
        images: Vec<ImageRecord>,
        ground_truths: Vec<GroundTruthBox>,
    ) -> Result<Self> {
        let mut image_map = BTreeMap::new();
        for img in images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Dataset(format!(
                    "image {} has degenerate dimensions {}x{}",
                    img.id, img.width, img.height
                )));
            }
            if image_map.insert(img.id, img).is_some() {
                return Err(Error::Dataset("duplicate image id".into()));
            }
        }
        for gt in &ground_truths {
            if !image_map.contains_key(&gt.image_id) {
                return Err(Error::Dataset(format!(
                    "ground truth references unknown image id {}",
                    gt.image_id
                )));
            }
        }
        let mut split = Self {
            role,
            images: image_map,
            ground_truths,
            by_image: BTreeMap::new(),
            by_class: BTreeMap::new(),
        };
        split.rebuild_indices();
        Ok(split)
    }

    fn rebuild_indices(&mut self) {
        self.by_image.clear();
        self.by_class.clear();
        for (i, gt) in self.ground_truths.iter().enumerate() {
            self.by_image.entry(gt.image_id).or_default().push(i);
            self.by_class.entry(gt.class_id).or_default().push(i);
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.get(&id)
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.keys().copied().collect()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn ground_truths(&self) -> &[GroundTruthBox] {
        &self.ground_truths
    }

    pub fn ground_truths_on_image(&self, image_id: u64) -> Vec<&GroundTruthBox> {
        self.by_image
            .get(&image_id)
            .map(|idx| idx.iter().map(|&i| &self.ground_truths[i]).collect())
            .unwrap_or_default()
    }

    pub fn ground_truths_of_class(&self, class_id: u32) -> Vec<&GroundTruthBox> {
        self.by_class
            .get(&class_id)
            .map(|idx| idx.iter().map(|&i| &self.ground_truths[i]).collect())
            .unwrap_or_default()
    }

    /// Image ids that contain at least one instance of `class_id`, ascending.
    pub fn images_with_class(&self, class_id: u32) -> Vec<u64> {
        let mut ids: BTreeSet<u64> = BTreeSet::new();
        for gt in self.ground_truths_of_class(class_id) {
            ids.insert(gt.image_id);
        }
        ids.into_iter().collect()
    }

    pub fn class_instance_count(&self, class_id: u32) -> usize {
        self.by_class.get(&class_id).map_or(0, |v| v.len())
    }

    /// Restrict the split to a subset of image ids.
    pub fn restrict_to_images(&self, keep: &BTreeSet<u64>) -> DatasetSplit {
        let images: Vec<ImageRecord> = self
            .images
            .values()
            .filter(|img| keep.contains(&img.id))
            .cloned()
            .collect();
        let gts: Vec<GroundTruthBox> = self
            .ground_truths
            .iter()
            .filter(|gt| keep.contains(&gt.image_id))
            .cloned()
            .collect();
        DatasetSplit::new(self.role, images, gts).expect("subset of a valid split is valid")
    }
}

// ---------------------------------------------------------------------------
// COCO annotation file (de-facto standard fields only)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Sidecar metadata: class name -> seed description + annotator instructions.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassMetadata {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub instructions: String,
}

pub type MetadataFile = BTreeMap<String, ClassMetadata>;

pub fn load_metadata(path: &Path) -> Result<MetadataFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load a COCO annotation file into a split plus its class table.
///
/// Categories are remapped to dense ids in ascending source-id order;
/// `[x, y, w, h]` boxes become corner form and are clamped to image bounds.
/// Instructions from the sidecar metadata are attached by class name.
pub fn load_coco(
    annotation_path: &Path,
    image_root: &Path,
    role: SplitRole,
    metadata: Option<&MetadataFile>,
) -> Result<(DatasetSplit, ClassTable)> {
    let bytes = std::fs::read(annotation_path).map_err(|e| Error::io(annotation_path, e))?;
    let coco: CocoFile = serde_json::from_slice(&bytes)?;
    load_coco_parts(coco, image_root, role, metadata)
}

/// As [`load_coco`] but from in-memory JSON bytes (used by tests and fuzzing).
pub fn load_coco_bytes(
    bytes: &[u8],
    image_root: &Path,
    role: SplitRole,
    metadata: Option<&MetadataFile>,
) -> Result<(DatasetSplit, ClassTable)> {
    let coco: CocoFile = serde_json::from_slice(bytes)?;
    load_coco_parts(coco, image_root, role, metadata)
}

fn load_coco_parts(
    coco: CocoFile,
    image_root: &Path,
    role: SplitRole,
    metadata: Option<&MetadataFile>,
) -> Result<(DatasetSplit, ClassTable)> {
    let mut categories = coco.categories;
    categories.sort_by_key(|c| c.id);
    let mut classes = Vec::with_capacity(categories.len());
    for (i, cat) in categories.iter().enumerate() {
        if cat.name.is_empty() {
            return Err(Error::Dataset(format!("category {} has an empty name", cat.id)));
        }
        let meta = metadata.and_then(|m| {
            m.iter()
                .find(|(k, _)| normalize_name(k) == normalize_name(&cat.name))
                .map(|(_, v)| v)
        });
        classes.push(ClassSpec {
            id: i as u32,
            source_id: cat.id,
            name: cat.name.clone(),
            seed_description: meta.map(|m| m.description.clone()).unwrap_or_default(),
            instructions: meta.map(|m| m.instructions.clone()).unwrap_or_default(),
        });
    }
    let table = ClassTable::new(classes)?;

    let mut images = Vec::with_capacity(coco.images.len());
    let mut dims: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
    for img in &coco.images {
        if img.width == 0 || img.height == 0 {
            return Err(Error::Dataset(format!(
                "image {} has degenerate dimensions {}x{}",
                img.id, img.width, img.height
            )));
        }
        dims.insert(img.id, (img.width, img.height));
        images.push(ImageRecord {
            id: img.id,
            source: ImageSource::Path(image_root.join(&img.file_name)),
            width: img.width,
            height: img.height,
        });
    }

    let mut gts = Vec::with_capacity(coco.annotations.len());
    for ann in &coco.annotations {
        let class = table
            .by_source_id(ann.category_id)
            .ok_or(Error::UnknownCategory {
                ann_id: ann.id,
                category_id: ann.category_id,
            })?;
        let (w, h) = dims.get(&ann.image_id).copied().ok_or(Error::UnknownImage {
            ann_id: ann.id,
            image_id: ann.image_id,
        })?;
        if ann.bbox.len() != 4 || ann.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!(
                "annotation {} has a malformed bbox {:?}",
                ann.id, ann.bbox
            )));
        }
        let bbox = BoundingBox::from_xywh(ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3])
            .clamp_to(w as f64, h as f64);
        gts.push(GroundTruthBox {
            image_id: ann.image_id,
            class_id: class.id,
            bbox,
        });
    }

    let split = DatasetSplit::new(role, images, gts)?;
    Ok((split, table))
}

/// Keep at most `k` images containing each class, sampled deterministically
/// from `seed`. Sampling is per class over class-containing images (not per
/// annotation); the retained image set is the union over classes, and all
/// ground truth on retained images is kept.
pub fn subsample_k_shot(split: &DatasetSplit, k: usize, seed: u64, table: &ClassTable) -> DatasetSplit {
    assert!(k >= 1, "k-shot requires k >= 1");
    let mut keep: BTreeSet<u64> = BTreeSet::new();
    for class in table.iter() {
        let mut candidates = split.images_with_class(class.id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class.id as u64 + 1)));
        candidates.shuffle(&mut rng);
        for id in candidates.into_iter().take(k) {
            keep.insert(id);
        }
    }
    split.restrict_to_images(&keep)
}
