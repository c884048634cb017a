//! On-disk dataset layout.
//!
//! ```text
//! <dir>/images/000000.png      16-bit grayscale scene
//! <dir>/gt_masks/000000.png    8-bit 0/255 ground truth
//! <dir>/labels.json            point annotations and scene classes
//! <dir>/test/...               same layout for the evaluation split
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pal_core::datagen::{Annotations, GroundTruthStore};
use pal_core::io::{read_gray, read_mask, write_gray, write_mask, BitDepth};
use pal_core::scheduler::Dataset;
use pal_core::types::{SampleId, SceneClass};
use pal_core::{GrayImage, Point, PointAnnotation, PointKind, SampleRecord};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub id: SampleId,
    pub scene_class: SceneClass,
    pub coarse: Vec<Point>,
    pub centroid: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsFile {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<LabelEntry>,
}

pub fn file_name(id: SampleId) -> String {
    format!("{id:06}.png")
}

struct Split<'a> {
    ids: Vec<SampleId>,
    classes: Vec<SceneClass>,
    images: Vec<&'a GrayImage>,
    masks: Vec<&'a pal_core::BinaryMask>,
    annotations: Vec<Option<&'a Annotations>>,
}

fn write_split(dir: &Path, split: &Split) -> Result<()> {
    let (img_dir, gt_dir) = (dir.join("images"), dir.join("gt_masks"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&gt_dir)?;
    let mut samples = Vec::with_capacity(split.ids.len());
    for i in 0..split.ids.len() {
        let id = split.ids[i];
        write_gray(img_dir.join(file_name(id)), split.images[i].grid(), BitDepth::Sixteen)?;
        write_mask(gt_dir.join(file_name(id)), split.masks[i])?;
        let (coarse, centroid) = match split.annotations[i] {
            Some(a) => (a.coarse.points.clone(), a.centroid.points.clone()),
            None => (vec![], vec![]),
        };
        samples.push(LabelEntry {
            id,
            scene_class: split.classes[i],
            coarse,
            centroid,
        });
    }
    let (height, width) = split.images.first().map(|g| g.grid().dims()).unwrap_or((0, 0));
    let labels = LabelsFile {
        height,
        width,
        samples,
    };
    fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)? + "\n")?;
    Ok(())
}

/// Writes the training split under `dir` and the test split under `dir/test`.
/// Test annotations are not kept by the generator, so their point lists are
/// left empty.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let train = Split {
        ids: ds.records.iter().map(|r| r.id).collect(),
        classes: ds.records.iter().map(|r| r.scene_class).collect(),
        images: ds.records.iter().map(|r| &r.image).collect(),
        masks: ds
            .records
            .iter()
            .map(|r| ds.truth.mask(r.id).context("missing ground truth"))
            .collect::<Result<_>>()?,
        annotations: ds.annotations.iter().map(Some).collect(),
    };
    write_split(dir, &train)?;
    let first = ds.records.len() as SampleId;
    let test = Split {
        ids: (0..ds.test_images.len()).map(|i| first + i as SampleId).collect(),
        classes: ds.test_classes.clone(),
        images: ds.test_images.iter().collect(),
        masks: ds.test_truth.iter().collect(),
        annotations: vec![None; ds.test_images.len()],
    };
    write_split(&dir.join("test"), &test)
}

fn read_labels(dir: &Path) -> Result<LabelsFile> {
    let path = dir.join("labels.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_split(dir: &Path) -> Result<(LabelsFile, Vec<GrayImage>, Vec<pal_core::BinaryMask>)> {
    let labels = read_labels(dir)?;
    let mut images = Vec::with_capacity(labels.samples.len());
    let mut masks = Vec::with_capacity(labels.samples.len());
    for s in &labels.samples {
        let name = file_name(s.id);
        let img = GrayImage::new(read_gray(dir.join("images").join(&name))?)?;
        let mask = read_mask(dir.join("gt_masks").join(&name))?;
        if img.grid().dims() != (labels.height, labels.width) || mask.dims() != (labels.height, labels.width) {
            bail!("{name}: size differs from labels.json");
        }
        images.push(img);
        masks.push(mask);
    }
    Ok((labels, images, masks))
}

/// Loads a dataset written by [`write_dataset`], annotated with `kind`.
pub fn read_dataset(dir: &Path, kind: PointKind) -> Result<Dataset> {
    if !dir.join("labels.json").is_file() {
        bail!("{} is not a dataset directory (no labels.json)", dir.display());
    }
    let (labels, images, masks) = read_split(dir)?;
    let mut records = Vec::with_capacity(images.len());
    let mut annotations = Vec::with_capacity(images.len());
    let mut truth = GroundTruthStore::default();
    for ((s, img), mask) in labels.samples.iter().zip(images).zip(masks) {
        let ann = Annotations {
            coarse: PointAnnotation::new(s.coarse.clone(), PointKind::Coarse),
            centroid: PointAnnotation::new(s.centroid.clone(), PointKind::Centroid),
        };
        let chosen = match kind {
            PointKind::Coarse => ann.coarse.clone(),
            PointKind::Centroid => ann.centroid.clone(),
        };
        records.push(SampleRecord::new(s.id, img, chosen, s.scene_class));
        annotations.push(ann);
        truth.insert(s.id, mask);
    }
    let (test_images, test_truth, test_classes) = if dir.join("test").join("labels.json").is_file() {
        let (labels, imgs, masks) = read_split(&dir.join("test"))?;
        (imgs, masks, labels.samples.iter().map(|s| s.scene_class).collect())
    } else {
        (vec![], vec![], vec![])
    };
    Ok(Dataset {
        records,
        annotations,
        truth,
        test_images,
        test_truth,
        test_classes,
    })
}

/// PNG files of a directory, sorted by name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
