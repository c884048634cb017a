//! Easy-sample pseudo-label generation.
//!
//! Around every annotation point a local patch is segmented with a purely
//! classical pipeline (blur, Canny, closing, hole filling). Components that
//! contain an annotation point and are small enough to be a target are
//! kept; the fraction of points covered decides whether the sample is easy
//! enough to train on from the first epoch.

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::imaging::{
    canny, connected_components, crop_patch, fill_holes, gaussian_blur, morph_close,
    ConnectedComponent, Patch, DEFAULT_CANNY_HIGH, DEFAULT_CANNY_LOW, DEFAULT_CLOSE_RADIUS,
    DEFAULT_KSIZE, DEFAULT_SIGMA,
};
use crate::par::Exec;
use crate::types::{BinaryMask, GrayImage, Grid, Hyperparams, Point, Pool, SampleRecord, SoftLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpgOutcome {
    pub difficulty: Difficulty,
    pub recall: f64,
    pub pseudo_label: SoftLabel,
}

/// Largest component area accepted as a target: `ceil(r * h * w)`.
pub fn max_target_area(hp: &Hyperparams, height: usize, width: usize) -> usize {
    (hp.r * (height * width) as f64).ceil().max(1.0) as usize
}

/// Segments the patch centred on `point`; the mask is patch-local.
pub fn segment_patch(img: &GrayImage, point: Point, side: usize) -> Result<Patch<bool>> {
    let (r, c) = point.index_in(img.height(), img.width()).ok_or_else(|| {
        PalError::param(format!("point {point} outside {}x{} image", img.height(), img.width()))
    })?;
    let patch = crop_patch(img.grid(), (r, c), side)?;
    let blurred = gaussian_blur(&patch.grid, DEFAULT_SIGMA, DEFAULT_KSIZE)?;
    let edges = canny(&blurred, DEFAULT_CANNY_LOW, DEFAULT_CANNY_HIGH)?;
    let seg = fill_holes(&morph_close(&edges, DEFAULT_CLOSE_RADIUS));
    Ok(Patch {
        grid: seg,
        offset: patch.offset,
    })
}

/// Keeps components that contain at least one point and are no larger than
/// `max_area`. Returns the kept components and the fraction of points that
/// fall inside one of them.
pub fn validate_components(
    seg: &BinaryMask,
    points: &[(usize, usize)],
    max_area: usize,
) -> Result<(Vec<ConnectedComponent>, f64)> {
    if points.is_empty() {
        return Err(PalError::param("recall is undefined without points"));
    }
    if max_area == 0 {
        return Err(PalError::param("max_area must be at least 1"));
    }
    let kept: Vec<ConnectedComponent> = connected_components(seg)
        .into_iter()
        .filter(|comp| comp.area <= max_area && points.iter().any(|&(r, c)| comp.contains(r, c)))
        .collect();
    let covered = points
        .iter()
        .filter(|&&(r, c)| kept.iter().any(|k| k.contains(r, c)))
        .count();
    Ok((kept, covered as f64 / points.len() as f64))
}

/// Classifies a preparation-pool sample and builds its initial pseudo-label.
///
/// Easy samples get their kept components pasted onto a zero canvas
/// (overlapping patches merged by maximum); hard samples get an empty
/// canvas. Both then have every annotation point set to 1.0.
pub fn epg_classify(record: &SampleRecord, hp: &Hyperparams) -> Result<EpgOutcome> {
    if record.pool != Pool::Preparation {
        return Err(PalError::param(format!(
            "sample {} is not in the preparation pool",
            record.id
        )));
    }
    let points = &record.annotation.points;
    if points.is_empty() {
        return Err(PalError::NoPoints(record.id));
    }
    let img = &record.image;
    let (h, w) = img.dims();
    let max_area = max_target_area(hp, h, w);

    let mut canvas = Grid::<f32>::new(h, w);
    let mut covered = vec![false; points.len()];
    for &p in points {
        let seg = segment_patch(img, p, hp.d)?;
        let local: Vec<(usize, usize)> = points
            .iter()
            .filter_map(|q| seg.to_local(q.row as isize, q.col as isize))
            .collect();
        let (kept, _) = validate_components(&seg.grid, &local, max_area)?;
        let (r0, c0) = seg.offset;
        for comp in &kept {
            for &(r, c) in &comp.pixels {
                canvas.set(r0 + r, c0 + c, 1.0);
            }
            for (i, q) in points.iter().enumerate() {
                if let Some((lr, lc)) = seg.to_local(q.row as isize, q.col as isize) {
                    if comp.contains(lr, lc) {
                        covered[i] = true;
                    }
                }
            }
        }
    }
    let recall = covered.iter().filter(|&&c| c).count() as f64 / points.len() as f64;
    let difficulty = if recall >= hp.recall_threshold {
        Difficulty::Easy
    } else {
        Difficulty::Hard
    };
    if difficulty == Difficulty::Hard {
        canvas = Grid::new(h, w);
    }
    Ok(EpgOutcome {
        difficulty,
        recall,
        pseudo_label: SoftLabel::from_grid_clamped(canvas).with_points(points),
    })
}

/// Runs [`epg_classify`] over every record.
pub fn classify_all(
    records: &[SampleRecord],
    hp: &Hyperparams,
    exec: Exec,
) -> Result<Vec<EpgOutcome>> {
    exec.map(records, |r| epg_classify(r, hp)).into_iter().collect()
}
