//! Coarse outer updates (COU) and fine inner updates (FIU).
//!
//! COU decides whether a preparation-pool sample can join the training
//! pool: the current model's predicted components are matched against the
//! annotation points, and the sample is admitted when the missed-target
//! rate and the false-target rate are both under their thresholds. The
//! admitted label keeps only components that hit a point, plus the points.
//!
//! FIU refines training-pool labels. Around each pseudo-label component
//! centroid a `d x d` window of the prediction is thresholded adaptively;
//! candidate regions that contain a label centroid are merged into a
//! binary map `N`. Inside `N` the label moves to the mean of label and
//! prediction, outside it decays by `lambda`.

use crate::error::{PalError, Result};
use crate::imaging::{connected_components, crop_patch, label_components, ConnectedComponent};
use crate::types::{BinaryMask, Grid, Hyperparams, Point, SampleId, SampleRecord, SoftLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct CouDecision {
    pub id: SampleId,
    pub miss_rate: f64,
    pub false_rate: f64,
    pub admitted: bool,
    /// Present iff admitted.
    pub refined_label: Option<SoftLabel>,
}

/// Point-hit statistics of a binarised prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointHits {
    pub components: Vec<ConnectedComponent>,
    /// Per component: does it contain at least one point.
    pub hit: Vec<bool>,
    pub missed_points: usize,
}

pub fn point_hits(mask: &BinaryMask, points: &[Point]) -> PointHits {
    let (labels, components) = label_components(mask);
    let mut hit = vec![false; components.len()];
    let mut missed_points = 0;
    for p in points {
        let label = p
            .index_in(mask.height(), mask.width())
            .map(|(r, c)| *labels.get(r, c))
            .unwrap_or(0);
        if label == 0 {
            missed_points += 1;
        } else {
            hit[label as usize - 1] = true;
        }
    }
    PointHits {
        components,
        hit,
        missed_points,
    }
}

/// Evaluates one preparation-pool sample against the current prediction.
pub fn cou_evaluate(
    record: &SampleRecord,
    prediction: &SoftLabel,
    t_m: f64,
    t_f: f64,
    hp: &Hyperparams,
) -> Result<CouDecision> {
    record.image.ensure_same_dims(prediction)?;
    let points = &record.annotation.points;
    if points.is_empty() {
        return Err(PalError::NoPoints(record.id));
    }
    let mask = prediction.above(hp.pred_threshold);
    let hits = point_hits(&mask, points);
    let n = points.len() as f64;
    let miss_rate = hits.missed_points as f64 / n;
    let false_rate = hits.hit.iter().filter(|&&h| !h).count() as f64 / n;
    let admitted = miss_rate <= t_m && false_rate <= t_f;

    let refined_label = admitted.then(|| {
        let (h, w) = prediction.dims();
        let mut keep = Grid::<f32>::new(h, w);
        for (comp, _) in hits.components.iter().zip(&hits.hit).filter(|(_, &hit)| hit) {
            for &(r, c) in &comp.pixels {
                keep.set(r, c, *prediction.get(r, c));
            }
        }
        SoftLabel::from_grid_clamped(keep).with_points(points)
    });
    Ok(CouDecision {
        id: record.id,
        miss_rate,
        false_rate,
        admitted,
        refined_label,
    })
}

/// `max(P) * (tb + k (1 - tb) * count / (h w r))`, where `count` is the
/// number of label pixels at or above the binarisation threshold and `h, w`
/// are the patch dimensions.
pub fn adaptive_threshold<T: Copy + Into<f64>>(
    pred_patch: &Grid<T>,
    label_patch: &Grid<T>,
    hp: &Hyperparams,
) -> f64 {
    let max_p = pred_patch
        .data()
        .iter()
        .map(|&v| v.into())
        .fold(0.0f64, f64::max);
    let thr = hp.binarize_threshold as f64;
    let count = label_patch.data().iter().filter(|&&v| v.into() >= thr).count() as f64;
    let area = (pred_patch.height() * pred_patch.width()) as f64 * hp.r;
    max_p * (hp.tb + hp.k * (1.0 - hp.tb) * count / area)
}

/// Candidate map of one FIU step.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    /// Binary membership `N` (union of kept candidate regions).
    pub union: BinaryMask,
    /// Kept candidate regions in image coordinates.
    pub kept: Vec<ConnectedComponent>,
    /// Rounded centroids of the binarised pseudo-label components.
    pub centroids: Vec<(usize, usize)>,
}

pub fn extract_candidates(
    prediction: &SoftLabel,
    pseudo_label: &SoftLabel,
    hp: &Hyperparams,
) -> Result<Candidates> {
    prediction.ensure_same_dims(pseudo_label)?;
    let (h, w) = prediction.dims();
    let centroids: Vec<(usize, usize)> = connected_components(&pseudo_label.at_least(hp.binarize_threshold))
        .iter()
        .map(|c| c.rounded_centroid())
        .collect();

    let mut union = BinaryMask::new(h, w);
    for &center in &centroids {
        let p_patch = crop_patch(prediction.grid(), center, hp.d)?;
        let l_patch = crop_patch(pseudo_label.grid(), center, hp.d)?;
        let t = adaptive_threshold(&p_patch.grid, &l_patch.grid, hp);
        let cand = p_patch.grid.map(|&v| (v as f64) > t);
        let (r0, c0) = p_patch.offset;
        for comp in connected_components(&cand) {
            let hits_centroid = centroids
                .iter()
                .filter_map(|&(r, c)| p_patch.to_local(r as isize, c as isize))
                .any(|(r, c)| comp.contains(r, c));
            if hits_centroid {
                for &(r, c) in &comp.pixels {
                    union.set(r0 + r, c0 + c, true);
                }
            }
        }
    }
    let kept = connected_components(&union);
    Ok(Candidates {
        union,
        kept,
        centroids,
    })
}

/// Applies the decay/blend update given a candidate map, then restores the
/// annotation points to 1.0.
pub fn blend_update(
    pseudo_label: &SoftLabel,
    prediction: &SoftLabel,
    union: &BinaryMask,
    lambda: f32,
    points: &[Point],
) -> Result<SoftLabel> {
    pseudo_label.ensure_same_dims(prediction)?;
    pseudo_label.ensure_same_dims(union)?;
    let data: Vec<f32> = pseudo_label
        .data()
        .iter()
        .zip(prediction.data())
        .zip(union.data())
        .map(|((&l, &p), &n)| if n { (l + p) * 0.5 } else { lambda * l })
        .collect();
    let grid = Grid::from_vec(pseudo_label.height(), pseudo_label.width(), data)?;
    Ok(SoftLabel::from_grid_clamped(grid).with_points(points))
}

/// One fine inner update `L_n -> L_{n+1}`.
pub fn fiu_update(
    pseudo_label: &SoftLabel,
    prediction: &SoftLabel,
    points: &[Point],
    hp: &Hyperparams,
) -> Result<SoftLabel> {
    let cands = extract_candidates(prediction, pseudo_label, hp)?;
    blend_update(pseudo_label, prediction, &cands.union, hp.lambda_decay, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GrayImage, PointAnnotation, PointKind, SceneClass};

    fn rec(h: usize, w: usize, points: Vec<Point>) -> SampleRecord {
        SampleRecord::new(
            3,
            GrayImage::new(Grid::filled(h, w, 0.2)).unwrap(),
            PointAnnotation::new(points, PointKind::Coarse),
            SceneClass::Hard,
        )
    }

    fn boxes(h: usize, w: usize, rects: &[(usize, usize, usize, usize)], v: f32) -> SoftLabel {
        SoftLabel::new(Grid::from_fn(h, w, |r, c| {
            if rects
                .iter()
                .any(|&(r0, c0, rh, cw)| (r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c))
            {
                v
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn cou_perfect_detection_admitted() {
        let r = rec(16, 16, vec![Point::new(3, 3), Point::new(11, 11)]);
        let pred = boxes(16, 16, &[(2, 2, 3, 3), (10, 10, 3, 3)], 0.9);
        let d = cou_evaluate(&r, &pred, 0.5, 10.0, &Hyperparams::default()).unwrap();
        assert_eq!((d.miss_rate, d.false_rate, d.admitted), (0.0, 0.0, true));
        let label = d.refined_label.unwrap();
        assert_eq!(*label.get(3, 3), 1.0);
        assert_eq!(*label.get(2, 2), 0.9);
    }

    #[test]
    fn cou_half_miss_depends_on_threshold() {
        let r = rec(16, 16, vec![Point::new(3, 3), Point::new(11, 11)]);
        let pred = boxes(16, 16, &[(2, 2, 3, 3)], 0.9);
        let hp = Hyperparams::default();
        let d = cou_evaluate(&r, &pred, 0.5, 10.0, &hp).unwrap();
        assert_eq!(d.miss_rate, 0.5);
        assert!(d.admitted);
        let d = cou_evaluate(&r, &pred, 0.4, 10.0, &hp).unwrap();
        assert!(!d.admitted);
        assert!(d.refined_label.is_none());
    }

    #[test]
    fn cou_removes_exactly_the_spurious_components() {
        let r = rec(16, 16, vec![Point::new(2, 2)]);
        let rects = [(1, 1, 3, 3), (1, 10, 2, 2), (8, 3, 1, 4), (12, 12, 3, 3)];
        let pred = boxes(16, 16, &rects, 0.8);
        let d = cou_evaluate(&r, &pred, 0.5, 10.0, &Hyperparams::default()).unwrap();
        assert_eq!(d.false_rate, 3.0);
        assert!(d.admitted);
        let label = d.refined_label.unwrap();
        let expected = boxes(16, 16, &rects[..1], 0.8).with_points(&[Point::new(2, 2)]);
        assert_eq!(label, expected);
        // removed pixels are exactly those of the three spurious boxes
        let removed = pred
            .data()
            .iter()
            .zip(label.data())
            .filter(|(p, l)| **p > 0.0 && **l == 0.0)
            .count();
        assert_eq!(removed, 4 + 4 + 9);
    }

    #[test]
    fn cou_requires_points() {
        let r = rec(16, 16, vec![]);
        let pred = SoftLabel::zeros(16, 16);
        assert!(matches!(
            cou_evaluate(&r, &pred, 0.5, 10.0, &Hyperparams::default()),
            Err(PalError::NoPoints(3))
        ));
    }

    #[test]
    fn adaptive_threshold_substitutions() {
        let hp = Hyperparams {
            r: 0.01,
            ..Hyperparams::default()
        };
        let mut p = Grid::<f64>::new(20, 20);
        p.set(5, 5, 1.0);
        let empty = Grid::<f64>::new(20, 20);
        assert!((adaptive_threshold(&p, &empty, &hp) - 0.5).abs() < 1e-12);
        p.set(5, 5, 0.8);
        // h w r = 4 label pixels
        let l = Grid::from_fn(20, 20, |r, c| if r == 0 && c < 4 { 1.0 } else { 0.0 });
        assert!((adaptive_threshold(&p, &l, &hp) - 0.6).abs() < 1e-12);
        let zero = Grid::<f64>::new(20, 20);
        assert_eq!(adaptive_threshold(&zero, &l, &hp), 0.0);
    }

    #[test]
    fn candidates_keep_identical_blob() {
        let label = boxes(40, 40, &[(18, 18, 4, 4)], 1.0);
        let c = extract_candidates(&label, &label, &Hyperparams::default()).unwrap();
        assert_eq!(c.union, label.at_least(0.5));
        let zero = SoftLabel::zeros(40, 40);
        let c = extract_candidates(&zero, &label, &Hyperparams::default()).unwrap();
        assert_eq!(c.union.count(), 0);
    }

    #[test]
    fn candidate_without_centroid_eliminated() {
        let label = boxes(40, 40, &[(18, 18, 3, 3)], 1.0);
        // strong prediction offset from the label, inside the window but
        // not covering the centroid (19, 19)
        let pred = boxes(40, 40, &[(25, 25, 3, 3)], 0.9);
        let c = extract_candidates(&pred, &label, &Hyperparams::default()).unwrap();
        assert_eq!(c.union.count(), 0);
    }

    #[test]
    fn fiu_pixel_examples() {
        let hp = Hyperparams {
            lambda_decay: 1.0,
            ..Hyperparams::default()
        };
        let label = boxes(32, 32, &[(10, 10, 3, 3)], 0.4);
        let zero = SoftLabel::zeros(32, 32);
        // no positive label pixels means no centroids and an empty N
        assert_eq!(fiu_update(&label, &zero, &[], &hp).unwrap(), label);

        let hp = Hyperparams::default();
        let out = fiu_update(&label, &zero, &[], &hp).unwrap();
        assert!((*out.get(10, 10) - 0.388).abs() < 1e-6);
        assert_eq!(*out.get(10, 10), 0.97f32 * 0.4f32);

        let mut n = BinaryMask::new(32, 32);
        n.set(5, 5, true);
        let l = boxes(32, 32, &[(5, 5, 1, 1)], 1.0);
        let p = boxes(32, 32, &[(5, 5, 1, 1)], 0.6);
        let out = blend_update(&l, &p, &n, 0.97, &[]).unwrap();
        assert!((*out.get(5, 5) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn fiu_restores_points() {
        let label = boxes(32, 32, &[(10, 10, 3, 3)], 1.0);
        let zero = SoftLabel::zeros(32, 32);
        let out = fiu_update(&label, &zero, &[Point::new(11, 11)], &Hyperparams::default()).unwrap();
        assert_eq!(*out.get(11, 11), 1.0);
        assert_eq!(*out.get(10, 10), 0.97);
    }
}
