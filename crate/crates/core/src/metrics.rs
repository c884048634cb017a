//! Evaluation protocol: pooled IoU, per-sample nIoU, target-level Pd and
//! Fa, and the false-alarm validity gate.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::connected_components;
use crate::types::BinaryMask;

/// Runs with a false-alarm rate strictly above this are invalid.
pub const FA_LIMIT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        pred.ensure_same_dims(gt)?;
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    /// TP / (TP + FP + FN); 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// IoU of a single pair; panics on shape mismatch.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    Confusion::of(pred, gt).expect("same shape").iou()
}

fn check_pairs(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(crate::PalError::InvalidData(format!(
            "{} predictions for {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Dataset-level IoU: all pixels pooled before dividing.
pub fn iou(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let mut total = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        let c = Confusion::of(p, g)?;
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    Ok(total.iou())
}

/// Mean of per-sample IoU.
pub fn niou(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<f64> {
    check_pairs(pred, gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += Confusion::of(p, g)?.iou();
    }
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PdFa {
    pub pd: f64,
    pub fa: f64,
    pub detected: usize,
    pub targets: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

/// Target-level matching for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMatch {
    /// `(gt index, predicted index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub gt_count: usize,
    /// Pixels of predicted components left unmatched.
    pub false_pixels: usize,
}

struct Blob {
    centroid: (f64, f64),
    pixels: Vec<(usize, usize)>,
}

fn blobs(mask: &BinaryMask) -> Vec<Blob> {
    connected_components(mask)
        .into_iter()
        .map(|c| Blob {
            centroid: c.centroid,
            pixels: c.pixels,
        })
        .collect()
}

fn overlaps(a: &Blob, b: &Blob) -> bool {
    // both pixel lists are sorted in raster order
    let (mut i, mut j) = (0, 0);
    while i < a.pixels.len() && j < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Candidate `(distance, gt, pred)` pairs: centroids within `deviation`
/// or overlapping components.
fn eligible_pairs(pred: &BinaryMask, gt: &BinaryMask, deviation: f64) -> (Vec<Blob>, Vec<Blob>, Vec<(f64, usize, usize)>) {
    let gts = blobs(gt);
    let preds = blobs(pred);
    let mut pairs = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            let d = (g.centroid.0 - p.centroid.0).hypot(g.centroid.1 - p.centroid.1);
            if d <= deviation || overlaps(g, p) {
                pairs.push((d, gi, pi));
            }
        }
    }
    (gts, preds, pairs)
}

/// Greedy nearest-centroid matching: eligible pairs in order of increasing
/// centroid distance, each target and each prediction used at most once.
pub fn match_image(pred: &BinaryMask, gt: &BinaryMask, deviation: f64) -> Result<ImageMatch> {
    pred.ensure_same_dims(gt)?;
    let (gts, preds, mut pairs) = eligible_pairs(pred, gt, deviation);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut matched = Vec::new();
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matched.push((gi, pi));
        }
    }
    let false_pixels = preds
        .iter()
        .zip(&pred_used)
        .filter(|(_, &u)| !u)
        .map(|(p, _)| p.pixels.len())
        .sum();
    Ok(ImageMatch {
        pairs: matched,
        gt_count: gts.len(),
        false_pixels,
    })
}

/// Probability of detection and false-alarm pixel rate over a dataset.
pub fn pd_fa(pred: &[BinaryMask], gt: &[BinaryMask], deviation: f64) -> Result<PdFa> {
    check_pairs(pred, gt)?;
    let mut out = PdFa::default();
    for (p, g) in pred.iter().zip(gt) {
        let m = match_image(p, g, deviation)?;
        out.detected += m.pairs.len();
        out.targets += m.gt_count;
        out.false_pixels += m.false_pixels;
        out.pixels += p.len();
    }
    out.pd = if out.targets == 0 {
        1.0
    } else {
        out.detected as f64 / out.targets as f64
    };
    out.fa = if out.pixels == 0 {
        0.0
    } else {
        out.false_pixels as f64 / out.pixels as f64
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Invalid,
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

pub fn validity(fa: f64) -> Validity {
    if fa > FA_LIMIT {
        Validity::Invalid
    } else {
        Validity::Valid
    }
}

/// All four metrics plus the gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub valid: bool,
}

pub fn evaluate(pred: &[BinaryMask], gt: &[BinaryMask], deviation: f64) -> Result<MetricSet> {
    let pf = pd_fa(pred, gt, deviation)?;
    Ok(MetricSet {
        iou: iou(pred, gt)?,
        niou: niou(pred, gt)?,
        pd: pf.pd,
        fa: pf.fa,
        valid: validity(pf.fa).is_valid(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Grid;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
        Grid::from_fn(h, w, |r, c| {
            rects
                .iter()
                .any(|&(r0, c0, rh, cw)| (r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c))
        })
    }

    #[test]
    fn iou_fixtures() {
        let gt = vec![rect(8, 8, &[(2, 2, 2, 2)]), rect(8, 8, &[(5, 5, 1, 1)])];
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        let empty = vec![BinaryMask::new(8, 8), BinaryMask::new(8, 8)];
        assert_eq!(iou(&empty, &gt).unwrap(), 0.0);
        let half = vec![rect(8, 8, &[(2, 2, 2, 1)])];
        assert_eq!(iou(&half, &gt[..1]).unwrap(), 0.5);
    }

    #[test]
    fn niou_fixtures() {
        let gt = vec![rect(8, 8, &[(2, 2, 2, 2)]), rect(8, 8, &[(5, 5, 1, 1)])];
        assert_eq!(niou(&gt, &gt).unwrap(), 1.0);
        let pred = vec![gt[0].clone(), BinaryMask::new(8, 8)];
        assert_eq!(niou(&pred, &gt).unwrap(), 0.5);
        // 100-px target found, 4-px target missed
        let gt = vec![rect(16, 16, &[(0, 0, 10, 10)]), rect(16, 16, &[(3, 3, 2, 2)])];
        let pred = vec![gt[0].clone(), BinaryMask::new(16, 16)];
        assert!((iou(&pred, &gt).unwrap() - 100.0 / 104.0).abs() < 1e-12);
        assert_eq!(niou(&pred, &gt).unwrap(), 0.5);
        let both_empty = vec![BinaryMask::new(4, 4)];
        assert_eq!(niou(&both_empty, &both_empty).unwrap(), 1.0);
    }

    #[test]
    fn pd_fa_fixtures() {
        let gt = vec![rect(64, 64, &[(10, 10, 3, 3)]); 10];
        let r = pd_fa(&gt, &gt, 3.0).unwrap();
        assert_eq!((r.pd, r.fa), (1.0, 0.0));

        let mut pred = gt.clone();
        pred[4] = rect(64, 64, &[(10, 10, 3, 3), (40, 40, 1, 5)]);
        let r = pd_fa(&pred, &gt, 3.0).unwrap();
        assert_eq!(r.pd, 1.0);
        assert_eq!(r.false_pixels, 5);
        assert_eq!(r.fa, 5.0 / 40960.0);
        assert!((r.fa - 1.22e-4).abs() < 1e-6);
        assert_eq!(validity(r.fa), Validity::Invalid);

        // centroid two pixels away without overlap
        let gt = vec![rect(32, 32, &[(10, 10, 1, 1)])];
        let pred = vec![rect(32, 32, &[(10, 12, 1, 1)])];
        assert_eq!(pd_fa(&pred, &gt, 3.0).unwrap().pd, 1.0);
        assert_eq!(pd_fa(&pred, &gt, 1.0).unwrap().pd, 0.0);
    }

    #[test]
    fn overlap_detects_even_when_far() {
        let gt = vec![rect(32, 32, &[(0, 0, 1, 20)])];
        let pred = vec![rect(32, 32, &[(0, 19, 1, 1)])];
        assert_eq!(pd_fa(&pred, &gt, 3.0).unwrap().pd, 1.0);
    }

    #[test]
    fn validity_gate_is_strict() {
        assert_eq!(validity(1.22e-4), Validity::Invalid);
        assert_eq!(validity(1e-4), Validity::Valid);
        assert_eq!(validity(0.0), Validity::Valid);
        assert_eq!(validity(1e-4 + 1e-12), Validity::Invalid);
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        let mask = proptest::collection::vec(proptest::bool::weighted(0.2), 100)
            .prop_map(|d| Grid::from_vec(10, 10, d).unwrap());
        (mask.clone(), mask)
    }

    proptest! {
        #[test]
        fn metric_ranges_and_symmetry((a, b) in arb_pair()) {
            let (a, b) = (vec![a], vec![b]);
            let i = iou(&a, &b).unwrap();
            let n = niou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&n));
            prop_assert_eq!(i, iou(&b, &a).unwrap());
            prop_assert_eq!(n, niou(&b, &a).unwrap());
            let pf = pd_fa(&a, &b, 3.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&pf.pd) && pf.fa >= 0.0);
        }

        #[test]
        fn adding_unmatched_component_never_lowers_fa((a, b) in arb_pair()) {
            let mut far = Grid::from_fn(20, 20, |r, c| r < 10 && c < 10 && *a.get(r, c));
            let gt = Grid::from_fn(20, 20, |r, c| r < 10 && c < 10 && *b.get(r, c));
            let before = pd_fa(&[far.clone()], &[gt.clone()], 3.0).unwrap();
            far.set(18, 18, true);
            let after = pd_fa(&[far], &[gt], 3.0).unwrap();
            prop_assert!(after.fa >= before.fa);
            prop_assert!(after.pd >= before.pd);
        }
    }
}
