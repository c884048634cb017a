//! Reports how EPG splits the default synthetic dataset and how good its
//! pseudo-labels are, for a few values of the target-area ratio `r`.

use pal_core::epg::{classify_all, Difficulty};
use pal_core::metrics::mask_iou;
use pal_core::par::Exec;
use pal_core::scheduler::{Dataset, SyntheticConfig};
use pal_core::types::SceneClass;
use pal_core::Hyperparams;

fn main() -> pal_core::Result<()> {
    let data = Dataset::synthetic(&SyntheticConfig::default(), Exec::default())?;
    let rs: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("r values"))
        .collect();
    for r in if rs.is_empty() { vec![0.02, 0.03, 0.05] } else { rs } {
        let hp = Hyperparams { r, ..Hyperparams::default() };
        let out = classify_all(&data.records, &hp, Exec::default())?;
        let mut easy = [0usize; 2];
        let mut iou_sum = 0.0;
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (rec, o) in data.records.iter().zip(&out) {
            if o.difficulty == Difficulty::Easy {
                easy[(rec.scene_class == SceneClass::Hard) as usize] += 1;
                let gt = data.truth.mask(rec.id).unwrap();
                let pred = o.pseudo_label.at_least(0.5);
                iou_sum += mask_iou(&pred, gt);
                for (p, g) in pred.data().iter().zip(gt.data()) {
                    tp += (*p && *g) as usize;
                    fp += (*p && !*g) as usize;
                    fn_ += (!*p && *g) as usize;
                }
            }
        }
        let n = easy[0] + easy[1];
        println!(
            "r {r}: easy {n} (from easy scenes {}, hard scenes {}), mean label iou {:.3}, precision {:.3}, recall {:.3}",
            easy[0],
            easy[1],
            iou_sum / n.max(1) as f64,
            tp as f64 / (tp + fp).max(1) as f64,
            tp as f64 / (tp + fn_).max(1) as f64
        );
    }
    Ok(())
}
