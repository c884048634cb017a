//! The three-phase training loop: pre-start on easy samples, enhancement
//! with periodic admission and label refinement, then refinement with label
//! updates only.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, generate_dataset, Annotations, GroundTruthStore, SceneSpec};
use crate::dual_update::{cou_evaluate, fiu_update};
use crate::epg::{classify_all, Difficulty, EpgOutcome};
use crate::error::{PalError, Result};
use crate::loss::LossKind;
use crate::metrics::{evaluate, mask_iou, MetricSet};
use crate::model::Predictor;
use crate::par::Exec;
use crate::types::{
    validate, BinaryMask, GrayImage, Grid, Hyperparams, PointKind, Pool, SampleId, SampleRecord,
    SceneClass,
    SoftLabel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prestart,
    Enhancement,
    Refinement,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prestart => "prestart",
            Phase::Enhancement => "enhancement",
            Phase::Refinement => "refinement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub total_epochs: usize,
    pub prestart_end: usize,
    pub refine_start: usize,
    pub update_period: usize,
}

impl PhaseSchedule {
    pub fn new(hp: &Hyperparams) -> Result<Self> {
        let total = hp.total_epochs;
        let s = Self {
            total_epochs: total,
            prestart_end: (hp.prestart_frac * total as f64).floor() as usize,
            refine_start: (hp.refine_frac * total as f64).floor() as usize,
            update_period: hp.update_period,
        };
        if !(0 < s.prestart_end && s.prestart_end < s.refine_start && s.refine_start < total) {
            return Err(PalError::param(format!(
                "{total} epochs give phase bounds {} and {}; need 0 < prestart_end < refine_start < total",
                s.prestart_end, s.refine_start
            )));
        }
        if s.update_period == 0 {
            return Err(PalError::param("update_period must be positive"));
        }
        Ok(s)
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.prestart_end {
            Phase::Prestart
        } else if epoch < self.refine_start {
            Phase::Enhancement
        } else {
            Phase::Refinement
        }
    }

    /// Miss-rate threshold: linear from `tm_init` at `prestart_end` to 1 at
    /// `refine_start`, then held at 1.
    pub fn tm_at(&self, epoch: usize, tm_init: f64) -> Result<f64> {
        if epoch < self.prestart_end {
            return Err(PalError::param(format!(
                "T_m is undefined before epoch {}",
                self.prestart_end
            )));
        }
        let span = (self.refine_start - self.prestart_end) as f64;
        let t = ((epoch - self.prestart_end) as f64 / span).min(1.0);
        Ok(tm_init + (1.0 - tm_init) * t)
    }

    fn on_period(&self, epoch: usize) -> bool {
        epoch >= self.prestart_end && (epoch - self.prestart_end) % self.update_period == 0
    }

    /// Admission runs on period epochs of the enhancement phase, skipping
    /// its first epoch.
    pub fn fires_cou(&self, epoch: usize) -> bool {
        self.phase(epoch) == Phase::Enhancement && epoch != self.prestart_end && self.on_period(epoch)
    }

    /// Label refinement runs on period epochs of enhancement and refinement.
    pub fn fires_fiu(&self, epoch: usize) -> bool {
        epoch < self.total_epochs && self.phase(epoch) != Phase::Prestart && self.on_period(epoch)
    }

    pub fn last_cou_epoch(&self) -> Option<usize> {
        (self.prestart_end..self.refine_start).rev().find(|&e| self.fires_cou(e))
    }
}

/// What the loop trains on and whether pseudo-labels evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// EPG, then admission and refinement updates.
    Pal,
    /// Every sample with its dense ground-truth mask; upper bound.
    FullSupervision,
    /// Every sample with its annotation points as the only positives.
    PointsOnly,
    /// Easy samples with their EPG labels; no updates.
    EpgOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Pal, Mode::FullSupervision, Mode::PointsOnly, Mode::EpgOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Pal => "pal",
            Mode::FullSupervision => "full-supervision",
            Mode::PointsOnly => "points-only",
            Mode::EpgOnly => "epg-only",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = PalError;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PalError::param(format!("unknown mode '{s}'")))
    }
}

/// Training samples with hidden ground truth plus a held-out test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub annotations: Vec<Annotations>,
    pub truth: GroundTruthStore,
    pub test_images: Vec<GrayImage>,
    pub test_truth: Vec<BinaryMask>,
    pub test_classes: Vec<SceneClass>,
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub easy_frac: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            easy_frac: 0.5,
            height: 64,
            width: 64,
            seed: 42,
        }
    }
}

/// Seed offset separating the test split from the training split.
const TEST_STREAM: u64 = 0x7E57;

impl Dataset {
    pub fn synthetic(cfg: &SyntheticConfig, exec: Exec) -> Result<Self> {
        let easy = SceneSpec::easy(cfg.height, cfg.width);
        let hard = SceneSpec::hard(cfg.height, cfg.width);
        let train = generate_dataset(
            cfg.n_train,
            cfg.easy_frac,
            (&easy, &hard),
            PointKind::Coarse,
            cfg.seed,
            0,
            exec,
        )?;
        let test = generate_dataset(
            cfg.n_test.max(1),
            cfg.easy_frac,
            (&easy, &hard),
            PointKind::Coarse,
            derive_seed(cfg.seed, TEST_STREAM),
            cfg.n_train as SampleId,
            exec,
        )?;
        let test_truth = test
            .records
            .iter()
            .map(|r| test.truth.mask(r.id).cloned().expect("generated together"))
            .collect();
        let test_classes = test.records.iter().map(|r| r.scene_class).collect();
        let mut ds = Self {
            records: train.records,
            annotations: train.annotations,
            truth: train.truth,
            test_images: test.records.into_iter().map(|r| r.image).collect(),
            test_truth,
            test_classes,
        };
        if cfg.n_test == 0 {
            ds.test_images.clear();
            ds.test_truth.clear();
            ds.test_classes.clear();
        }
        Ok(ds)
    }

    /// Switches every record to the annotation of `kind`.
    pub fn with_labels(mut self, kind: PointKind) -> Self {
        for (rec, ann) in self.records.iter_mut().zip(&self.annotations) {
            rec.annotation = match kind {
                PointKind::Coarse => ann.coarse.clone(),
                PointKind::Centroid => ann.centroid.clone(),
            };
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    pub pool_train: usize,
    pub pool_prep: usize,
    pub train_loss: f64,
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub valid: bool,
    /// Mean per-sample IoU of binarised training-pool labels against
    /// ground truth; `None` while the pool is empty.
    pub label_iou_gt: Option<f64>,
    pub cou_fired: bool,
    pub fiu_fired: bool,
    pub admitted: usize,
}

pub const CSV_HEADER: &str =
    "epoch,phase,iou,niou,pd,fa,valid,pool_train,pool_prep,label_iou_gt";

impl EpochRow {
    pub fn csv_line(&self) -> String {
        let label = self.label_iou_gt.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            self.iou,
            self.niou,
            self.pd,
            self.fa,
            self.valid,
            self.pool_train,
            self.pool_prep,
            label
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub id: SampleId,
    pub epoch: usize,
    pub miss_rate: f64,
    /// Admitted with a points-only label at the last admission epoch.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub labels: PointKind,
    pub seed: u64,
    pub schedule: PhaseSchedule,
    pub n_train: usize,
    pub n_test: usize,
    pub parameter_count: usize,
    pub easy_after_epg: usize,
    pub epochs: Vec<EpochRow>,
    pub admissions: Vec<Admission>,
    pub final_metrics: MetricSet,
}

impl RunReport {
    /// Pretty JSON with a trailing newline, as written to `report.json`.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for row in &self.epochs {
            s.push_str(&row.csv_line());
            s.push('\n');
        }
        s
    }
}

/// Receives progress during a run. All hooks default to no-ops.
pub trait RunSink {
    fn epg(&mut self, _records: &[SampleRecord], _outcomes: &[EpgOutcome]) -> Result<()> {
        Ok(())
    }

    /// Called after updates at every epoch where COU or FIU fired.
    fn firing(&mut self, _epoch: usize, _records: &[SampleRecord]) -> Result<()> {
        Ok(())
    }

    fn epoch(&mut self, _row: &EpochRow) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl RunSink for NullSink {}

/// Copies a `side x side` window at `(r0, c0)`.
fn crop<T: Clone>(g: &Grid<T>, r0: usize, c0: usize, h: usize, w: usize) -> Grid<T> {
    Grid::from_fn(h, w, |r, c| g.get(r0 + r, c0 + c).clone())
}

fn training_target(rec: &SampleRecord, hp: &Hyperparams) -> BinaryMask {
    rec.pseudo_label.at_least(hp.binarize_threshold)
}

struct Audit {
    prev_pools: Vec<Pool>,
}

impl Audit {
    fn check(
        &mut self,
        epoch: usize,
        mode: Mode,
        schedule: &PhaseSchedule,
        records: &[SampleRecord],
    ) -> Result<()> {
        let fail = |message: String| Err(PalError::Audit { epoch, message });
        for (rec, prev) in records.iter().zip(&self.prev_pools) {
            if *prev == Pool::Training && rec.pool == Pool::Preparation {
                return fail(format!("sample {} left the training pool", rec.id));
            }
            if let Some(v) = validate(rec).first() {
                return fail(format!("sample {}: {v}", rec.id));
            }
        }
        let train = records.iter().filter(|r| r.pool == Pool::Training).count();
        let prep = records.iter().filter(|r| r.pool == Pool::Preparation).count();
        if train + prep != records.len() {
            return fail(format!("{train} + {prep} != {}", records.len()));
        }
        if mode == Mode::Pal && epoch + 1 >= schedule.refine_start && prep != 0 {
            return fail(format!("{prep} samples unadmitted at the end of enhancement"));
        }
        self.prev_pools = records.iter().map(|r| r.pool).collect();
        Ok(())
    }
}

/// Runs one experiment and returns its report. `dataset.records` must be
/// fresh preparation-pool records; they are cloned, not modified.
pub fn run_experiment(
    dataset: &Dataset,
    hp: &Hyperparams,
    mode: Mode,
    predictor: &mut dyn Predictor,
    sink: &mut dyn RunSink,
    exec: Exec,
) -> Result<RunReport> {
    hp.validate()?;
    if dataset.records.is_empty() {
        return Err(PalError::param("dataset has no training samples"));
    }
    let schedule = PhaseSchedule::new(hp)?;
    let tm_start = schedule.tm_at(schedule.prestart_end, hp.tm_init)?;
    let tm_end = schedule.tm_at(schedule.refine_start, hp.tm_init)?;
    if tm_start != hp.tm_init || tm_end != 1.0 {
        return Err(PalError::Audit {
            epoch: 0,
            message: format!("T_m endpoints {tm_start} and {tm_end}"),
        });
    }
    let loss = LossKind::from_choice(hp.loss, hp.alpha_edge);
    let mut records = dataset.records.clone();
    let labels = records[0].annotation.kind;
    let mut admissions = Vec::new();
    let mut easy_after_epg = 0;

    match mode {
        Mode::Pal | Mode::EpgOnly => {
            let outcomes = classify_all(&records, hp, exec)?;
            sink.epg(&records, &outcomes)?;
            for (rec, out) in records.iter_mut().zip(outcomes) {
                if out.difficulty == Difficulty::Easy {
                    admissions.push(Admission {
                        id: rec.id,
                        epoch: 0,
                        miss_rate: 1.0 - out.recall,
                        forced: false,
                    });
                    rec.admit(0, out.pseudo_label);
                    easy_after_epg += 1;
                }
            }
            if easy_after_epg == 0 {
                return Err(PalError::EmptyTrainingPool { hard: records.len() });
            }
        }
        Mode::FullSupervision => {
            for rec in &mut records {
                let gt = dataset
                    .truth
                    .mask(rec.id)
                    .ok_or_else(|| PalError::InvalidData(format!("no ground truth for {}", rec.id)))?;
                let label = SoftLabel::from_mask(gt).with_points(&rec.annotation.points);
                rec.admit(0, label);
            }
        }
        Mode::PointsOnly => {
            for rec in &mut records {
                let (h, w) = rec.image.dims();
                let label = SoftLabel::zeros(h, w).with_points(&rec.annotation.points);
                rec.admit(0, label);
            }
        }
    }

    let mut audit = Audit {
        prev_pools: records.iter().map(|r| r.pool).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, 0xBA7C));
    let updates = mode == Mode::Pal;
    let last_cou = schedule.last_cou_epoch();
    let mut rows = Vec::with_capacity(hp.total_epochs);
    let mut final_metrics = None;

    for epoch in 0..hp.total_epochs {
        let phase = schedule.phase(epoch);
        predictor.set_learning_rate(hp.learning_rate_at(epoch));
        let train_loss = train_epoch(&records, hp, &loss, predictor, &mut rng)?;

        let cou = updates && schedule.fires_cou(epoch);
        let fiu = updates && schedule.fires_fiu(epoch);
        let mut admitted = 0;
        if cou {
            let t_m = schedule.tm_at(epoch, hp.tm_init)?;
            admitted = cou_round(&mut records, epoch, t_m, hp, last_cou == Some(epoch), predictor, exec, &mut admissions)
                .map_err(|e| at_epoch(e, epoch))?;
        }
        if fiu {
            fiu_round(&mut records, hp, predictor, exec)?;
        }
        if cou || fiu {
            sink.firing(epoch, &records)?;
        }
        audit.check(epoch, mode, &schedule, &records)?;

        let metrics = evaluate_split(&dataset.test_images, &dataset.test_truth, hp, predictor)?;
        let row = EpochRow {
            epoch,
            phase,
            pool_train: records.iter().filter(|r| r.pool == Pool::Training).count(),
            pool_prep: records.iter().filter(|r| r.pool == Pool::Preparation).count(),
            train_loss,
            iou: metrics.iou,
            niou: metrics.niou,
            pd: metrics.pd,
            fa: metrics.fa,
            valid: metrics.valid,
            label_iou_gt: label_quality(&records, &dataset.truth, hp),
            cou_fired: cou,
            fiu_fired: fiu,
            admitted,
        };
        sink.epoch(&row)?;
        rows.push(row);
        final_metrics = Some(metrics);
    }

    Ok(RunReport {
        mode,
        labels,
        seed: hp.seed,
        schedule,
        n_train: records.len(),
        n_test: dataset.test_images.len(),
        parameter_count: predictor.parameter_count(),
        easy_after_epg,
        epochs: rows,
        admissions,
        final_metrics: final_metrics.expect("at least one epoch"),
    })
}

fn at_epoch(e: PalError, epoch: usize) -> PalError {
    match e {
        PalError::Audit { message, .. } => PalError::Audit { epoch, message },
        other => other,
    }
}

/// One pass over the shuffled training pool; returns the mean batch loss.
fn train_epoch(
    records: &[SampleRecord],
    hp: &Hyperparams,
    loss: &LossKind,
    predictor: &mut dyn Predictor,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].pool == Pool::Training)
        .collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(hp.batch_size) {
        let mut images = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let rec = &records[i];
            debug_assert_eq!(rec.pool, Pool::Training);
            let target = training_target(rec, hp);
            let (h, w) = rec.image.dims();
            let (ch, cw) = (hp.crop_size.min(h), hp.crop_size.min(w));
            let r0 = rng.gen_range(0..=h - ch);
            let c0 = rng.gen_range(0..=w - cw);
            images.push(GrayImage::new(crop(rec.image.grid(), r0, c0, ch, cw))?);
            targets.push(crop(&target, r0, c0, ch, cw));
        }
        total += predictor.train_step(&images, &targets, loss)?;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

#[allow(clippy::too_many_arguments)]
fn cou_round(
    records: &mut [SampleRecord],
    epoch: usize,
    t_m: f64,
    hp: &Hyperparams,
    last: bool,
    predictor: &dyn Predictor,
    exec: Exec,
    admissions: &mut Vec<Admission>,
) -> Result<usize> {
    let prep: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].pool == Pool::Preparation)
        .collect();
    if prep.is_empty() {
        return Ok(0);
    }
    let images: Vec<GrayImage> = prep.iter().map(|&i| records[i].image.clone()).collect();
    let preds = predictor.predict(&images);
    let decisions = exec
        .map_range(prep.len(), |j| cou_evaluate(&records[prep[j]], &preds[j], t_m, hp.tf, hp))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // an admitted sample may not have a strictly larger miss rate than an
    // eligible rejected one
    let worst_admitted = decisions
        .iter()
        .filter(|d| d.admitted)
        .map(|d| d.miss_rate)
        .fold(f64::NEG_INFINITY, f64::max);
    if let Some(d) = decisions
        .iter()
        .find(|d| !d.admitted && d.false_rate <= hp.tf && d.miss_rate < worst_admitted)
    {
        return Err(PalError::Audit {
            epoch,
            message: format!("sample {} rejected with a lower miss rate than an admitted one", d.id),
        });
    }

    let mut count = 0;
    for (&i, d) in prep.iter().zip(decisions) {
        let rec = &mut records[i];
        let label = match d.refined_label {
            Some(label) => Some((label, false)),
            None if last => {
                let (h, w) = rec.image.dims();
                Some((SoftLabel::zeros(h, w).with_points(&rec.annotation.points), true))
            }
            None => None,
        };
        if let Some((label, forced)) = label {
            rec.admit(epoch, label);
            admissions.push(Admission {
                id: rec.id,
                epoch,
                miss_rate: d.miss_rate,
                forced,
            });
            count += 1;
        }
    }
    Ok(count)
}

fn fiu_round(
    records: &mut [SampleRecord],
    hp: &Hyperparams,
    predictor: &dyn Predictor,
    exec: Exec,
) -> Result<()> {
    let train: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].pool == Pool::Training)
        .collect();
    let images: Vec<GrayImage> = train.iter().map(|&i| records[i].image.clone()).collect();
    let preds = predictor.predict(&images);
    let updated = exec
        .map_range(train.len(), |j| {
            let rec = &records[train[j]];
            fiu_update(&rec.pseudo_label, &preds[j], &rec.annotation.points, hp)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for (&i, label) in train.iter().zip(updated) {
        records[i].pseudo_label = label;
    }
    Ok(())
}

/// Metrics of thresholded predictions on a labelled split.
pub fn evaluate_split(
    images: &[GrayImage],
    truth: &[BinaryMask],
    hp: &Hyperparams,
    predictor: &dyn Predictor,
) -> Result<MetricSet> {
    let masks: Vec<BinaryMask> = predictor
        .predict(images)
        .iter()
        .map(|p| p.above(hp.pred_threshold))
        .collect();
    evaluate(&masks, truth, hp.pd_deviation)
}

fn label_quality(records: &[SampleRecord], truth: &GroundTruthStore, hp: &Hyperparams) -> Option<f64> {
    let ious: Vec<f64> = records
        .iter()
        .filter(|r| r.pool == Pool::Training)
        .filter_map(|r| truth.mask(r.id).map(|gt| mask_iou(&training_target(r, hp), gt)))
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}
