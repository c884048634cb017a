//! Shared domain types.
//!
//! Rasters are row-major. [`GrayImage`] and [`SoftLabel`] are validated
//! wrappers around [`Grid<f32>`] and deref to it, so every imaging
//! primitive that accepts a `&Grid<f32>` accepts them as well.

use std::collections::HashSet;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};

/// Dense row-major raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel foreground flags.
pub type BinaryMask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T: Clone + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::default())
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(PalError::InvalidData(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn contains(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(PalError::Shape {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Mask as 0.0 / 1.0 values.
    pub fn to_unit<F: num_traits::Float>(&self) -> Grid<F> {
        self.map(|&b| if b { F::one() } else { F::zero() })
    }
}

impl Grid<f32> {
    /// Pixels at or above `threshold`. Used for pseudo-labels.
    pub fn at_least(&self, threshold: f32) -> BinaryMask {
        self.map(|&v| v >= threshold)
    }

    /// Pixels strictly above `threshold`. Used for network predictions.
    pub fn above(&self, threshold: f32) -> BinaryMask {
        self.map(|&v| v > threshold)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0f32, f32::max)
    }
}

fn check_unit_range(data: &[f32], what: &str) -> Result<()> {
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(PalError::InvalidData(format!(
            "{what} value {v} at index {i} outside [0,1]"
        )));
    }
    Ok(())
}

/// Single-channel intensity image with values in [0,1], at least 8x8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Grid<f32>", into = "Grid<f32>")]
pub struct GrayImage(Grid<f32>);

impl GrayImage {
    pub const MIN_SIDE: usize = 8;

    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if grid.height < Self::MIN_SIDE || grid.width < Self::MIN_SIDE {
            return Err(PalError::InvalidData(format!(
                "image {}x{} smaller than {}x{}",
                grid.height,
                grid.width,
                Self::MIN_SIDE,
                Self::MIN_SIDE
            )));
        }
        check_unit_range(&grid.data, "intensity")?;
        Ok(Self(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Grid::from_vec(height, width, data)?)
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.0
    }
}

impl Deref for GrayImage {
    type Target = Grid<f32>;
    fn deref(&self) -> &Grid<f32> {
        &self.0
    }
}

impl TryFrom<Grid<f32>> for GrayImage {
    type Error = PalError;
    fn try_from(g: Grid<f32>) -> Result<Self> {
        Self::new(g)
    }
}

impl From<GrayImage> for Grid<f32> {
    fn from(img: GrayImage) -> Self {
        img.0
    }
}

/// Per-pixel label or probability in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Grid<f32>", into = "Grid<f32>")]
pub struct SoftLabel(Grid<f32>);

impl SoftLabel {
    pub fn new(grid: Grid<f32>) -> Result<Self> {
        check_unit_range(&grid.data, "label")?;
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width))
    }

    /// Clamps into [0,1]; NaN becomes 0.
    pub fn from_grid_clamped(mut grid: Grid<f32>) -> Self {
        for v in grid.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(grid)
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self(mask.to_unit())
    }

    /// Sets every in-bounds annotation point to 1.0.
    pub fn with_points(mut self, points: &[Point]) -> Self {
        for p in points {
            if let Some((r, c)) = p.index_in(self.0.height, self.0.width) {
                self.0.set(r, c, 1.0);
            }
        }
        self
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.0
    }
}

impl Deref for SoftLabel {
    type Target = Grid<f32>;
    fn deref(&self) -> &Grid<f32> {
        &self.0
    }
}

impl TryFrom<Grid<f32>> for SoftLabel {
    type Error = PalError;
    fn try_from(g: Grid<f32>) -> Result<Self> {
        Self::new(g)
    }
}

impl From<SoftLabel> for Grid<f32> {
    fn from(l: SoftLabel) -> Self {
        l.0
    }
}

/// Pixel coordinate. Signed so that malformed annotations can be represented
/// and reported by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub row: i32,
    pub col: i32,
}

impl Point {
    pub const fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }

    pub fn at(row: usize, col: usize) -> Self {
        Self {
            row: row as i32,
            col: col as i32,
        }
    }

    /// `(row, col)` as indices when inside an `height x width` raster.
    #[inline]
    pub fn index_in(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        if self.row >= 0 && self.col >= 0 && (self.row as usize) < height && (self.col as usize) < width
        {
            Some((self.row as usize, self.col as usize))
        } else {
            None
        }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Coarse,
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub points: Vec<Point>,
    pub kind: PointKind,
}

impl PointAnnotation {
    pub fn new(points: Vec<Point>, kind: PointKind) -> Self {
        Self { points, kind }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Preparation,
    Training,
}

/// Generator-side difficulty of a synthetic scene. Bookkeeping only; the
/// training loop never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneClass {
    Easy,
    Hard,
}

pub type SampleId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: SampleId,
    pub image: GrayImage,
    pub annotation: PointAnnotation,
    pub pseudo_label: SoftLabel,
    pub pool: Pool,
    pub admitted_epoch: Option<usize>,
    pub scene_class: SceneClass,
}

impl SampleRecord {
    /// A fresh preparation-pool record with an all-zero pseudo-label.
    pub fn new(
        id: SampleId,
        image: GrayImage,
        annotation: PointAnnotation,
        scene_class: SceneClass,
    ) -> Self {
        let pseudo_label = SoftLabel::zeros(image.height(), image.width());
        Self {
            id,
            image,
            annotation,
            pseudo_label,
            pool: Pool::Preparation,
            admitted_epoch: None,
            scene_class,
        }
    }

    pub fn admit(&mut self, epoch: usize, label: SoftLabel) {
        self.pseudo_label = label;
        self.pool = Pool::Training;
        self.admitted_epoch = Some(epoch);
    }

    pub fn meta(&self) -> RecordMeta {
        RecordMeta {
            id: self.id,
            points: self.annotation.points.clone(),
            kind: self.annotation.kind,
            pool: self.pool,
            admitted_epoch: self.admitted_epoch,
        }
    }
}

/// JSON-facing metadata of a [`SampleRecord`] (rasters live in image files).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub id: SampleId,
    pub points: Vec<Point>,
    pub kind: PointKind,
    pub pool: Pool,
    pub admitted_epoch: Option<usize>,
}

/// Pseudo-label value at or above which an annotated point counts as positive.
pub const POINT_POSITIVE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    PointOutOfBounds(Point),
    DuplicatePoint(Point),
    PointNotPositive(Point),
    LabelShapeMismatch,
    AdmittedEpochMismatch,
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::PointOutOfBounds(_) => "point out of bounds",
            Violation::DuplicatePoint(_) => "duplicate point",
            Violation::PointNotPositive(_) => "point not positive",
            Violation::LabelShapeMismatch => "label shape mismatch",
            Violation::AdmittedEpochMismatch => "admitted epoch mismatch",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PointOutOfBounds(p)
            | Violation::DuplicatePoint(p)
            | Violation::PointNotPositive(p) => write!(f, "{} at {p}", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

/// Every invariant a record violates; empty means the record is well formed.
///
/// Image and label value ranges are enforced at construction and are not
/// re-checked here.
pub fn validate(record: &SampleRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let (h, w) = record.image.dims();
    let shape_ok = record.pseudo_label.dims() == (h, w);
    if !shape_ok {
        out.push(Violation::LabelShapeMismatch);
    }
    let mut seen = HashSet::new();
    for &p in &record.annotation.points {
        if !seen.insert(p) {
            out.push(Violation::DuplicatePoint(p));
        }
        match p.index_in(h, w) {
            None => out.push(Violation::PointOutOfBounds(p)),
            Some((r, c)) => {
                if record.pool == Pool::Training
                    && shape_ok
                    && *record.pseudo_label.get(r, c) < POINT_POSITIVE
                {
                    out.push(Violation::PointNotPositive(p));
                }
            }
        }
    }
    if (record.pool == Pool::Training) != record.admitted_epoch.is_some() {
        out.push(Violation::AdmittedEpochMismatch);
    }
    out
}

/// Loss used by the training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    Eedm,
    Bce,
    Dice,
    Focal,
}

/// Learning-rate schedule over the epochs of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `learning_rate` at epoch 0 towards zero at the end.
    Cosine,
}

/// All tunables of a run. Field names double as configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub total_epochs: usize,
    pub prestart_frac: f64,
    pub refine_frac: f64,
    pub update_period: usize,
    pub tm_init: f64,
    pub tf: f64,
    pub lambda_decay: f32,
    pub tb: f64,
    pub k: f64,
    pub r: f64,
    pub d: usize,
    pub alpha_edge: f64,
    pub recall_threshold: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub binarize_threshold: f32,
    pub pred_threshold: f32,
    pub pd_deviation: f64,
    pub loss: LossChoice,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            total_epochs: 60,
            prestart_frac: 0.2,
            refine_frac: 0.8,
            update_period: 5,
            tm_init: 0.2,
            tf: 10.0,
            lambda_decay: 0.97,
            tb: 0.5,
            k: 0.5,
            r: 0.02,
            d: 33,
            alpha_edge: 4.0,
            recall_threshold: 0.8,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 1e-2,
            batch_size: 16,
            crop_size: 32,
            binarize_threshold: 0.5,
            pred_threshold: 0.5,
            pd_deviation: 3.0,
            loss: LossChoice::Eedm,
            seed: 42,
        }
    }
}

impl Hyperparams {
    pub const FIELD_NAMES: &'static [&'static str] = &[
        "total_epochs",
        "prestart_frac",
        "refine_frac",
        "update_period",
        "tm_init",
        "tf",
        "lambda_decay",
        "tb",
        "k",
        "r",
        "d",
        "alpha_edge",
        "recall_threshold",
        "learning_rate",
        "lr_schedule",
        "weight_decay",
        "batch_size",
        "crop_size",
        "binarize_threshold",
        "pred_threshold",
        "pd_deviation",
        "loss",
        "seed",
    ];

    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.total_epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PalError::param(m));
        if !(0.0 < self.prestart_frac && self.prestart_frac < self.refine_frac && self.refine_frac < 1.0)
        {
            return fail("need 0 < prestart_frac < refine_frac < 1");
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return fail("lambda_decay must lie in (0,1]");
        }
        if !(self.tb > 0.0 && self.tb < 1.0) || !(self.k > 0.0 && self.k < 1.0) {
            return fail("tb and k must lie in (0,1)");
        }
        if !(self.r > 0.0) {
            return fail("r must be positive");
        }
        if self.d < 3 || self.d % 2 == 0 {
            return fail("d must be odd and at least 3");
        }
        if self.update_period == 0 || self.batch_size == 0 {
            return fail("update_period and batch_size must be positive");
        }
        if self.crop_size < GrayImage::MIN_SIDE || self.crop_size % 4 != 0 {
            return fail("crop_size must be a multiple of 4 and at least 8");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning_rate and weight_decay must be nonnegative");
        }
        if !(self.tm_init >= 0.0 && self.tm_init <= 1.0) || !(self.tf >= 0.0) {
            return fail("tm_init must lie in [0,1] and tf must be nonnegative");
        }
        if !(self.pd_deviation >= 0.0) || !(self.alpha_edge > 0.0) {
            return fail("pd_deviation must be nonnegative and alpha_edge positive");
        }
        for t in [self.binarize_threshold, self.pred_threshold] {
            if !(t > 0.0 && t < 1.0) {
                return fail("binarization thresholds must lie in (0,1)");
            }
        }
        Ok(())
    }
}
