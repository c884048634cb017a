//! Synthetic infrared-like scenes: small anisotropic Gaussian targets over
//! flat, gradient or cluttered backgrounds, with dense ground truth and
//! one coarse and one centroid point per target.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::imaging::connected_components;
use crate::io::quantize_u8;
use crate::par::Exec;
use crate::types::{
    BinaryMask, GrayImage, Grid, Point, PointAnnotation, PointKind, SampleId, SampleRecord,
    SceneClass,
};

/// ln 2; a Gaussian falls to half its peak where `q = 2 ln 2`.
const HALF_PEAK_Q: f64 = 2.0 * std::f64::consts::LN_2;
const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Flat { level: (f64, f64) },
    Gradient { level: (f64, f64), span: f64 },
    /// Smooth value-noise field plus per-pixel noise.
    Clutter { level: (f64, f64), amplitude: f64, cell: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub targets: (usize, usize),
    /// Half-peak radius of the major axis, pixels.
    pub radius: (f64, f64),
    /// Minor/major axis ratio range.
    pub aspect: (f64, f64),
    pub contrast: (f64, f64),
    pub background: Background,
    pub noise_std: f64,
    pub class: SceneClass,
}

impl SceneSpec {
    /// High contrast on a flat background.
    pub fn easy(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            targets: (1, 3),
            radius: (1.0, 4.0),
            aspect: (0.6, 1.0),
            contrast: (0.55, 0.9),
            background: Background::Flat { level: (0.05, 0.25) },
            noise_std: 0.01,
            class: SceneClass::Easy,
        }
    }

    /// Low contrast on a cluttered background.
    pub fn hard(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            targets: (1, 3),
            radius: (1.0, 4.0),
            aspect: (0.6, 1.0),
            contrast: (0.25, 0.45),
            background: Background::Clutter {
                level: (0.15, 0.35),
                amplitude: 0.2,
                cell: 8,
            },
            noise_std: 0.05,
            class: SceneClass::Hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PalError::param(m));
        if self.height < GrayImage::MIN_SIDE || self.width < GrayImage::MIN_SIDE {
            return fail(format!("scene {}x{} too small", self.height, self.width));
        }
        let max_r = self.height.min(self.width) as f64 / 8.0;
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1 && self.radius.1 <= max_r) {
            return fail(format!("radius range {:?} outside [1, {max_r}]", self.radius));
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1 && self.contrast.1 <= 1.0)
        {
            return fail(format!("contrast range {:?} outside (0,1]", self.contrast));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1 && self.aspect.1 <= 1.0) {
            return fail(format!("aspect range {:?} outside (0,1]", self.aspect));
        }
        if self.targets.0 == 0 || self.targets.0 > self.targets.1 {
            return fail(format!("target count range {:?} invalid", self.targets));
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be nonnegative".into());
        }
        if let Background::Clutter { cell, .. } = self.background {
            if cell == 0 {
                return fail("clutter cell must be positive".into());
            }
        }
        Ok(())
    }
}

/// One generated target.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub center: (usize, usize),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub contrast: f64,
}

impl Target {
    /// Quadratic form `q` with value `exp(-q/2)` relative to the peak.
    fn q(&self, r: usize, c: usize) -> f64 {
        let dy = r as f64 - self.center.0 as f64;
        let dx = c as f64 - self.center.1 as f64;
        let (s, co) = self.angle.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        // semi-axes are half-peak radii, so sigma = a / sqrt(2 ln 2)
        HALF_PEAK_Q * ((u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GrayImage,
    pub truth: BinaryMask,
    pub coarse: PointAnnotation,
    pub centroid: PointAnnotation,
    pub targets: Vec<Target>,
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Smooth value noise in roughly [-1, 1]: random lattice values at `cell`
/// spacing, smoothstep-interpolated, two octaves.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut impl Rng) -> Grid<f64> {
    let mut field = Grid::<f64>::new(h, w);
    for (octave, weight) in [(cell, 0.7), ((cell / 2).max(1), 0.3)] {
        let gh = h / octave + 2;
        let gw = w / octave + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for r in 0..h {
            let fy = r as f64 / octave as f64;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for c in 0..w {
                let fx = c as f64 / octave as f64;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let l = |y: usize, x: usize| lattice[y * gw + x];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                let v = field.get(r, c) + weight * (top * (1.0 - ty) + bot * ty);
                field.set(r, c, v);
            }
        }
    }
    field
}

fn background(spec: &SceneSpec, rng: &mut impl Rng) -> Grid<f64> {
    let (h, w) = (spec.height, spec.width);
    match spec.background {
        Background::Flat { level } => Grid::filled(h, w, uniform(rng, level)),
        Background::Gradient { level, span } => {
            let base = uniform(rng, level);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let diag = ((h * h + w * w) as f64).sqrt();
            Grid::from_fn(h, w, |r, col| {
                let t = ((col as f64 - w as f64 / 2.0) * c + (r as f64 - h as f64 / 2.0) * s) / diag;
                base + span * t
            })
        }
        Background::Clutter {
            level,
            amplitude,
            cell,
        } => {
            let base = uniform(rng, level);
            value_noise(h, w, cell, rng).map(|v| base + amplitude * v)
        }
    }
}

fn place_targets(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<Target>> {
    let n = rng.gen_range(spec.targets.0..=spec.targets.1);
    let mut targets: Vec<Target> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let major = uniform(rng, spec.radius);
            let minor = (major * uniform(rng, spec.aspect)).max(0.5);
            let margin = major.ceil() as usize + 2;
            if 2 * margin >= spec.height || 2 * margin >= spec.width {
                break;
            }
            let center = (
                rng.gen_range(margin..spec.height - margin),
                rng.gen_range(margin..spec.width - margin),
            );
            let clear = targets.iter().all(|t| {
                let dr = t.center.0 as f64 - center.0 as f64;
                let dc = t.center.1 as f64 - center.1 as f64;
                (dr * dr + dc * dc).sqrt() > t.semi_axes.0 + major + 4.0
            });
            if clear {
                targets.push(Target {
                    center,
                    semi_axes: (major, minor),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    contrast: uniform(rng, spec.contrast),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PalError::Generation(format!(
                "could not place target {} of {n} after {MAX_PLACEMENT_TRIES} tries",
                targets.len() + 1
            )));
        }
    }
    Ok(targets)
}

/// In-mask pixel nearest to the mask centroid; raster order breaks ties.
pub fn nearest_in_mask(pixels: &[(usize, usize)], centroid: (f64, f64)) -> (usize, usize) {
    let d2 = |&(r, c): &(usize, usize)| (r as f64 - centroid.0).powi(2) + (c as f64 - centroid.1).powi(2);
    let mut best = pixels[0];
    let mut best_d = d2(&best);
    for p in &pixels[1..] {
        let d = d2(p);
        if d < best_d {
            best = *p;
            best_d = d;
        }
    }
    best
}

/// Generates one scene. Intensities are quantised to 8-bit levels so the
/// in-memory scene equals what an 8-bit image file stores.
pub fn generate_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let targets = place_targets(spec, rng)?;
    let mut intensity = background(spec, rng);
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("finite std");
    let mut truth = BinaryMask::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut v = *intensity.get(r, c);
            for t in &targets {
                let q = t.q(r, c);
                v += t.contrast * (-0.5 * q).exp();
                // tolerance keeps lattice points exactly on the contour
                if q <= HALF_PEAK_Q * (1.0 + 1e-9) {
                    truth.set(r, c, true);
                }
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(rng);
            }
            intensity.set(r, c, v);
        }
    }
    let image = GrayImage::new(intensity.map(|&v| quantize_u8(v as f32) as f32 / 255.0))?;

    let mut comps = connected_components(&truth);
    // one component per target by construction of the spacing rule
    if comps.len() != targets.len() {
        return Err(PalError::Generation(format!(
            "{} targets produced {} mask components",
            targets.len(),
            comps.len()
        )));
    }
    comps.sort_by_key(|c| c.pixels[0]);
    let mut coarse = Vec::with_capacity(comps.len());
    let mut centroid = Vec::with_capacity(comps.len());
    for comp in &comps {
        let (r, c) = comp.pixels[rng.gen_range(0..comp.pixels.len())];
        coarse.push(Point::at(r, c));
        let (r, c) = nearest_in_mask(&comp.pixels, comp.centroid);
        centroid.push(Point::at(r, c));
    }
    Ok(Scene {
        image,
        truth,
        coarse: PointAnnotation::new(coarse, PointKind::Coarse),
        centroid: PointAnnotation::new(centroid, PointKind::Centroid),
        targets,
    })
}

/// Derives an independent per-sample seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ground-truth masks, kept apart from training inputs.
///
/// Reads go through [`GroundTruthStore::mask`], which counts accesses so
/// tests can audit that the training path never touches the store.
#[derive(Debug, Default)]
pub struct GroundTruthStore {
    masks: BTreeMap<SampleId, BinaryMask>,
    reads: AtomicUsize,
}

impl Clone for GroundTruthStore {
    fn clone(&self) -> Self {
        Self {
            masks: self.masks.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

impl GroundTruthStore {
    pub fn insert(&mut self, id: SampleId, mask: BinaryMask) {
        self.masks.insert(id, mask);
    }

    pub fn mask(&self, id: SampleId) -> Option<&BinaryMask> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.masks.get(&id)
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.masks.keys().copied()
    }
}

/// Both point annotations of a generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub coarse: PointAnnotation,
    pub centroid: PointAnnotation,
}

/// Output of [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub records: Vec<SampleRecord>,
    pub annotations: Vec<Annotations>,
    pub truth: GroundTruthStore,
}

/// Generates `n` samples, `round(n * easy_frac)` from `specs.0` and the rest
/// from `specs.1`, shuffled deterministically. Records carry the annotation
/// of `kind`, start in the preparation pool and have all-zero pseudo-labels.
pub fn generate_dataset(
    n: usize,
    easy_frac: f64,
    specs: (&SceneSpec, &SceneSpec),
    kind: PointKind,
    seed: u64,
    first_id: SampleId,
    exec: Exec,
) -> Result<GeneratedSet> {
    if n == 0 {
        return Err(PalError::param("dataset needs at least one sample"));
    }
    if !(0.0..=1.0).contains(&easy_frac) {
        return Err(PalError::param(format!("easy_frac {easy_frac} outside [0,1]")));
    }
    specs.0.validate()?;
    specs.1.validate()?;
    let n_easy = (n as f64 * easy_frac).round() as usize;
    let mut classes: Vec<bool> = (0..n).map(|i| i < n_easy).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let scenes = exec.map_range(n, |i| {
        let spec = if classes[i] { specs.0 } else { specs.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        generate_scene(spec, &mut rng)
    });

    let mut records = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let mut truth = GroundTruthStore::default();
    for (i, scene) in scenes.into_iter().enumerate() {
        let scene = scene?;
        let id = first_id + i as SampleId;
        let class = if classes[i] { specs.0.class } else { specs.1.class };
        let ann = match kind {
            PointKind::Coarse => scene.coarse.clone(),
            PointKind::Centroid => scene.centroid.clone(),
        };
        records.push(SampleRecord::new(id, scene.image, ann, class));
        annotations.push(Annotations {
            coarse: scene.coarse,
            centroid: scene.centroid,
        });
        truth.insert(id, scene.truth);
    }
    Ok(GeneratedSet {
        records,
        annotations,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_target(radius: f64, contrast: f64) -> SceneSpec {
        SceneSpec {
            targets: (1, 1),
            radius: (radius, radius),
            aspect: (1.0, 1.0),
            contrast: (contrast, contrast),
            background: Background::Flat { level: (0.1, 0.1) },
            noise_std: 0.0,
            ..SceneSpec::easy(64, 64)
        }
    }

    #[test]
    fn single_target_area_bounds() {
        // isotropic half-peak disc of radius 3: lattice points with
        // x^2 + y^2 <= 9 number 29, inside the [9, 49] envelope
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_scene(&one_target(3.0, 0.9), &mut rng).unwrap();
            let area = s.truth.count();
            assert_eq!(area, 29);
            for p in s.coarse.points.iter().chain(&s.centroid.points) {
                assert!(*s.truth.get(p.row as usize, p.col as usize));
            }
        }
    }

    #[test]
    fn centroid_of_symmetric_blob_is_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_scene(&one_target(2.5, 0.8), &mut rng).unwrap();
        let c = s.targets[0].center;
        assert_eq!(s.centroid.points, vec![Point::at(c.0, c.1)]);
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::hard(64, 64);
        let a = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let bits = |s: &Scene| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = SceneSpec {
            targets: (40, 40),
            radius: (1.0, 2.0),
            ..SceneSpec::easy(16, 16)
        };
        let err = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, PalError::Generation(_)));
    }

    #[test]
    fn spec_validation() {
        let mut s = SceneSpec::easy(64, 64);
        s.radius = (1.0, 9.0);
        assert!(s.validate().is_err());
        let mut s = SceneSpec::easy(64, 64);
        s.contrast = (0.0, 0.5);
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_counts_ids_and_isolation() {
        let (e, h) = (SceneSpec::easy(64, 64), SceneSpec::hard(64, 64));
        let set = generate_dataset(200, 0.5, (&e, &h), PointKind::Coarse, 42, 0, Exec::default()).unwrap();
        assert_eq!(set.records.len(), 200);
        let easy = set.records.iter().filter(|r| r.scene_class == SceneClass::Easy).count();
        assert_eq!(easy, 100);
        let mut ids: Vec<_> = set.records.iter().map(|r| r.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 200);
        for r in &set.records {
            assert_eq!(r.pool, crate::types::Pool::Preparation);
            assert_eq!(r.pseudo_label.sum(), 0.0);
            assert!(crate::types::validate(r).is_empty());
        }
        assert_eq!(set.truth.read_count(), 0);
        assert!(set.truth.mask(5).is_some());
        assert_eq!(set.truth.read_count(), 1);
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let (e, h) = (SceneSpec::easy(32, 32), SceneSpec::hard(32, 32));
        let a = generate_dataset(12, 0.5, (&e, &h), PointKind::Centroid, 7, 0, Exec::Sequential).unwrap();
        let b = generate_dataset(12, 0.5, (&e, &h), PointKind::Centroid, 7, 0, Exec::Parallel).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn every_component_has_one_point_of_each_kind() {
        let (e, h) = (SceneSpec::easy(64, 64), SceneSpec::hard(64, 64));
        let set = generate_dataset(40, 0.5, (&e, &h), PointKind::Coarse, 9, 0, Exec::default()).unwrap();
        for (rec, ann) in set.records.iter().zip(&set.annotations) {
            let mask = set.truth.mask(rec.id).unwrap();
            let comps = connected_components(mask);
            for comp in &comps {
                for a in [&ann.coarse, &ann.centroid] {
                    let inside = a
                        .points
                        .iter()
                        .filter(|p| comp.contains(p.row as usize, p.col as usize))
                        .count();
                    assert_eq!(inside, 1);
                }
                // centroid point is the in-mask pixel nearest the centroid
                let p = ann
                    .centroid
                    .points
                    .iter()
                    .find(|p| comp.contains(p.row as usize, p.col as usize))
                    .unwrap();
                let d = |r: f64, c: f64| (r - comp.centroid.0).powi(2) + (c - comp.centroid.1).powi(2);
                let best = comp
                    .pixels
                    .iter()
                    .map(|&(r, c)| d(r as f64, c as f64))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d(p.row as f64, p.col as f64), best);
            }
        }
    }
}
