//! Classical image-processing primitives: Gaussian blur, Canny edges,
//! binary closing, hole filling, connected components, edge extraction and
//! patch cropping.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::types::{BinaryMask, Grid};

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_KSIZE: usize = 5;
pub const DEFAULT_CANNY_LOW: f64 = 0.1;
pub const DEFAULT_CANNY_HIGH: f64 = 0.3;
pub const DEFAULT_CLOSE_RADIUS: usize = 1;

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Mirror index into `0..n` without repeating the edge sample
/// (`dcb|abcd|cba`). Works for arbitrarily distant offsets.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    if ksize % 2 == 0 {
        return Err(PalError::param(format!("kernel size {ksize} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(PalError::param(format!("sigma {sigma} must be positive")));
    }
    let half = (ksize / 2) as f64;
    let mut k: Vec<f64> = (0..ksize)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Grid<f32>, sigma: f64, ksize: usize) -> Result<Grid<f32>> {
    let kernel = gaussian_kernel(sigma, ksize)?;
    let (h, w) = img.dims();
    let half = (ksize / 2) as isize;
    let src = img.data();

    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect_index(c as isize + t as isize - half, w)] as f64;
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = Grid::new(h, w);
    let dst = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect_index(r as isize + t as isize - half, h) * w + c];
            }
            dst[r * w + c] = acc as f32;
        }
    }
    Ok(out)
}

/// Sobel responses `(d/dcol, d/drow)` with reflected borders, scaled by 1/8
/// so a unit-slope ramp yields a derivative of 1.
pub fn sobel(img: &Grid<f32>) -> (Grid<f64>, Grid<f64>) {
    let (h, w) = img.dims();
    let at = |r: isize, c: isize| *img.get(reflect_index(r, h), reflect_index(c, w)) as f64;
    let mut gx = Grid::new(h, w);
    let mut gy = Grid::new(h, w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let x = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let y = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            gx.set(r as usize, c as usize, x / 8.0);
            gy.set(r as usize, c as usize, y / 8.0);
        }
    }
    (gx, gy)
}

/// Canny edge detector.
///
/// `low` and `high` are fractions of the largest gradient magnitude in
/// `img`, so the detector responds to target contrast rather than to
/// absolute intensity. Non-maximum suppression quantises the gradient into
/// four directions and keeps a pixel when it is strictly larger than its
/// predecessor and not smaller than its successor, which thins a plateau of
/// two equal responses to a single pixel. Hysteresis grows 8-connected
/// from strong pixels through weak ones.
pub fn canny(img: &Grid<f32>, low: f64, high: f64) -> Result<BinaryMask> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(PalError::param(format!(
            "canny thresholds need 0 <= low < high <= 1, got {low}, {high}"
        )));
    }
    let (h, w) = img.dims();
    let (gx, gy) = sobel(img);
    let mag = Grid::from_vec(
        h,
        w,
        gx.data()
            .iter()
            .zip(gy.data())
            .map(|(x, y)| x.hypot(*y))
            .collect(),
    )?;
    let peak = mag.data().iter().copied().fold(0.0f64, f64::max);
    let mut edges = BinaryMask::new(h, w);
    if peak <= 1e-12 {
        return Ok(edges);
    }

    let mag_at = |r: isize, c: isize| {
        if mag.contains(r, c) {
            *mag.get(r as usize, c as usize)
        } else {
            0.0
        }
    };
    let mut thin = Grid::<f64>::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let m = *mag.get(r, c);
            if m <= 0.0 {
                continue;
            }
            let mut angle = gy.get(r, c).atan2(*gx.get(r, c)).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dr, dc): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (ri, ci) = (r as isize, c as isize);
            let before = mag_at(ri - dr, ci - dc);
            let after = mag_at(ri + dr, ci + dc);
            if m > before && m >= after {
                thin.set(r, c, m / peak);
            }
        }
    }

    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if *thin.get(r, c) >= high {
                edges.set(r, c, true);
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in NEIGHBORS_8 {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if !thin.contains(nr, nc) {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            let v = *thin.get(nr, nc);
            if !*edges.get(nr, nc) && v > 0.0 && v >= low {
                edges.set(nr, nc, true);
                queue.push_back((nr, nc));
            }
        }
    }
    Ok(edges)
}

/// Square max/min filter of half-width `radius` over a padded canvas.
fn square_filter(src: &Grid<bool>, radius: usize, dilate: bool) -> Grid<bool> {
    let (h, w) = src.dims();
    let mut horiz = Grid::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            let hit = (lo..=hi).any(|cc| *src.get(r, cc) == dilate);
            // out-of-canvas pixels count as background for both passes
            let v = if dilate {
                hit
            } else {
                !hit && c >= radius && c + radius < w
            };
            horiz.set(r, c, v);
        }
    }
    let mut out = Grid::new(h, w);
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            let hit = (lo..=hi).any(|rr| *horiz.get(rr, c) == dilate);
            let v = if dilate {
                hit
            } else {
                !hit && r >= radius && r + radius < h
            };
            out.set(r, c, v);
        }
    }
    out
}

/// Binary closing (dilation then erosion) with a `(2r+1)`-square element.
///
/// Computed on a canvas padded by `radius` so the result equals closing on
/// an unbounded background, restricted to the image.
pub fn morph_close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let pad = 2 * radius;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = BinaryMask::new(ph, pw);
    for r in 0..h {
        for c in 0..w {
            if *mask.get(r, c) {
                padded.set(r + pad, c + pad, true);
            }
        }
    }
    let closed = square_filter(&square_filter(&padded, radius, true), radius, false);
    Grid::from_fn(h, w, |r, c| *closed.get(r + pad, c + pad))
}

/// Fills background regions not 4-connected to the border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut outside = BinaryMask::new(h, w);
    let mut queue = VecDeque::new();
    let seed = |r: usize, c: usize, outside: &mut BinaryMask, q: &mut VecDeque<(usize, usize)>| {
        if !*mask.get(r, c) && !*outside.get(r, c) {
            outside.set(r, c, true);
            q.push_back((r, c));
        }
    };
    for c in 0..w {
        seed(0, c, &mut outside, &mut queue);
        seed(h - 1, c, &mut outside, &mut queue);
    }
    for r in 0..h {
        seed(r, 0, &mut outside, &mut queue);
        seed(r, w - 1, &mut outside, &mut queue);
    }
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in NEIGHBORS_4 {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if mask.contains(nr, nc) {
                seed(nr as usize, nc as usize, &mut outside, &mut queue);
            }
        }
    }
    outside.map(|&o| !o)
}

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.min_row as f64
            && row <= self.max_row as f64
            && col >= self.min_col as f64
            && col <= self.max_col as f64
    }
}

/// One 8-connected foreground region.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectedComponent {
    /// Pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
    pub area: usize,
    pub centroid: (f64, f64),
}

impl ConnectedComponent {
    fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Self {
        pixels.sort_unstable();
        let (mut sr, mut sc) = (0.0, 0.0);
        let mut bbox = BoundingBox {
            min_row: usize::MAX,
            min_col: usize::MAX,
            max_row: 0,
            max_col: 0,
        };
        for &(r, c) in &pixels {
            sr += r as f64;
            sc += c as f64;
            bbox.min_row = bbox.min_row.min(r);
            bbox.min_col = bbox.min_col.min(c);
            bbox.max_row = bbox.max_row.max(r);
            bbox.max_col = bbox.max_col.max(c);
        }
        let n = pixels.len() as f64;
        Self {
            area: pixels.len(),
            centroid: (sr / n, sc / n),
            bbox,
            pixels,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.pixels.binary_search(&(row, col)).is_ok()
    }

    /// Centroid rounded half away from zero to the nearest pixel.
    pub fn rounded_centroid(&self) -> (usize, usize) {
        (self.centroid.0.round() as usize, self.centroid.1.round() as usize)
    }
}

/// Labels 8-connected components. Labels are 1-based (0 is background) and
/// follow the component order of the returned list, which is sorted by each
/// component's first pixel in raster order.
pub fn label_components(mask: &BinaryMask) -> (Grid<u32>, Vec<ConnectedComponent>) {
    let (h, w) = mask.dims();
    let mut labels = Grid::<u32>::new(h, w);
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !*mask.get(r0, c0) || *labels.get(r0, c0) != 0 {
                continue;
            }
            let id = comps.len() as u32 + 1;
            let mut pixels = Vec::new();
            labels.set(r0, c0, id);
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                for (dr, dc) in NEIGHBORS_8 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if mask.contains(nr, nc) {
                        let (nr, nc) = (nr as usize, nc as usize);
                        if *mask.get(nr, nc) && *labels.get(nr, nc) == 0 {
                            labels.set(nr, nc, id);
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            comps.push(ConnectedComponent::from_pixels(pixels));
        }
    }
    (labels, comps)
}

pub fn connected_components(mask: &BinaryMask) -> Vec<ConnectedComponent> {
    label_components(mask).1
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the raster.
pub fn extract_edges(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    Grid::from_fn(h, w, |r, c| {
        *mask.get(r, c)
            && NEIGHBORS_4.iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                !mask.contains(nr, nc) || !*mask.get(nr as usize, nc as usize)
            })
    })
}

/// A sub-raster and the position of its top-left pixel in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub grid: Grid<T>,
    pub offset: (usize, usize),
}

impl<T> Patch<T> {
    /// Source coordinate to patch coordinate, if covered.
    pub fn to_local(&self, row: isize, col: isize) -> Option<(usize, usize)> {
        let (r, c) = (row - self.offset.0 as isize, col - self.offset.1 as isize);
        self.grid.contains(r, c).then_some((r as usize, c as usize))
    }
}

/// Crops a `side x side` window centred on `center`, clipped to the raster.
pub fn crop_patch<T: Clone>(img: &Grid<T>, center: (usize, usize), side: usize) -> Result<Patch<T>> {
    if side % 2 == 0 {
        return Err(PalError::param(format!("patch side {side} must be odd")));
    }
    let half = side / 2;
    let (h, w) = img.dims();
    let r0 = center.0.saturating_sub(half);
    let c0 = center.1.saturating_sub(half);
    let r1 = (center.0 + half + 1).min(h);
    let c1 = (center.1 + half + 1).min(w);
    let grid = Grid::from_fn(r1 - r0, c1 - c0, |r, c| img.get(r0 + r, c0 + c).clone());
    Ok(Patch {
        grid,
        offset: (r0, c0),
    })
}

/// Writes a patch back at its offset.
pub fn paste_patch<T: Clone>(dst: &mut Grid<T>, patch: &Patch<T>) {
    paste_with(dst, patch, |_, v| v.clone());
}

/// Merges a patch into `dst` with `merge(existing, incoming)`.
pub fn paste_with<T: Clone>(dst: &mut Grid<T>, patch: &Patch<T>, merge: impl Fn(&T, &T) -> T) {
    let (r0, c0) = patch.offset;
    for r in 0..patch.grid.height() {
        for c in 0..patch.grid.width() {
            let (dr, dc) = (r0 + r, c0 + c);
            if dr < dst.height() && dc < dst.width() {
                let v = merge(dst.get(dr, dc), patch.grid.get(r, c));
                dst.set(dr, dc, v);
            }
        }
    }
}
