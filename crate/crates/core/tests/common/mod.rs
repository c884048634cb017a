//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use pal_core::dual_update::fiu_update;
use pal_core::loss::{eedm_loss, eedm_mining};
use pal_core::metrics::match_image;
use pal_core::{BinaryMask, Grid, Hyperparams, Point, SoftLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- fine inner update: naive per-pixel reference

const N: usize = 16;


fn neighbours(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1isize..=1)
        .flat_map(|dr| (-1isize..=1).map(move |dc| (dr, dc)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w).then_some((rr as usize, cc as usize))
        })
}

/// Flood fill over `inside` from `seed`; returns the visited pixels.
fn flood(seed: (usize, usize), h: usize, w: usize, inside: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let mut seen = vec![false; h * w];
    let mut stack = vec![seed];
    let mut out = Vec::new();
    seen[seed.0 * w + seed.1] = true;
    while let Some((r, c)) = stack.pop() {
        out.push((r, c));
        for (rr, cc) in neighbours(r, c, h, w) {
            if !seen[rr * w + cc] && inside(rr, cc) {
                seen[rr * w + cc] = true;
                stack.push((rr, cc));
            }
        }
    }
    out
}

pub fn fiu_reference(l: &Grid<f32>, p: &Grid<f32>, points: &[Point], hp: &Hyperparams) -> Grid<f32> {
    let (h, w) = l.dims();
    let thr = hp.binarize_threshold;
    let positive = |r: usize, c: usize| *l.get(r, c) >= thr;

    let mut centroids = Vec::new();
    let mut claimed = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if positive(r, c) && !claimed[r * w + c] {
                let comp = flood((r, c), h, w, positive);
                let n = comp.len() as f64;
                let sr: f64 = comp.iter().map(|q| q.0 as f64).sum();
                let sc: f64 = comp.iter().map(|q| q.1 as f64).sum();
                for q in &comp {
                    claimed[q.0 * w + q.1] = true;
                }
                centroids.push(((sr / n).round() as usize, (sc / n).round() as usize));
            }
        }
    }

    let half = hp.d / 2;
    let mut in_n = vec![false; h * w];
    for &(cr, cc) in &centroids {
        let (r0, r1) = (cr.saturating_sub(half), (cr + half + 1).min(h));
        let (c0, c1) = (cc.saturating_sub(half), (cc + half + 1).min(w));
        let mut max_p = 0.0f64;
        let mut count = 0usize;
        for r in r0..r1 {
            for c in c0..c1 {
                max_p = max_p.max(*p.get(r, c) as f64);
                count += positive(r, c) as usize;
            }
        }
        let area = ((r1 - r0) * (c1 - c0)) as f64 * hp.r;
        let t = max_p * (hp.tb + hp.k * (1.0 - hp.tb) * count as f64 / area);
        let cand = |r: usize, c: usize| {
            (r0..r1).contains(&r) && (c0..c1).contains(&c) && (*p.get(r, c) as f64) > t
        };
        for &(qr, qc) in &centroids {
            if cand(qr, qc) {
                for (r, c) in flood((qr, qc), h, w, cand) {
                    in_n[r * w + c] = true;
                }
            }
        }
    }

    let mut out = Grid::from_fn(h, w, |r, c| {
        let (lv, pv) = (*l.get(r, c), *p.get(r, c));
        let v = if in_n[r * w + c] { (lv + pv) * 0.5 } else { hp.lambda_decay * lv };
        v.clamp(0.0, 1.0)
    });
    for q in points {
        out.set(q.row as usize, q.col as usize, 1.0);
    }
    out
}

fn blob_field(rng: &mut ChaCha8Rng, blobs: usize, base: f32) -> Grid<f32> {
    let centres: Vec<(f64, f64, f64, f32)> = (0..blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..N as f64),
                rng.gen_range(0.0..N as f64),
                rng.gen_range(1.0..3.5),
                rng.gen_range(0.5..1.0f32),
            )
        })
        .collect();
    let noise: Vec<f32> = (0..N * N).map(|_| rng.gen_range(0.0..base)).collect();
    Grid::from_fn(N, N, |r, c| {
        let mut v = noise[r * N + c];
        for &(y, x, s, a) in &centres {
            let d2 = (r as f64 - y).powi(2) + (c as f64 - x).powi(2);
            v = v.max(a * (-d2 / (2.0 * s * s)).exp() as f32);
        }
        v.min(1.0)
    })
}


pub fn fiu_oracle_campaign(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nonempty = 0;
    for case in 0..cases {
        let hp = Hyperparams {
            d: [33, 7, 9][case % 3],
            lambda_decay: [0.97, 1.0, rng.gen_range(0.5..1.0)][case % 3],
            r: [0.05, 0.15, 0.5][(case / 3) % 3],
            ..Hyperparams::default()
        };
        let label_blobs = rng.gen_range(1..=2);
        let l = blob_field(&mut rng, label_blobs, 0.3);
        let p = if rng.gen_bool(0.3) {
            // prediction near the label
            Grid::from_fn(N, N, |r, c| (l.get(r, c) * rng.gen_range(0.6..1.2f32)).min(1.0))
        } else {
            let blobs = rng.gen_range(0..=3);
            blob_field(&mut rng, blobs, 0.4)
        };
        let points: Vec<Point> = {
            let n = rng.gen_range(1..=2);
            let mut v: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.gen_range(0..N as i32), rng.gen_range(0..N as i32)))
                .collect();
            v.dedup();
            v
        };
        let label = SoftLabel::new(l.clone()).unwrap();
        let pred = SoftLabel::new(p.clone()).unwrap();
        let got = fiu_update(&label, &pred, &points, &hp).unwrap();
        let want = fiu_reference(&l, &p, &points, &hp);
        let got_bits: Vec<u32> = got.data().iter().map(|v| v.to_bits()).collect();
        let want_bits: Vec<u32> = want.data().iter().map(|v| v.to_bits()).collect();
        if got_bits != want_bits {
            return Err(format!("case {case} differs"));
        }
        let blended = want
            .data()
            .iter()
            .zip(l.data())
            .any(|(&a, &b)| a != hp.lambda_decay * b && a != 1.0);
        nonempty += blended as usize;
    }
    Ok(nonempty)
}

// ---- EEDM finite differences

const SIDE: usize = 8;
const H: f64 = 1e-6;


fn random_target(rng: &mut ChaCha8Rng) -> Grid<f64> {
    let blobs = rng.gen_range(0..=2);
    let rects: Vec<(usize, usize, usize, usize)> = (0..blobs)
        .map(|_| {
            let (r, c) = (rng.gen_range(0..SIDE - 1), rng.gen_range(0..SIDE - 1));
            (r, c, rng.gen_range(1..=3), rng.gen_range(1..=3))
        })
        .collect();
    Grid::from_fn(SIDE, SIDE, |r, c| {
        rects
            .iter()
            .any(|&(r0, c0, h, w)| r >= r0 && r < r0 + h && c >= c0 && c < c0 + w) as u8 as f64
    })
}


/// Returns `(checked, skipped, worst relative error)` or the first failure.
pub fn eedm_fd_campaign(pairs: usize, seed: u64) -> Result<(usize, usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut skipped) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let t = random_target(&mut rng);
        let p = Grid::from_fn(SIDE, SIDE, |_, _| rng.gen_range(0.02..0.98));
        let out = eedm_loss(&p, &t, 4.0).unwrap();
        let (_, base_set) = eedm_mining(&p, &t, 4.0);
        for i in 0..SIDE * SIDE {
            let (r, c) = (i / SIDE, i % SIDE);
            let mut plus = p.clone();
            plus.set(r, c, p.get(r, c) + H);
            let mut minus = p.clone();
            minus.set(r, c, p.get(r, c) - H);
            if eedm_mining(&plus, &t, 4.0).1 != base_set || eedm_mining(&minus, &t, 4.0).1 != base_set {
                skipped += 1;
                continue;
            }
            let fd = (eedm_loss(&plus, &t, 4.0).unwrap().value - eedm_loss(&minus, &t, 4.0).unwrap().value)
                / (2.0 * H);
            let an = *out.grad.get(r, c);
            let scale = fd.abs().max(an.abs());
            let rel = if scale < 1e-12 { 0.0 } else { (fd - an).abs() / scale };
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!("pixel ({r},{c}): fd {fd} analytic {an}"));
            }
            checked += 1;
        }
    }
    Ok((checked, skipped, worst))
}

// ---- exhaustive target matching

const MSIDE: usize = 32;
const DEVIATION: f64 = 3.0;


/// 8-connected components by flood fill: (centroid, sorted pixels).
fn mask_components(mask: &BinaryMask) -> Vec<((f64, f64), Vec<(usize, usize)>)> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !*mask.get(r0, c0) || seen[r0 * w + c0] {
                continue;
            }
            let mut stack = vec![(r0, c0)];
            seen[r0 * w + c0] = true;
            let mut px = Vec::new();
            while let Some((r, c)) = stack.pop() {
                px.push((r, c));
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        if rr < 0 || cc < 0 || rr >= h as i32 || cc >= w as i32 {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if *mask.get(rr, cc) && !seen[rr * w + cc] {
                            seen[rr * w + cc] = true;
                            stack.push((rr, cc));
                        }
                    }
                }
            }
            px.sort_unstable();
            let n = px.len() as f64;
            let cen = (
                px.iter().map(|p| p.0 as f64).sum::<f64>() / n,
                px.iter().map(|p| p.1 as f64).sum::<f64>() / n,
            );
            out.push((cen, px));
        }
    }
    out
}

/// Best assignment: most matches, then fewest unmatched predicted pixels.
fn brute_force(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize) {
    let g = mask_components(gt);
    let p = mask_components(pred);
    let eligible = |gi: usize, pi: usize| {
        let d = (g[gi].0 .0 - p[pi].0 .0).hypot(g[gi].0 .1 - p[pi].0 .1);
        d <= DEVIATION || g[gi].1.iter().any(|q| p[pi].1.binary_search(q).is_ok())
    };
    fn search(
        gi: usize,
        used: &mut Vec<bool>,
        n_gt: usize,
        eligible: &dyn Fn(usize, usize) -> bool,
        sizes: &[usize],
        best: &mut (usize, usize),
        matched: usize,
    ) {
        if gi == n_gt {
            let false_px: usize = sizes.iter().zip(used.iter()).filter(|(_, &u)| !u).map(|(s, _)| s).sum();
            if matched > best.0 || (matched == best.0 && false_px < best.1) {
                *best = (matched, false_px);
            }
            return;
        }
        search(gi + 1, used, n_gt, eligible, sizes, best, matched);
        for pi in 0..used.len() {
            if !used[pi] && eligible(gi, pi) {
                used[pi] = true;
                search(gi + 1, used, n_gt, eligible, sizes, best, matched + 1);
                used[pi] = false;
            }
        }
    }
    let sizes: Vec<usize> = p.iter().map(|c| c.1.len()).collect();
    let mut best = (0, usize::MAX);
    search(0, &mut vec![false; p.len()], g.len(), &eligible, &sizes, &mut best, 0);
    best
}

fn rects(rng: &mut ChaCha8Rng, n: usize, anchors: &[(usize, usize)]) -> BinaryMask {
    let mut boxes = Vec::new();
    for i in 0..n {
        let (r, c) = match anchors.get(i) {
            Some(&(r, c)) => (
                (r as i32 + rng.gen_range(-3..=3)).clamp(0, MSIDE as i32 - 3) as usize,
                (c as i32 + rng.gen_range(-3..=3)).clamp(0, MSIDE as i32 - 3) as usize,
            ),
            None => (rng.gen_range(0..MSIDE - 3), rng.gen_range(0..MSIDE - 3)),
        };
        boxes.push((r, c, rng.gen_range(1..=3), rng.gen_range(1..=3)));
    }
    Grid::from_fn(MSIDE, MSIDE, |r, c| {
        boxes.iter().any(|&(r0, c0, h, w)| r >= r0 && r < r0 + h && c >= c0 && c < c0 + w)
    })
}


/// Returns `(gap cases, instances)`.
pub fn matcher_campaign(trials: usize, seed: u64) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = 0;
    let mut skipped = 0;
    for _ in 0..trials {
        let n_gt = rng.gen_range(0..=4);
        let anchors: Vec<(usize, usize)> = (0..n_gt)
            .map(|_| (rng.gen_range(2..MSIDE - 4), rng.gen_range(2..MSIDE - 4)))
            .collect();
        let gt = rects(&mut rng, n_gt, &anchors);
        if mask_components(&gt).len() > 4 {
            skipped += 1;
            continue;
        }
        let n_pred = rng.gen_range(0..=5);
        let pred = rects(&mut rng, n_pred, &anchors);
        let greedy = match_image(&pred, &gt, DEVIATION).unwrap();
        let (best_matches, best_false) = brute_force(&pred, &gt);
        // greedy can never beat the optimum
        if greedy.pairs.len() > best_matches {
            return Err("greedy found more matches than the optimum".into());
        }
        if greedy.pairs.len() != best_matches || greedy.false_pixels != best_false {
            gaps += 1;
        }
    }
    Ok((gaps, trials - skipped))
}
