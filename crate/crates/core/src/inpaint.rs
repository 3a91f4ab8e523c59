//! Harmonic hole filling by Jacobi relaxation of the discrete Laplace
//! equation, one color channel at a time. Relaxation starts from a
//! conjugate-gradient solve of the same system, so the sweep-change stopping
//! rule is not fooled by slow convergence on holes that touch the border.

use image::RgbImage;
use thiserror::Error;

use crate::mask::BinaryMask;

pub const DEFAULT_MAX_ITERS: usize = 2000;
pub const DEFAULT_TOL: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum InpaintError {
    #[error("hole covers the whole image, no boundary values to diffuse")]
    FullMask,
    #[error("image is empty")]
    EmptyImage,
    #[error("hole mask is {got:?}, image is {expected:?}")]
    DimensionMismatch { expected: (u32, u32), got: (u32, u32) },
}

/// Result of relaxing one scalar field.
#[derive(Debug, Clone)]
pub struct Relaxation {
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Max per-pixel change of each sweep.
    pub residuals: Vec<f64>,
}

/// Hole pixels with their 4-neighbour indices (in-image only).
struct Stencil {
    holes: Vec<usize>,
    neighbours: Vec<[usize; 4]>,
    counts: Vec<u8>,
}

impl Stencil {
    fn new(hole: &BinaryMask) -> Stencil {
        let (w, h) = (hole.width() as usize, hole.height() as usize);
        let mut holes = Vec::new();
        let mut neighbours = Vec::new();
        let mut counts = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !hole.get(x as u32, y as u32) {
                    continue;
                }
                let mut nb = [0usize; 4];
                let mut n = 0;
                let mut push = |i: usize| {
                    nb[n] = i;
                    n += 1;
                };
                if x > 0 {
                    push(y * w + x - 1);
                }
                if x + 1 < w {
                    push(y * w + x + 1);
                }
                if y > 0 {
                    push((y - 1) * w + x);
                }
                if y + 1 < h {
                    push((y + 1) * w + x);
                }
                holes.push(y * w + x);
                neighbours.push(nb);
                counts.push(n as u8);
            }
        }
        Stencil {
            holes,
            neighbours,
            counts,
        }
    }
}

/// Solves `u = mean of 4-neighbours` on hole pixels with the non-hole values
/// held fixed. Image borders are reflecting (missing neighbours are skipped).
pub fn relax_channel(field: &[f64], hole: &BinaryMask, max_iters: usize, tol: f64) -> Relaxation {
    let stencil = Stencil::new(hole);
    relax_with(field, hole, &stencil, max_iters, tol)
}

fn relax_with(field: &[f64], hole: &BinaryMask, st: &Stencil, max_iters: usize, tol: f64) -> Relaxation {
    let mut u = field.to_vec();
    if st.holes.is_empty() {
        return Relaxation {
            values: u,
            iterations: 0,
            residuals: Vec::new(),
        };
    }
    let init = initial_guess(field, hole);
    let start: Vec<f64> = st.holes.iter().map(|&i| init[i]).collect();
    for (&i, v) in st.holes.iter().zip(harmonic_solve(field, hole, st, start)) {
        u[i] = v;
    }

    let mut next = vec![0.0; st.holes.len()];
    let mut residuals = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        let mut max_change: f64 = 0.0;
        for (k, nb) in st.neighbours.iter().enumerate() {
            let c = st.counts[k] as usize;
            let avg = nb[..c].iter().map(|&i| u[i]).sum::<f64>() / c as f64;
            max_change = max_change.max((avg - u[st.holes[k]]).abs());
            next[k] = avg;
        }
        for (k, &i) in st.holes.iter().enumerate() {
            u[i] = next[k];
        }
        iterations += 1;
        residuals.push(max_change);
        if max_change < tol {
            break;
        }
    }
    Relaxation {
        values: u,
        iterations,
        residuals,
    }
}

/// Conjugate-gradient solve of the hole Laplacian starting from `x`, then
/// clipped to the range of the known pixels bordering the hole.
fn harmonic_solve(field: &[f64], hole: &BinaryMask, st: &Stencil, mut x: Vec<f64>) -> Vec<f64> {
    let n = st.holes.len();
    let mut slot = vec![usize::MAX; field.len()];
    for (k, &i) in st.holes.iter().enumerate() {
        slot[i] = k;
    }
    let mut b = vec![0.0; n];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, nb) in st.neighbours.iter().enumerate() {
        for &j in &nb[..st.counts[k] as usize] {
            if !hole.as_slice()[j] {
                b[k] += field[j];
                lo = lo.min(field[j]);
                hi = hi.max(field[j]);
            }
        }
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        for (k, nb) in st.neighbours.iter().enumerate() {
            let c = st.counts[k] as usize;
            let mut acc = c as f64 * v[k];
            for &j in &nb[..c] {
                if slot[j] != usize::MAX {
                    acc -= v[slot[j]];
                }
            }
            out[k] = acc;
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = 1e-24 * dot(&b, &b).max(1.0);
    let mut ap = vec![0.0; n];
    for _ in 0..(n + 100) {
        if rr <= stop {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    if lo <= hi {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
    x
}

/// Starting values: average of the row-wise and column-wise linear
/// interpolation between the nearest known pixels on either side. Falls back
/// to the mean of the known pixels bordering the hole.
fn initial_guess(field: &[f64], hole: &BinaryMask) -> Vec<f64> {
    let (w, h) = (hole.width() as usize, hole.height() as usize);
    let known = |i: usize| !hole.as_slice()[i];
    let mut sum = vec![0.0; field.len()];
    let mut cnt = vec![0u32; field.len()];
    let mut line = |idx: &dyn Fn(usize) -> usize, len: usize| {
        let mut k = 0;
        while k < len {
            if known(idx(k)) {
                k += 1;
                continue;
            }
            let start = k;
            while k < len && !known(idx(k)) {
                k += 1;
            }
            let left = (start > 0).then(|| field[idx(start - 1)]);
            let right = (k < len).then(|| field[idx(k)]);
            for j in start..k {
                let v = match (left, right) {
                    (Some(a), Some(b)) => {
                        let t = (j + 1 - start) as f64 / (k - start + 1) as f64;
                        a + t * (b - a)
                    }
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => continue,
                };
                sum[idx(j)] += v;
                cnt[idx(j)] += 1;
            }
        }
    };
    for y in 0..h {
        line(&|x| y * w + x, w);
    }
    for x in 0..w {
        line(&|y| y * w + x, h);
    }

    let (mut bsum, mut bn) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xi, yi) = (x as i64, y as i64);
            let touches = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dx, dy)| hole.get_signed(xi + dx, yi + dy));
            if known(i) && touches {
                bsum += field[i];
                bn += 1;
            }
        }
    }
    let fallback = if bn > 0 { bsum / bn as f64 } else { 0.0 };
    (0..field.len())
        .map(|i| match cnt[i] {
            0 if known(i) => field[i],
            0 => fallback,
            c => sum[i] / c as f64,
        })
        .collect()
}

/// Fills the hole pixels of `image` with the harmonic interpolant of the
/// surrounding pixels. Pixels outside the hole are returned bit-identical.
pub fn inpaint(image: &RgbImage, hole: &BinaryMask, max_iters: usize, tol: f64) -> Result<RgbImage, InpaintError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(InpaintError::EmptyImage);
    }
    if hole.dims() != (w, h) {
        return Err(InpaintError::DimensionMismatch {
            expected: (w, h),
            got: hole.dims(),
        });
    }
    let hole_count = hole.count();
    if hole_count == 0 {
        return Ok(image.clone());
    }
    if hole_count == (w as usize) * (h as usize) {
        return Err(InpaintError::FullMask);
    }
    let stencil = Stencil::new(hole);
    let raw = image.as_raw();
    let mut out = image.clone();
    let buf: &mut [u8] = &mut out;
    for ch in 0..3 {
        let field: Vec<f64> = raw.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let relaxed = relax_with(&field, hole, &stencil, max_iters, tol);
        for &i in &stencil.holes {
            buf[3 * i + ch] = relaxed.values[i].round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}
