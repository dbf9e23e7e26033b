//! Volume-preserving reorderings of flattened `H×W×C` tensors.
//!
//! Entries are stored row-major, index `(i·W + j)·C + c`. Every reshape is a
//! permutation of those indices, returned as a gather list: output entry `k`
//! is input entry `perm[k]`.

use crate::error::{Error, Result};

/// Height, width and channel count of an image-like vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    /// A flat vector viewed as one row of single-channel pixels.
    pub fn line(d: usize) -> Self {
        Self { h: 1, w: d, c: 1 }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Pixels with even `i + j` first (raster order), then the odd ones; channels
/// stay contiguous. On a line this is the even/odd index split.
pub fn checkerboard_split(s: Shape3) -> Result<Vec<usize>> {
    if s.positions() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "checkerboard split needs an even pixel count, got {}x{}",
            s.h, s.w
        )));
    }
    let mut perm = Vec::with_capacity(s.len());
    for parity in [0, 1] {
        for i in 0..s.h {
            for j in 0..s.w {
                if (i + j) % 2 == parity {
                    let base = (i * s.w + j) * s.c;
                    perm.extend(base..base + s.c);
                }
            }
        }
    }
    Ok(perm)
}

/// `(H, W, C) -> (H/2, W/2, 4C)`. Output channel `q·C + c` of pixel `(i, j)`
/// holds input channel `c` at corner `q` of the 2×2 block, corners ordered
/// `(2i, 2j), (2i, 2j+1), (2i+1, 2j), (2i+1, 2j+1)`.
pub fn squeeze(s: Shape3) -> Result<(Vec<usize>, Shape3)> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "squeeze needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let out = Shape3::new(s.h / 2, s.w / 2, 4 * s.c);
    let mut perm = Vec::with_capacity(s.len());
    for i in 0..out.h {
        for j in 0..out.w {
            for q in 0..4 {
                let (di, dj) = (q / 2, q % 2);
                let base = ((2 * i + di) * s.w + 2 * j + dj) * s.c;
                perm.extend(base..base + s.c);
            }
        }
    }
    Ok((perm, out))
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

pub fn apply(perm: &[usize], x: &[f64]) -> Vec<f64> {
    perm.iter().map(|&p| x[p]).collect()
}
