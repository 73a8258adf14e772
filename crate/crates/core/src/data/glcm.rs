//! Gray-level co-occurrence texture probe (contrast, homogeneity, energy,
//! correlation). The matrix is non-symmetric: only the ordered pair
//! `(p, p + offset)` is counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 8;
pub const DEFAULT_OFFSET: (isize, isize) = (0, 1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlcmFeatures {
    pub contrast: f64,
    pub homogeneity: f64,
    pub energy: f64,
    /// `None` when either marginal has zero variance.
    pub correlation: Option<f64>,
}

/// Normalized co-occurrence matrix, row index = reference gray level.
#[derive(Debug, Clone, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    pub p: Vec<f64>,
}

fn quantize(v: f64, levels: usize) -> usize {
    let q = (v.clamp(0.0, 1.0) * levels as f64).floor() as usize;
    q.min(levels - 1)
}

pub fn cooccurrence_counts(
    image: &[f64],
    height: usize,
    width: usize,
    levels: usize,
    offset: (isize, isize),
) -> Result<Vec<u64>> {
    if levels < 2 {
        return Err(Error::arg("GLCM needs at least 2 gray levels"));
    }
    if image.len() != height * width {
        return Err(Error::arg("image buffer does not match its dimensions"));
    }
    let (dy, dx) = offset;
    if dy == 0 && dx == 0 {
        return Err(Error::arg("GLCM offset must be nonzero"));
    }
    if dy.unsigned_abs() >= height || dx.unsigned_abs() >= width {
        return Err(Error::arg("GLCM offset leaves the image"));
    }
    let q: Vec<usize> = image.iter().map(|&v| quantize(v, levels)).collect();
    let mut counts = vec![0u64; levels * levels];
    for y in 0..height as isize {
        let y2 = y + dy;
        if y2 < 0 || y2 >= height as isize {
            continue;
        }
        for x in 0..width as isize {
            let x2 = x + dx;
            if x2 < 0 || x2 >= width as isize {
                continue;
            }
            let a = q[y as usize * width + x as usize];
            let b = q[y2 as usize * width + x2 as usize];
            counts[a * levels + b] += 1;
        }
    }
    Ok(counts)
}

impl Glcm {
    pub fn from_counts(counts: &[u64], levels: usize) -> Result<Self> {
        if counts.len() != levels * levels {
            return Err(Error::arg("count matrix is not levels x levels"));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::arg("co-occurrence matrix has no pairs"));
        }
        let t = total as f64;
        Ok(Self {
            levels,
            p: counts.iter().map(|&c| c as f64 / t).collect(),
        })
    }

    pub fn features(&self) -> GlcmFeatures {
        let n = self.levels;
        let (mut contrast, mut homogeneity, mut energy) = (0.0, 0.0, 0.0);
        let (mut mu_i, mut mu_j) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let p = self.p[i * n + j];
                let d = i as f64 - j as f64;
                contrast += p * d * d;
                homogeneity += p / (1.0 + d * d);
                energy += p * p;
                mu_i += i as f64 * p;
                mu_j += j as f64 * p;
            }
        }
        let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let p = self.p[i * n + j];
                let di = i as f64 - mu_i;
                let dj = j as f64 - mu_j;
                var_i += di * di * p;
                var_j += dj * dj * p;
                cov += di * dj * p;
            }
        }
        let denom = (var_i * var_j).sqrt();
        let correlation = (denom > 1e-15).then(|| cov / denom);
        GlcmFeatures {
            contrast,
            homogeneity,
            energy,
            correlation,
        }
    }
}

/// Texture features of a grayscale image with values in `[0, 1]`.
pub fn glcm_features(
    image: &[f64],
    height: usize,
    width: usize,
    levels: usize,
    offset: (isize, isize),
) -> Result<GlcmFeatures> {
    let counts = cooccurrence_counts(image, height, width, levels, offset)?;
    Ok(Glcm::from_counts(&counts, levels)?.features())
}
