//! COCO run-length encoding of binary masks.
//!
//! Pixels are scanned column-major (down each column, then left to right) and
//! the first count is always the number of leading zeros, which may be 0.

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};

/// Uncompressed COCO RLE, serialized as `{"size": [h, w], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    /// Foreground area: the sum of the odd-indexed runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}

pub fn rle_encode(mask: &Mask) -> Result<Rle> {
    let (h, w) = (mask.height, mask.width);
    if h == 0 || w == 0 {
        return Err(Error::arg("cannot run-length encode an empty mask"));
    }
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Ok(Rle { size: [h, w], counts })
}

pub fn rle_decode(rle: &Rle) -> Result<Mask> {
    let (h, w) = (rle.height(), rle.width());
    let n = h * w;
    let total: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
    if total != n as u64 {
        return Err(Error::parse(format!(
            "RLE counts sum to {total}, expected {n} for size [{h}, {w}]"
        )));
    }
    let mut mask = Mask::zeros(h, w);
    let mut idx = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let on = i % 2 == 1;
        for k in idx..idx + c as usize {
            if on {
                mask.set(k % h, k / h, true);
            }
        }
        idx += c as usize;
    }
    Ok(mask)
}
