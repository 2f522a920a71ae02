//! Run-length codec for binary masks. Runs alternate starting with a zero-run
//! over row-major pixel order, so an all-ones mask begins with an explicit
//! zero-length zero-run.

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub h: usize,
    pub w: usize,
    pub runs: Vec<usize>,
}

/// A decoded binary mask with row-major `0/1` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if pixels.len() != h * w {
            return Err(DatasetError::Codec {
                context: format!("mask pixel count {} != {h}x{w}", pixels.len()),
            });
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(DatasetError::Codec {
                context: "mask pixels must be 0 or 1".to_string(),
            });
        }
        Ok(BinaryMask { h, w, pixels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            pixels: vec![0; h * w],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.w + col]
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }
}

pub fn encode_mask_rle(mask: &BinaryMask) -> RleMask {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &p in &mask.pixels {
        if p == current {
            run += 1;
        } else {
            runs.push(run);
            current = p;
            run = 1;
        }
    }
    runs.push(run);
    if mask.pixels.is_empty() {
        runs.clear();
        runs.push(0);
    }
    RleMask {
        h: mask.h,
        w: mask.w,
        runs,
    }
}

pub fn decode_mask_rle(rle: &RleMask) -> Result<BinaryMask, DatasetError> {
    let total: usize = rle.runs.iter().sum();
    if total != rle.h * rle.w {
        return Err(DatasetError::Codec {
            context: format!(
                "rle runs sum to {total}, expected {} for a {}x{} mask",
                rle.h * rle.w,
                rle.h,
                rle.w
            ),
        });
    }
    let mut pixels = Vec::with_capacity(total);
    let mut value = 0u8;
    for &run in &rle.runs {
        pixels.extend(std::iter::repeat(value).take(run));
        value = 1 - value;
    }
    Ok(BinaryMask {
        h: rle.h,
        w: rle.w,
        pixels,
    })
}
