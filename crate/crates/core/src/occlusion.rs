//! Per-part occlusion state from a person foreground mask.
//!
//! Coverage of each part region is max-normalized across parts and
//! thresholded at 0.5, so a small but unoccluded person still reads as fully
//! visible.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{HORIZONTAL_PARTS, VERTICAL_PARTS, VISIBILITY_THRESHOLD};

/// Clamp bound for probabilities fed to the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Foreground bitmap, row-major, `true` = person.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BodyMask {
    height: usize,
    width: usize,
    bitmap: Vec<bool>,
}

impl BodyMask {
    pub fn new(height: usize, width: usize, bitmap: Vec<bool>) -> Result<Self> {
        if bitmap.len() != height * width {
            return Err(Error::Shape(format!(
                "mask bitmap has {} pixels, expected {height}x{width}",
                bitmap.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bitmap,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bitmap: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bitmap[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bitmap[row * self.width + col] = value;
    }

    /// Sets every pixel of `rect` to `value`.
    pub fn fill(&mut self, rect: Rect, value: bool) {
        for r in rect.top..rect.bottom.min(self.height) {
            for c in rect.left..rect.right.min(self.width) {
                self.set(r, c, value);
            }
        }
    }

    pub fn count_in(&self, rect: Rect) -> usize {
        (rect.top..rect.bottom)
            .map(|r| {
                self.bitmap[r * self.width + rect.left..r * self.width + rect.right]
                    .iter()
                    .filter(|&&b| b)
                    .count()
            })
            .sum()
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscale(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        let bitmap = (0..h * w)
            .map(|i| self.get((i / w) / factor, (i % w) / factor))
            .collect();
        Self {
            height: h,
            width: w,
            bitmap,
        }
    }

    /// Binary PGM (P5); values above 127 are foreground.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode_pgm(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err("not a binary PGM (P5)".into());
        }
        let num = |t: String| t.parse::<usize>().map_err(|_| format!("bad PGM field {t:?}"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported PGM maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let data = bytes
            .get(start..start + width * height)
            .ok_or("truncated PGM raster")?;
        let threshold = maxval / 2;
        Ok(Self {
            height,
            width,
            bitmap: data.iter().map(|&v| usize::from(v) > threshold).collect(),
        })
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bitmap.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    /// Run-length JSON `{"h":H,"w":W,"rle":[...]}`: row-major run lengths
    /// alternating background/foreground, starting with background.
    pub fn from_rle(rle: &RleMask) -> Result<Self> {
        let total: usize = rle.rle.iter().sum();
        if total != rle.h * rle.w {
            return Err(Error::Shape(format!(
                "RLE covers {total} pixels, expected {}",
                rle.h * rle.w
            )));
        }
        let mut bitmap = Vec::with_capacity(total);
        for (i, &run) in rle.rle.iter().enumerate() {
            bitmap.extend(std::iter::repeat_n(i % 2 == 1, run));
        }
        Self::new(rle.h, rle.w, bitmap)
    }

    pub fn to_rle(&self) -> RleMask {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bitmap {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        RleMask {
            h: self.height,
            w: self.width,
            rle: runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub h: usize,
    pub w: usize,
    pub rle: Vec<usize>,
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }
}

/// Part regions over an `H×W` frame, in global part order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartLayout {
    height: usize,
    width: usize,
    regions: Vec<Rect>,
}

impl PartLayout {
    /// 4 full-width horizontal stripes then 2 full-height vertical stripes.
    pub fn standard(height: usize, width: usize) -> Result<Self> {
        Self::stripes(height, width, HORIZONTAL_PARTS, VERTICAL_PARTS)
    }

    pub fn stripes(height: usize, width: usize, n_h: usize, n_v: usize) -> Result<Self> {
        if height < n_h || width < n_v || n_h + n_v == 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} frame cannot hold {n_h} horizontal and {n_v} vertical stripes"
            )));
        }
        let mut regions = Vec::with_capacity(n_h + n_v);
        for i in 0..n_h {
            regions.push(Rect {
                top: i * height / n_h,
                bottom: (i + 1) * height / n_h,
                left: 0,
                right: width,
            });
        }
        for j in 0..n_v {
            regions.push(Rect {
                top: 0,
                bottom: height,
                left: j * width / n_v,
                right: (j + 1) * width / n_v,
            });
        }
        Ok(Self {
            height,
            width,
            regions,
        })
    }

    pub fn regions(&self) -> &[Rect] {
        &self.regions
    }

    pub fn parts(&self) -> usize {
        self.regions.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionState {
    /// Per-part visibility scores in `[0, 1]`.
    pub scores: Vec<f64>,
    /// `scores[p] >= 0.5`.
    pub mask: Vec<bool>,
    pub labels: Option<Vec<bool>>,
    /// Set when the input mask had no foreground at all.
    pub empty_mask: bool,
}

/// Coverage-based visibility estimate.
pub fn estimate_visibility(mask: &BodyMask, layout: &PartLayout) -> Result<OcclusionState> {
    if mask.height != layout.height || mask.width != layout.width {
        return Err(Error::Shape(format!(
            "mask is {}x{}, layout frame is {}x{}",
            mask.height, mask.width, layout.height, layout.width
        )));
    }
    let coverage: Vec<f64> = layout
        .regions
        .iter()
        .map(|&r| mask.count_in(r) as f64 / r.area() as f64)
        .collect();
    let max = coverage.iter().copied().fold(0.0, f64::max);
    let empty_mask = max == 0.0;
    let scores: Vec<f64> = if empty_mask {
        tracing::warn!("empty body mask; every part marked occluded");
        vec![0.0; coverage.len()]
    } else {
        coverage.iter().map(|r| r / max).collect()
    };
    let mask = scores.iter().map(|&y| y >= VISIBILITY_THRESHOLD).collect();
    Ok(OcclusionState {
        scores,
        mask,
        labels: None,
        empty_mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    /// d loss / d y, evaluated at the clamped predictions.
    pub grad: Vec<f64>,
}

/// Mean binary cross-entropy `−[ŷ ln y + (1−ŷ) ln(1−y)]` over parts.
pub fn occlusion_bce_loss(y: &[f64], labels: &[bool]) -> Result<BceOutput> {
    if y.len() != labels.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            y.len(),
            labels.len()
        )));
    }
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (&yi, &li) in y.iter().zip(labels) {
        let p = yi.clamp(BCE_EPS, 1.0 - BCE_EPS);
        if li {
            loss -= p.ln();
            grad.push(-1.0 / (p * n));
        } else {
            loss -= (1.0 - p).ln();
            grad.push(1.0 / ((1.0 - p) * n));
        }
    }
    Ok(BceOutput {
        loss: loss / n,
        grad,
    })
}
