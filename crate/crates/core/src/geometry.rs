//! Normalized boxes, binary masks, bin quantization, IoU and RLE codecs.
//!
//! Coordinates are fractions of the image extent. Centers live in `[0,1]^2`,
//! sizes in `(0,1]^2`. Masks are row-major boolean grids; their RLE form is
//! column-major with a leading zero-run, the same convention COCO uses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimensionMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("empty mask has no bounding box")]
    EmptyMask,
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Normalized object center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub x: f64,
    pub y: f64,
}

impl Center {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        for v in [x, y] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(GeometryError::Domain(format!(
                    "center component {v} outside [0,1]"
                )));
            }
        }
        Ok(Self { x, y })
    }
}

/// Normalized object extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size2D {
    pub w: f64,
    pub h: f64,
}

impl Size2D {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        for v in [w, h] {
            if !v.is_finite() || v <= 0.0 || v > 1.0 {
                return Err(GeometryError::Domain(format!(
                    "size component {v} outside (0,1]"
                )));
            }
        }
        Ok(Self { w, h })
    }
}

/// Bin count shared by the coordinate and size heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bins: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { bins: 1024 }
    }
}

impl QuantConfig {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(GeometryError::Domain(format!("bins must be >= 2, got {bins}")));
        }
        Ok(Self { bins })
    }

    fn max_index(&self) -> f64 {
        (self.bins - 1) as f64
    }

    fn to_bin(&self, unit: f64) -> u32 {
        // f64::round rounds half away from zero.
        (unit * self.max_index()).round().clamp(0.0, self.max_index()) as u32
    }

    fn check_bin(&self, b: u32) -> Result<()> {
        if (b as usize) >= self.bins {
            return Err(GeometryError::Domain(format!(
                "bin {b} out of range for {} bins",
                self.bins
            )));
        }
        Ok(())
    }
}

fn check_unit(v: f64, what: &str) -> Result<()> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(GeometryError::Domain(format!("{what} {v} outside [0,1]")));
    }
    Ok(())
}

pub fn quantize_coord(c: Center, q: QuantConfig) -> Result<[u32; 2]> {
    check_unit(c.x, "center x")?;
    check_unit(c.y, "center y")?;
    Ok([q.to_bin(c.x), q.to_bin(c.y)])
}

pub fn dequantize_coord(bins: [u32; 2], q: QuantConfig) -> Result<Center> {
    q.check_bin(bins[0])?;
    q.check_bin(bins[1])?;
    Ok(Center {
        x: bins[0] as f64 / q.max_index(),
        y: bins[1] as f64 / q.max_index(),
    })
}

/// Log-scale position of a size component in `[0,1]`, clamped below at `1/B`.
pub fn size_to_unit(s: f64, q: QuantConfig) -> f64 {
    let floor = (q.bins as f64).recip().log2();
    (s.max((q.bins as f64).recip()).log2() - floor) / (0.0 - floor)
}

/// Inverse of [`size_to_unit`].
pub fn unit_to_size(u: f64, q: QuantConfig) -> f64 {
    let floor = (q.bins as f64).recip().log2();
    (floor * (1.0 - u)).exp2()
}

pub fn quantize_size(s: Size2D, q: QuantConfig) -> Result<[u32; 2]> {
    for v in [s.w, s.h] {
        if !v.is_finite() || v <= 0.0 {
            return Err(GeometryError::Domain(format!("size component {v} must be positive")));
        }
    }
    Ok([q.to_bin(size_to_unit(s.w, q)), q.to_bin(size_to_unit(s.h, q))])
}

pub fn dequantize_size(bins: [u32; 2], q: QuantConfig) -> Result<Size2D> {
    q.check_bin(bins[0])?;
    q.check_bin(bins[1])?;
    Ok(Size2D {
        w: unit_to_size(bins[0] as f64 / q.max_index(), q),
        h: unit_to_size(bins[1] as f64 / q.max_index(), q),
    })
}

/// Axis-aligned box as normalized corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCorners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCorners {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

pub fn box_corners(c: Center, s: Size2D) -> BoxCorners {
    let clip = |v: f64| v.clamp(0.0, 1.0);
    BoxCorners {
        x0: clip(c.x - s.w / 2.0),
        y0: clip(c.y - s.h / 2.0),
        x1: clip(c.x + s.w / 2.0),
        y1: clip(c.y + s.h / 2.0),
    }
}

pub fn box_iou(a: BoxCorners, b: BoxCorners) -> f64 {
    let inter = BoxCorners {
        x0: a.x0.max(b.x0),
        y0: a.y0.max(b.y0),
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
    }
    .area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(GeometryError::Domain("mask dimensions must be >= 1".into()));
        }
        if bits.len() != height * width {
            return Err(GeometryError::Domain(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be >= 1");
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(GeometryError::DimensionMismatch {
                a_h: self.height,
                a_w: self.width,
                b_h: other.height,
                b_w: other.width,
            });
        }
        Ok(())
    }
}

/// Intersection over union. Two empty masks score 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Tight bounding box of the foreground, in normalized center/size form.
pub fn mask_to_box(m: &BinaryMask) -> Result<(Center, Size2D)> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..m.height {
        for c in 0..m.width {
            if m.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(GeometryError::EmptyMask);
    }
    let (w, h) = (m.width as f64, m.height as f64);
    Ok((
        Center {
            x: (c0 + c1) as f64 / 2.0 / w,
            y: (r0 + r1) as f64 / 2.0 / h,
        },
        Size2D {
            w: (c1 - c0) as f64 / w,
            h: (r1 - r0) as f64 / h,
        },
    ))
}

/// Uncompressed column-major run-length record: `{"size":[H,W],"counts":[...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn rle_encode(m: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for c in 0..m.width {
        for r in 0..m.height {
            let v = m.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [m.height, m.width],
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(GeometryError::MalformedRle(format!(
            "runs sum to {total}, expected {}",
            h * w
        )));
    }
    let mut mask = BinaryMask::new(h, w, vec![false; h * w])
        .map_err(|e| GeometryError::MalformedRle(e.to_string()))?;
    let mut idx = 0usize;
    let mut value = false;
    for &run in &rle.counts {
        if value {
            for k in idx..idx + run as usize {
                mask.set(k % h, k / h, true);
            }
        }
        idx += run as usize;
        value = !value;
    }
    Ok(mask)
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One grounded object: normalized center and size plus an optional pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub center: Center,
    pub size: Size2D,
    pub mask: Option<std::sync::Arc<BinaryMask>>,
}

impl Instance {
    pub fn from_mask(mask: BinaryMask) -> Result<Self> {
        let (center, size) = mask_to_box(&mask)?;
        Ok(Self {
            center,
            size,
            mask: Some(std::sync::Arc::new(mask)),
        })
    }

    pub fn corners(&self) -> BoxCorners {
        box_corners(self.center, self.size)
    }
}
