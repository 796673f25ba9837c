//! Core image and latent types plus the fixed orthonormal frequency basis
//! that maps between pixel space and the oracle's latent space.
//!
//! Intermediate values are never clamped; clamping to [0, 1] happens only at
//! image export (see `io::write_pgm`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W grayscale raster, row-major, nominal intensity range [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < 8 || height < 8 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be at least 8x8, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "pixel buffer has {} values, expected {}x{}={}",
                pixels.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|p| p.is_finite())
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Length-d vector of basis coefficients; the object the flow integrates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVec {
    coeffs: Vec<f64>,
}

impl LatentVec {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(d: usize) -> Self {
        Self { coeffs: vec![0.0; d] }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// d orthonormal 2-D DCT-II basis vectors over an H×W grid, in zigzag
/// frequency order. Acts as the encoder/decoder between pixel space and the
/// oracle's latent space.
#[derive(Debug, Clone)]
pub struct Basis {
    d: usize,
    width: usize,
    height: usize,
    rows: Vec<f64>, // d * (height*width), row-major
}

impl Basis {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.rows[k * n..(k + 1) * n]
    }
}

/// Zigzag enumeration of (u, v) frequency pairs for an H×W grid: anti-diagonals
/// of increasing u+v, alternating traversal direction (JPEG convention).
fn zigzag(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(height * width);
    for s in 0..(height + width - 1) {
        let u_lo = s.saturating_sub(width - 1);
        let u_hi = s.min(height - 1);
        if s % 2 == 0 {
            for u in (u_lo..=u_hi).rev() {
                order.push((u, s - u));
            }
        } else {
            for u in u_lo..=u_hi {
                order.push((u, s - u));
            }
        }
    }
    order
}

/// Build the first `d` orthonormal 2-D DCT-II basis vectors in zigzag order.
pub fn build_dct_basis(height: usize, width: usize, d: usize) -> Result<Basis> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "basis grid must be at least 8x8, got {height}x{width}"
        )));
    }
    if d == 0 || d > height * width {
        return Err(Error::Dimension(format!(
            "latent dimension {d} outside 1..={}",
            height * width
        )));
    }
    let order = zigzag(height, width);
    let mut rows = Vec::with_capacity(d * height * width);
    for &(u, v) in order.iter().take(d) {
        let au = if u == 0 { (1.0 / height as f64).sqrt() } else { (2.0 / height as f64).sqrt() };
        let bv = if v == 0 { (1.0 / width as f64).sqrt() } else { (2.0 / width as f64).sqrt() };
        for i in 0..height {
            let ci = (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * u as f64
                / (2.0 * height as f64))
                .cos();
            for j in 0..width {
                let cj = (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * v as f64
                    / (2.0 * width as f64))
                    .cos();
                rows.push(au * bv * ci * cj);
            }
        }
    }
    Ok(Basis { d, width, height, rows })
}

/// Project an image onto the basis: `coeffs[k] = dot(rows[k], pixels)`.
pub fn encode(img: &Image, basis: &Basis) -> Result<LatentVec> {
    if img.width() != basis.width || img.height() != basis.height {
        return Err(Error::Dimension(format!(
            "image is {}x{} but basis expects {}x{}",
            img.width(),
            img.height(),
            basis.width,
            basis.height
        )));
    }
    let coeffs = (0..basis.d)
        .map(|k| {
            basis
                .row(k)
                .iter()
                .zip(img.pixels())
                .map(|(r, p)| r * p)
                .sum()
        })
        .collect();
    Ok(LatentVec::new(coeffs))
}

/// Reconstruct pixels from coefficients: `pixels = sum_k coeffs[k] * rows[k]`.
pub fn decode(z: &LatentVec, basis: &Basis) -> Result<Image> {
    if z.len() != basis.d {
        return Err(Error::Dimension(format!(
            "latent has {} coefficients but basis has d={}",
            z.len(),
            basis.d
        )));
    }
    let n = basis.width * basis.height;
    let mut pixels = vec![0.0; n];
    for (k, &c) in z.as_slice().iter().enumerate() {
        for (p, r) in pixels.iter_mut().zip(basis.row(k)) {
            *p += c * r;
        }
    }
    Image::new(basis.width, basis.height, pixels)
}
