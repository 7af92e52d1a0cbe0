//! Rotary encodings for sequence order and grid position, and random
//! Fourier features for continuous coordinates.
//!
//! A head vector is split in two halves. The first half rotates by the 1D
//! sequence index. The second half rotates pair `j` by `omega_j * (p . u_j)`
//! where `p` is the patch position and `u_j` a golden-ratio direction.
//! Pairs are interleaved: `(x[2k], x[2k+1])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosencError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("vector length {got} does not match expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, PosencError>;

/// Golden-ratio directions on the unit circle, `alpha_j = 2 pi frac(j / phi)`.
pub fn ggrope_directions(n_pairs: usize) -> Result<Vec<[f64; 2]>> {
    if n_pairs == 0 {
        return Err(PosencError::Config("n_pairs must be positive".into()));
    }
    let inv_phi = 2.0 / (1.0 + 5.0f64.sqrt());
    Ok((0..n_pairs)
        .map(|j| {
            let a = std::f64::consts::TAU * (j as f64 * inv_phi).fract();
            [a.cos(), a.sin()]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Base of the geometric spatial spectrum `omega_j = base_2d^(-j/n)`.
    pub base_2d: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64, base_2d: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(PosencError::Config(format!(
                "head_dim {head_dim} must be a positive multiple of 4"
            )));
        }
        if !(base > 1.0) || !(base_2d >= 1.0) {
            return Err(PosencError::Config("rotary bases must exceed 1".into()));
        }
        Ok(Self { head_dim, base, base_2d })
    }

    pub fn half(&self) -> usize {
        self.head_dim / 2
    }

    pub fn pairs_per_half(&self) -> usize {
        self.head_dim / 4
    }

    pub fn theta_1d(&self, i: usize) -> f64 {
        self.base.powf(-2.0 * i as f64 / self.half() as f64)
    }

    pub fn omega(&self, j: usize) -> f64 {
        self.base_2d.powf(-(j as f64) / self.pairs_per_half() as f64)
    }

    pub fn directions(&self) -> Vec<[f64; 2]> {
        ggrope_directions(self.pairs_per_half()).expect("head_dim >= 4")
    }

    /// Rotation angle of every pair of a full head vector, `head_dim / 2`
    /// entries. Positions without a grid location get zero spatial angles.
    pub fn angles(&self, t: f64, grid: Option<[f64; 2]>) -> Vec<f64> {
        let n = self.pairs_per_half();
        let mut out = Vec::with_capacity(2 * n);
        out.extend((0..n).map(|i| t * self.theta_1d(i)));
        match grid {
            Some(p) => {
                let dirs = self.directions();
                out.extend((0..n).map(|j| self.omega(j) * (p[0] * dirs[j][0] + p[1] * dirs[j][1])));
            }
            None => out.extend(std::iter::repeat_n(0.0, n)),
        }
        out
    }
}

fn rotate_pairs(v: &[f64], angles: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = v.to_vec();
    for (k, a) in angles.enumerate() {
        let (s, c) = a.sin_cos();
        let (x, y) = (v[2 * k], v[2 * k + 1]);
        out[2 * k] = x * c - y * s;
        out[2 * k + 1] = x * s + y * c;
    }
    out
}

/// Standard RoPE on the sequence half of a head vector.
pub fn apply_rope_1d(half: &[f64], t: f64, cfg: &RopeConfig) -> Result<Vec<f64>> {
    if half.len() != cfg.half() {
        return Err(PosencError::Length { got: half.len(), expected: cfg.half() });
    }
    Ok(rotate_pairs(half, (0..cfg.pairs_per_half()).map(|i| t * cfg.theta_1d(i))))
}

/// Golden-gate rotation on the spatial half of a head vector.
pub fn apply_ggrope_2d(half: &[f64], p: [f64; 2], cfg: &RopeConfig) -> Result<Vec<f64>> {
    if half.len() != cfg.half() {
        return Err(PosencError::Length { got: half.len(), expected: cfg.half() });
    }
    let dirs = cfg.directions();
    Ok(rotate_pairs(
        half,
        (0..cfg.pairs_per_half()).map(|j| cfg.omega(j) * (p[0] * dirs[j][0] + p[1] * dirs[j][1])),
    ))
}

/// Full 3D rotation of a head vector; `grid = None` leaves the spatial half
/// untouched.
pub fn apply_rope_3d(v: &[f64], t: f64, grid: Option<[f64; 2]>, cfg: &RopeConfig) -> Result<Vec<f64>> {
    if v.len() != cfg.head_dim {
        return Err(PosencError::Length { got: v.len(), expected: cfg.head_dim });
    }
    Ok(rotate_pairs(v, cfg.angles(t, grid).into_iter()))
}

/// Random Fourier features `[cos(2 pi B v), sin(2 pi B v)]` with `B` fixed
/// at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierEncoder {
    pub sigma: f64,
    pub seed: u64,
    /// `d/2` rows of 2 columns.
    pub b: Vec<[f64; 2]>,
}

pub const DEFAULT_SIGMA: f64 = 10.0;

impl FourierEncoder {
    pub fn new(dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(PosencError::Config(format!("feature dim {dim} must be even")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| PosencError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = (0..dim / 2)
            .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
            .collect();
        Ok(Self { sigma, seed, b })
    }

    pub fn from_matrix(b: Vec<[f64; 2]>) -> Self {
        Self { sigma: f64::NAN, seed: 0, b }
    }

    pub fn dim(&self) -> usize {
        2 * self.b.len()
    }

    pub fn encode(&self, v: [f64; 2]) -> Result<Vec<f64>> {
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(PosencError::NonFinite);
        }
        let n = self.b.len();
        let mut out = vec![0.0; 2 * n];
        for (k, row) in self.b.iter().enumerate() {
            let a = std::f64::consts::TAU * (row[0] * v[0] + row[1] * v[1]);
            let (s, c) = a.sin_cos();
            out[k] = c;
            out[n + k] = s;
        }
        Ok(out)
    }
}

/// Alias kept for call sites that read better as a free function.
pub fn fourier_features(v: [f64; 2], enc: &FourierEncoder) -> Result<Vec<f64>> {
    enc.encode(v)
}
