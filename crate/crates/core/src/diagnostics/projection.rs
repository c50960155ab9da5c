//! Orthogonal random projection.
//!
//! The projector is the `Q` factor of a seeded `source_dim x target_dim`
//! standard-normal matrix `G`. `G` is never stored: row `i` is regenerated on
//! demand from a counter-based stream keyed by `(seed, i)`. With the Gram
//! matrix `G^T G = L L^T`, `Q = G L^{-T}` has orthonormal columns and equals the
//! QR factor whose `R` has a positive diagonal, so `Q^T v = L^{-1} (G^T v)`.
//! Building a projector costs one streamed pass over `G`; applying it touches
//! only the rows where the input is nonzero.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::CounterRng;

/// Rows per matrix-multiply block when accumulating the Gram matrix.
const ROW_BLOCK: usize = 256;
/// Rows per independent partial Gram matrix.
const STRIPE_ROWS: usize = 8192;
/// Partial results held in memory at once before folding.
const STRIPE_GROUP: usize = 16;
/// Nonzero entries per partial `G^T v`.
const ENTRY_STRIPE: usize = 8192;

pub const DEFAULT_TARGET_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub target_dim: usize,
    pub seed: u64,
}

impl Default for ProjectionSpec {
    fn default() -> Self {
        Self {
            target_dim: DEFAULT_TARGET_DIM,
            seed: 0,
        }
    }
}

fn gaussian_row(seed: u64, row: usize, out: &mut [f64]) {
    let mut rng = CounterRng::new(seed, row as u64);
    for x in out {
        *x = StandardNormal.sample(&mut rng);
    }
}

#[derive(Debug, Clone)]
pub struct OrthoProjector {
    source_dim: usize,
    target_dim: usize,
    seed: u64,
    /// Lower Cholesky factor of `G^T G`, row-major `target_dim x target_dim`.
    chol: Vec<f64>,
}

impl OrthoProjector {
    pub fn new(source_dim: usize, target_dim: usize, seed: u64) -> Result<Self> {
        if target_dim == 0 {
            return Err(Error::param("target_dim", "must be at least 1"));
        }
        if target_dim > source_dim {
            return Err(Error::DimensionTooSmall {
                source_dim,
                target_dim,
            });
        }
        let gram = gram_matrix(source_dim, target_dim, seed);
        let chol = cholesky(gram, target_dim)?;
        Ok(Self {
            source_dim,
            target_dim,
            seed,
            chol,
        })
    }

    pub fn from_spec(source_dim: usize, spec: ProjectionSpec) -> Result<Self> {
        Self::new(source_dim, spec.target_dim, spec.seed)
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// `Q^T v` for a dense vector of length `source_dim`.
    pub fn project(&self, v: &[f32]) -> Result<Vec<f64>> {
        if v.len() != self.source_dim {
            return Err(Error::LengthMismatch {
                left: self.source_dim,
                right: v.len(),
            });
        }
        let entries: Vec<(usize, f32)> = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, x))
            .collect();
        Ok(self.project_entries(&entries))
    }

    /// `Q^T v` for a vector given by `(index, value)` pairs with ascending
    /// indices; absent indices are zero. Zero values may be omitted without
    /// changing the result.
    pub fn project_sparse(&self, indices: &[usize], values: &[f32]) -> Result<Vec<f64>> {
        if indices.len() != values.len() {
            return Err(Error::LengthMismatch {
                left: indices.len(),
                right: values.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.source_dim) {
            return Err(Error::param("indices", format!("{bad} >= source dimension {}", self.source_dim)));
        }
        let entries: Vec<(usize, f32)> = indices
            .iter()
            .zip(values)
            .filter(|(_, &x)| x != 0.0)
            .map(|(&i, &x)| (i, x))
            .collect();
        Ok(self.project_entries(&entries))
    }

    fn project_entries(&self, entries: &[(usize, f32)]) -> Vec<f64> {
        let k = self.target_dim;
        let stripes: Vec<&[(usize, f32)]> = entries.chunks(ENTRY_STRIPE).collect();
        let mut z = vec![0f64; k];
        for group in stripes.chunks(STRIPE_GROUP) {
            let partials = exec::map_slice(group, |stripe| {
                let mut acc = vec![0f64; k];
                let mut row = vec![0f64; k];
                for &(i, x) in *stripe {
                    gaussian_row(self.seed, i, &mut row);
                    let x = f64::from(x);
                    for (a, g) in acc.iter_mut().zip(&row) {
                        *a += x * g;
                    }
                }
                acc
            });
            for p in partials {
                for (a, b) in z.iter_mut().zip(&p) {
                    *a += b;
                }
            }
        }
        self.solve_lower(&mut z);
        z
    }

    fn solve_lower(&self, z: &mut [f64]) {
        let k = self.target_dim;
        for r in 0..k {
            let row = &self.chol[r * k..r * k + r];
            let s: f64 = row.iter().zip(&z[..r]).map(|(l, y)| l * y).sum();
            z[r] = (z[r] - s) / self.chol[r * k + r];
        }
    }

    /// Materialize `Q` as a row-major `source_dim x target_dim` matrix.
    pub fn matrix(&self) -> Vec<f64> {
        let k = self.target_dim;
        let mut q = vec![0f64; self.source_dim * k];
        exec::for_each_chunk_mut(&mut q, k * ROW_BLOCK, |bi, block| {
            for (r, row) in block.chunks_mut(k).enumerate() {
                gaussian_row(self.seed, bi * ROW_BLOCK + r, row);
                self.solve_lower(row);
            }
        });
        q
    }
}

fn gram_matrix(n: usize, k: usize, seed: u64) -> Vec<f64> {
    let stripes: Vec<usize> = (0..n.div_ceil(STRIPE_ROWS)).collect();
    let mut gram = vec![0f64; k * k];
    for group in stripes.chunks(STRIPE_GROUP) {
        let partials = exec::map_slice(group, |&s| {
            let start = s * STRIPE_ROWS;
            stripe_gram(start, (start + STRIPE_ROWS).min(n), k, seed)
        });
        for p in partials {
            for (a, b) in gram.iter_mut().zip(&p) {
                *a += b;
            }
        }
    }
    gram
}

fn stripe_gram(start: usize, end: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0f64; k * k];
    let mut block = vec![0f64; ROW_BLOCK * k];
    let mut row = start;
    while row < end {
        let rows = ROW_BLOCK.min(end - row);
        for r in 0..rows {
            gaussian_row(seed, row + r, &mut block[r * k..(r + 1) * k]);
        }
        // acc += B^T B with B row-major (rows x k)
        unsafe {
            matrixmultiply::dgemm(
                k,
                rows,
                k,
                1.0,
                block.as_ptr(),
                1,
                k as isize,
                block.as_ptr(),
                k as isize,
                1,
                1.0,
                acc.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        row += rows;
    }
    acc
}

fn cholesky(mut a: Vec<f64>, k: usize) -> Result<Vec<f64>> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::Numerical(format!("Gram matrix is not positive definite at column {j}")));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
        for p in j + 1..k {
            a[j * k + p] = 0.0;
        }
    }
    Ok(a)
}

/// Cosine of two already-projected vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity after projecting both vectors with the same seeded
/// `len x target_dim` orthonormal matrix.
pub fn project_cosine(v1: &[f32], v2: &[f32], spec: ProjectionSpec) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::LengthMismatch {
            left: v1.len(),
            right: v2.len(),
        });
    }
    if v1.iter().all(|&x| x == 0.0) || v2.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroVector);
    }
    let proj = OrthoProjector::from_spec(v1.len(), spec)?;
    cosine(&proj.project(v1)?, &proj.project(v2)?)
}
