//! Brute-force references for tests and the `oracle-check` command.
//!
//! Nothing here touches kernel maps, coordinate hashing or the tape: every
//! routine walks a dense `D^3` grid with explicit nested loops. Keep it that
//! way, the point of this module is to disagree with `ops` when `ops` is wrong.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::voxel::VoxelCoord;

pub const MAX_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

/// Dense cube with an occupancy mask. Features at empty cells are ignored.
#[derive(Clone, Debug)]
pub struct DenseGrid {
    dim: usize,
    channels: usize,
    occupied: Vec<bool>,
    features: Vec<f64>,
}

impl DenseGrid {
    pub fn new(dim: usize, channels: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidInput(format!("dense grid extent {dim} outside 1..={MAX_DIM}")));
        }
        Ok(Self {
            dim,
            channels,
            occupied: vec![false; dim * dim * dim],
            features: vec![0.0; dim * dim * dim * channels],
        })
    }

    /// Scatter `features[r]` to `coords[r]`; coords must lie in `[0, dim)^3`.
    pub fn from_rows(dim: usize, coords: &[VoxelCoord], features: &Matrix) -> Result<Self> {
        let mut g = Self::new(dim, features.cols())?;
        for (r, c) in coords.iter().enumerate() {
            let cell = g.cell(c.x, c.y, c.z).ok_or_else(|| {
                Error::InvalidInput(format!("{c:?} lies outside the {dim}^3 oracle grid"))
            })?;
            g.occupied[cell] = true;
            for ch in 0..g.channels {
                g.features[cell * g.channels + ch] = features.get(r, ch);
            }
        }
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn cell(&self, x: i32, y: i32, z: i32) -> Option<usize> {
        let d = self.dim as i32;
        if x < 0 || y < 0 || z < 0 || x >= d || y >= d || z >= d {
            return None;
        }
        Some(((x as usize) * self.dim + y as usize) * self.dim + z as usize)
    }

    pub fn is_occupied(&self, x: i32, y: i32, z: i32) -> bool {
        self.cell(x, y, z).is_some_and(|c| self.occupied[c])
    }

    pub fn value(&self, x: i32, y: i32, z: i32, ch: usize) -> f64 {
        let c = self.cell(x, y, z).expect("in bounds");
        self.features[c * self.channels + ch]
    }

    fn set(&mut self, x: i32, y: i32, z: i32, ch: usize, v: f64) {
        let c = self.cell(x, y, z).expect("in bounds");
        self.features[c * self.channels + ch] = v;
    }

    fn empty_like(&self, channels: usize) -> Self {
        Self {
            dim: self.dim,
            channels,
            occupied: self.occupied.clone(),
            features: vec![0.0; self.occupied.len() * channels],
        }
    }

    /// Gather rows in the order of `coords`.
    pub fn rows_at(&self, coords: &[VoxelCoord]) -> Matrix {
        let mut m = Matrix::zeros(coords.len(), self.channels);
        for (r, c) in coords.iter().enumerate() {
            for ch in 0..self.channels {
                m.set(r, ch, self.value(c.x, c.y, c.z, ch));
            }
        }
        m
    }
}

/// Reduce over occupied cells at `{-d, 0, d}^3`; out-of-bounds counts as empty.
pub fn dense_masked_pool(grid: &DenseGrid, dilation: i32, mode: PoolMode) -> DenseGrid {
    let mut out = grid.empty_like(grid.channels);
    let d = grid.dim as i32;
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if !grid.is_occupied(x, y, z) {
                    continue;
                }
                for ch in 0..grid.channels {
                    let mut best = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for a in -1..=1 {
                        for b in -1..=1 {
                            for c in -1..=1 {
                                let (nx, ny, nz) = (x + a * dilation, y + b * dilation, z + c * dilation);
                                if grid.is_occupied(nx, ny, nz) {
                                    let v = grid.value(nx, ny, nz, ch);
                                    best = best.max(v);
                                    sum += v;
                                    count += 1;
                                }
                            }
                        }
                    }
                    let v = match mode {
                        PoolMode::Max => best,
                        PoolMode::Mean => sum / count as f64,
                    };
                    out.set(x, y, z, ch, v);
                }
            }
        }
    }
    out
}

/// Second pool implementation: channel-outer, reversed cell and offset order.
pub fn dense_masked_pool_reversed(grid: &DenseGrid, dilation: i32, mode: PoolMode) -> DenseGrid {
    let mut out = grid.empty_like(grid.channels);
    let d = grid.dim as i32;
    for ch in (0..grid.channels).rev() {
        for z in (0..d).rev() {
            for y in (0..d).rev() {
                for x in (0..d).rev() {
                    if !grid.is_occupied(x, y, z) {
                        continue;
                    }
                    let mut vals = Vec::with_capacity(27);
                    for c in (-1..=1).rev() {
                        for b in (-1..=1).rev() {
                            for a in (-1..=1).rev() {
                                let (nx, ny, nz) = (x + a * dilation, y + b * dilation, z + c * dilation);
                                if grid.is_occupied(nx, ny, nz) {
                                    vals.push(grid.value(nx, ny, nz, ch));
                                }
                            }
                        }
                    }
                    let v = match mode {
                        PoolMode::Max => vals.iter().copied().reduce(f64::max).expect("center occupied"),
                        PoolMode::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                    };
                    out.set(x, y, z, ch, v);
                }
            }
        }
    }
    out
}

/// Masked dilated convolution. `weights` is laid out `[offset][c_in][c_out]`
/// with offsets enumerated `dx`-major over `{-d, 0, d}`.
pub fn dense_masked_conv(grid: &DenseGrid, weights: &[f64], bias: &[f64], dilation: i32) -> Result<DenseGrid> {
    let cin = grid.channels;
    let cout = bias.len();
    if weights.len() != 27 * cin * cout {
        return Err(Error::Shape("dense conv weights must be 27 x C_in x C_out".into()));
    }
    let mut out = grid.empty_like(cout);
    let d = grid.dim as i32;
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if !grid.is_occupied(x, y, z) {
                    continue;
                }
                for co in 0..cout {
                    let mut acc = bias[co];
                    let mut k = 0;
                    for a in -1..=1 {
                        for b in -1..=1 {
                            for c in -1..=1 {
                                let (nx, ny, nz) = (x + a * dilation, y + b * dilation, z + c * dilation);
                                if grid.is_occupied(nx, ny, nz) {
                                    for ci in 0..cin {
                                        acc += grid.value(nx, ny, nz, ci) * weights[(k * cin + ci) * cout + co];
                                    }
                                }
                                k += 1;
                            }
                        }
                    }
                    out.set(x, y, z, co, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Per-cell affine map `x W + b` with `W` row-major `C_in x C_out`.
pub fn dense_affine(grid: &DenseGrid, w: &[f64], b: &[f64]) -> Result<DenseGrid> {
    let cin = grid.channels;
    let cout = b.len();
    if w.len() != cin * cout {
        return Err(Error::Shape("affine weights must be C_in x C_out".into()));
    }
    let mut out = grid.empty_like(cout);
    let d = grid.dim as i32;
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if !grid.is_occupied(x, y, z) {
                    continue;
                }
                for co in 0..cout {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        acc += grid.value(x, y, z, ci) * w[ci * cout + co];
                    }
                    out.set(x, y, z, co, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}

pub const FD_EPS: f64 = 1e-5;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&p, &q)| rel_err(p, q)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_cell_identity() {
        let coords = [VoxelCoord::new(0, 1, 1, 1)];
        let f = Matrix::from_vec(1, 2, vec![3.0, -4.0]).unwrap();
        let g = DenseGrid::from_rows(4, &coords, &f).unwrap();
        for mode in [PoolMode::Max, PoolMode::Mean] {
            assert_eq!(dense_masked_pool(&g, 1, mode).rows_at(&coords), f);
        }
        let mut w = vec![0.0; 27 * 2 * 2];
        w[(13 * 2) * 2] = 1.0;
        w[(13 * 2 + 1) * 2 + 1] = 1.0;
        assert_eq!(dense_masked_conv(&g, &w, &[0.0, 0.0], 1).unwrap().rows_at(&coords), f);
        let z = dense_masked_conv(&g, &vec![0.0; 27 * 4], &[1.5, 2.5], 1).unwrap();
        assert_eq!(z.rows_at(&coords).row(0), &[1.5, 2.5]);
    }

    #[test]
    fn full_3x3x3_max_is_global_max() {
        let mut coords = Vec::new();
        let mut vals = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    coords.push(VoxelCoord::new(0, x, y, z));
                    vals.push((x * 9 + y * 3 + z) as f64 * 0.37 % 5.0);
                }
            }
        }
        let top = vals.iter().copied().fold(f64::MIN, f64::max);
        let g = DenseGrid::from_rows(3, &coords, &Matrix::from_vec(27, 1, vals).unwrap()).unwrap();
        let p = dense_masked_pool(&g, 1, PoolMode::Max).rows_at(&coords);
        assert!(p.as_slice().iter().all(|&v| v == top));
    }

    #[test]
    fn grid_extent_is_bounded() {
        assert!(DenseGrid::new(33, 1).is_err());
        assert!(DenseGrid::new(32, 1).is_ok());
    }

    #[test]
    fn numeric_gradient_closed_forms() {
        let x = [0.3, -1.2, 4.0];
        let g = numeric_gradient(|v| v.iter().sum(), &x, FD_EPS);
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = numeric_gradient(|v| 0.5 * v.iter().map(|a| a * a).sum::<f64>(), &x, FD_EPS);
        for (a, b) in g.iter().zip(&x) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
