//! Occupancy-aware dilated pooling.
//!
//! The neighbor set of an output site is exactly its kernel-map matches; absent
//! sites are never padded. With an offset set containing the origin and
//! submanifold outputs, every output has at least itself as a neighbor.

use super::kernel_map::KernelMap;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub struct MaxPoolOutput {
    pub values: Matrix,
    /// Winning input row per `(out_row, channel)`, row-major.
    pub argmax: Vec<u32>,
}

pub fn maxpool_forward(x: &Matrix, km: &KernelMap) -> Result<MaxPoolOutput> {
    if x.rows() != km.num_in() {
        return Err(Error::Shape("pool input rows differ from kernel map".into()));
    }
    let c = x.cols();
    let n_out = km.num_out();
    let mut values = Matrix::zeros(n_out, c);
    let mut argmax = vec![u32::MAX; n_out * c];
    for o in 0..n_out {
        let out = values.row_mut(o);
        let arg = &mut argmax[o * c..(o + 1) * c];
        for (i, _) in km.for_out(o) {
            let xr = x.row(i);
            for ch in 0..c {
                let v = xr[ch];
                let best = arg[ch];
                if best == u32::MAX || v > out[ch] || (v == out[ch] && (i as u32) < best) {
                    out[ch] = v;
                    arg[ch] = i as u32;
                }
            }
        }
        if c > 0 && arg[0] == u32::MAX {
            return Err(Error::Invariant(format!("output row {o} has no pooling neighbors")));
        }
    }
    Ok(MaxPoolOutput { values, argmax })
}

/// Route each upstream entry to its recorded argmax row.
pub fn maxpool_backward(gy: &Matrix, argmax: &[u32], num_in: usize) -> Matrix {
    let c = gy.cols();
    let mut gx = Matrix::zeros(num_in, c);
    for o in 0..gy.rows() {
        for ch in 0..c {
            let g = gy.get(o, ch);
            if g != 0.0 {
                let i = argmax[o * c + ch] as usize;
                gx.row_mut(i)[ch] += g;
            }
        }
    }
    gx
}

pub fn avgpool_forward(x: &Matrix, km: &KernelMap) -> Result<Matrix> {
    if x.rows() != km.num_in() {
        return Err(Error::Shape("pool input rows differ from kernel map".into()));
    }
    let c = x.cols();
    let mut out = Matrix::zeros(km.num_out(), c);
    for o in 0..km.num_out() {
        let deg = km.out_degree(o);
        if deg == 0 {
            return Err(Error::Invariant(format!("output row {o} has no pooling neighbors")));
        }
        let y = out.row_mut(o);
        for (i, _) in km.for_out(o) {
            for (a, b) in y.iter_mut().zip(x.row(i)) {
                *a += b;
            }
        }
        let k = deg as f64;
        for a in y.iter_mut() {
            *a /= k;
        }
    }
    Ok(out)
}

/// Uniform split of each upstream row over that output's contributors.
pub fn avgpool_backward(gy: &Matrix, km: &KernelMap) -> Matrix {
    let c = gy.cols();
    let mut gx = Matrix::zeros(km.num_in(), c);
    for i in 0..km.num_in() {
        let gr = gx.row_mut(i);
        for (o, _) in km.for_in(i) {
            let k = km.out_degree(o) as f64;
            for (a, b) in gr.iter_mut().zip(gy.row(o)) {
                *a += b / k;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::kernel_map::{build_kernel_map, dilated_offsets};
    use crate::voxel::{CoordIndex, VoxelCoord};

    fn map(coords: &[VoxelCoord], d: u32) -> KernelMap {
        let idx = CoordIndex::build(coords).unwrap();
        build_kernel_map(&idx, coords.len(), coords, &dilated_offsets(d).unwrap()).unwrap()
    }

    #[test]
    fn isolated_voxel_is_identity() {
        let c = [VoxelCoord::new(0, 0, 0, 0)];
        let km = map(&c, 1);
        let x = Matrix::from_vec(1, 3, vec![-2.0, 0.5, 7.0]).unwrap();
        assert_eq!(maxpool_forward(&x, &km).unwrap().values, x);
        assert_eq!(avgpool_forward(&x, &km).unwrap(), x);
    }

    #[test]
    fn two_voxels_at_dilation_distance() {
        let c = [VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 0, 3, 0)];
        let km = map(&c, 3);
        let x = Matrix::from_vec(2, 2, vec![1.0, 5.0, 4.0, -1.0]).unwrap();
        let y = maxpool_forward(&x, &km).unwrap().values;
        assert_eq!(y.row(0), &[4.0, 5.0]);
        assert_eq!(y.row(1), &[4.0, 5.0]);
        // at dilation 1 they do not see each other
        let y1 = maxpool_forward(&x, &map(&c, 1)).unwrap().values;
        assert_eq!(y1, x);
    }

    #[test]
    fn avg_of_mutual_neighbors() {
        let c = [VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 1, 0, 0)];
        let x = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let y = avgpool_forward(&x, &map(&c, 1)).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn ties_route_to_smallest_row() {
        let c = [VoxelCoord::new(0, 0, 0, 0), VoxelCoord::new(0, 1, 0, 0)];
        let km = map(&c, 1);
        let x = Matrix::from_vec(2, 1, vec![3.0, 3.0]).unwrap();
        let out = maxpool_forward(&x, &km).unwrap();
        assert_eq!(out.argmax, vec![0, 0]);
        let gx = maxpool_backward(&Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(), &out.argmax, 2);
        assert_eq!(gx.as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let c: Vec<_> = (0..4).flat_map(|x| (0..4).map(move |y| VoxelCoord::new(0, x, y, 0))).collect();
        let x = Matrix::filled(c.len(), 2, 0.25);
        for d in [1, 3] {
            let km = map(&c, d);
            assert_eq!(maxpool_forward(&x, &km).unwrap().values, x);
            assert_eq!(avgpool_forward(&x, &km).unwrap(), x);
        }
    }
}
