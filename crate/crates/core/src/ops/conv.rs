//! Sparse convolution driven by a [`KernelMap`].
//!
//! Weights are stored as a `(K * C_in) x C_out` matrix; block `s` holds the
//! `C_in x C_out` kernel of offset slot `s`.

use rayon::prelude::*;

use super::kernel_map::KernelMap;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn check_shapes(x: &Matrix, w: &Matrix, km: &KernelMap) -> Result<usize> {
    if x.rows() != km.num_in() {
        return Err(Error::Shape(format!("input has {} rows, kernel map expects {}", x.rows(), km.num_in())));
    }
    let cin = x.cols();
    if w.rows() != km.num_slots() * cin {
        return Err(Error::Shape(format!(
            "weights have {} rows, expected {} slots x {} channels",
            w.rows(),
            km.num_slots(),
            cin
        )));
    }
    Ok(cin)
}

/// `out[o] = bias + sum over (i, o, s) of x[i] * W_s`.
pub fn conv_forward(x: &Matrix, w: &Matrix, bias: Option<&[f64]>, km: &KernelMap) -> Result<Matrix> {
    let cin = check_shapes(x, w, km)?;
    let cout = w.cols();
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape("bias length differs from output channels".into()));
        }
    }
    let mut out = Matrix::zeros(km.num_out(), cout);
    if cout == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(cout)
        .with_min_len(64)
        .enumerate()
        .for_each(|(o, y)| {
            if let Some(b) = bias {
                y.copy_from_slice(b);
            }
            for (i, s) in km.for_out(o) {
                let xr = x.row(i);
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = w.row(s * cin + ci);
                    for (yv, &wv) in y.iter_mut().zip(wr) {
                        *yv += xv * wv;
                    }
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Exact transpose-scatter gradients of [`conv_forward`].
pub fn conv_backward(gy: &Matrix, x: &Matrix, w: &Matrix, km: &KernelMap) -> Result<ConvGrads> {
    let cin = check_shapes(x, w, km)?;
    let cout = w.cols();
    if gy.shape() != (km.num_out(), cout) {
        return Err(Error::Shape("upstream gradient shape differs from conv output".into()));
    }

    let mut gx = Matrix::zeros(x.rows(), cin);
    if cin > 0 {
        gx.as_mut_slice()
            .par_chunks_mut(cin)
            .with_min_len(64)
            .enumerate()
            .for_each(|(i, gxr)| {
                for (o, s) in km.for_in(i) {
                    let gyr = gy.row(o);
                    for (ci, g) in gxr.iter_mut().enumerate() {
                        let wr = w.row(s * cin + ci);
                        let mut acc = 0.0;
                        for (a, b) in gyr.iter().zip(wr) {
                            acc += a * b;
                        }
                        *g += acc;
                    }
                }
            });
    }

    let mut gw = Matrix::zeros(w.rows(), cout);
    if cin * cout > 0 {
        gw.as_mut_slice()
            .par_chunks_mut(cin * cout)
            .enumerate()
            .for_each(|(s, block)| {
                for (i, o) in km.for_slot(s) {
                    let xr = x.row(i);
                    let gyr = gy.row(o);
                    for (ci, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let dst = &mut block[ci * cout..(ci + 1) * cout];
                        for (d, &g) in dst.iter_mut().zip(gyr) {
                            *d += xv * g;
                        }
                    }
                }
            });
    }

    let mut gb = vec![0.0; cout];
    for o in 0..gy.rows() {
        for (b, &g) in gb.iter_mut().zip(gy.row(o)) {
            *b += g;
        }
    }
    Ok(ConvGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::kernel_map::{build_kernel_map, dilated_offsets};
    use crate::voxel::{CoordIndex, VoxelCoord};

    fn single() -> (Vec<VoxelCoord>, KernelMap) {
        let c = vec![VoxelCoord::new(0, 2, 2, 2)];
        let idx = CoordIndex::build(&c).unwrap();
        let km = build_kernel_map(&idx, 1, &c, &dilated_offsets(1).unwrap()).unwrap();
        (c, km)
    }

    #[test]
    fn identity_kernel_on_isolated_voxel() {
        let (_, km) = single();
        let mut w = Matrix::zeros(27 * 2, 2);
        w.set(13 * 2, 0, 1.0);
        w.set(13 * 2 + 1, 1, 1.0);
        let x = Matrix::from_vec(1, 2, vec![0.7, -1.5]).unwrap();
        let y = conv_forward(&x, &w, Some(&[0.0, 0.0]), &km).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let (_, km) = single();
        let w = Matrix::zeros(27 * 3, 2);
        let x = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = conv_forward(&x, &w, Some(&[0.5, -0.25]), &km).unwrap();
        assert_eq!(y.row(0), &[0.5, -0.25]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (_, km) = single();
        let w = Matrix::zeros(27 * 3, 2);
        let x = Matrix::zeros(1, 2);
        assert!(matches!(conv_forward(&x, &w, None, &km), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (_, km) = single();
        let w = Matrix::filled(27 * 2, 3, 0.3);
        let x = Matrix::filled(1, 2, 1.0);
        let g = conv_backward(&Matrix::zeros(1, 3), &x, &w, &km).unwrap();
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }
}
