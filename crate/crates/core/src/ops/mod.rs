//! Differentiable sparse primitives.
//!
//! The kernels in the submodules are pure forward/backward pairs over
//! [`Matrix`] rows; the functions here record them on a [`Tape`]. Bias and
//! batch-norm affine vectors are `1 x C` matrices on the tape.

pub mod conv;
pub mod kernel_map;
pub mod nn;
pub mod pool;
pub mod tape;

use std::rc::Rc;

pub use kernel_map::{
    build_downsample_map, build_kernel_map, dilated_offsets, submanifold_map, KernelMap, OffsetSet,
    SiteMaps,
};
pub use nn::BnState;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn row_vec(v: Vec<f64>) -> Matrix {
    let n = v.len();
    Matrix::from_vec(1, n, v).expect("length matches")
}

pub fn sparse_conv(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, km: &Rc<KernelMap>) -> Result<Var> {
    let bias = b.map(|b| tape.value(b).as_slice().to_vec());
    let y = conv::conv_forward(tape.value(x), tape.value(w), bias.as_deref(), km)?;
    let xs = tape.shared(x);
    let ws = tape.shared(w);
    let km = Rc::clone(km);
    let mut inputs = vec![x, w];
    inputs.extend(b);
    let has_bias = b.is_some();
    Ok(tape.push(
        y,
        inputs,
        Box::new(move |g| {
            let gr = conv::conv_backward(g, &xs, &ws, &km).expect("shapes checked in forward");
            let mut out = vec![gr.input, gr.weights];
            if has_bias {
                out.push(row_vec(gr.bias));
            }
            out
        }),
    ))
}

pub fn sparse_maxpool(tape: &mut Tape, x: Var, km: &Rc<KernelMap>) -> Result<Var> {
    let out = pool::maxpool_forward(tape.value(x), km)?;
    let n_in = km.num_in();
    let argmax = out.argmax;
    Ok(tape.push(
        out.values,
        vec![x],
        Box::new(move |g| vec![pool::maxpool_backward(g, &argmax, n_in)]),
    ))
}

pub fn sparse_avgpool(tape: &mut Tape, x: Var, km: &Rc<KernelMap>) -> Result<Var> {
    let y = pool::avgpool_forward(tape.value(x), km)?;
    let km = Rc::clone(km);
    Ok(tape.push(y, vec![x], Box::new(move |g| vec![pool::avgpool_backward(g, &km)])))
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = nn::linear_forward(tape.value(x), tape.value(w), tape.value(b).as_slice())?;
    let xs = tape.shared(x);
    let ws = tape.shared(w);
    Ok(tape.push(
        y,
        vec![x, w, b],
        Box::new(move |g| {
            let gr = nn::linear_backward(g, &xs, &ws);
            vec![gr.input, gr.weights, row_vec(gr.bias)]
        }),
    ))
}

pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BnState,
    training: bool,
) -> Result<Var> {
    let gvals = tape.value(gamma).as_slice().to_vec();
    let (y, cache) = nn::batchnorm_forward(
        tape.value(x),
        &gvals,
        tape.value(beta).as_slice(),
        state,
        training,
    )?;
    Ok(tape.push(
        y,
        vec![x, gamma, beta],
        Box::new(move |g| {
            let gr = nn::batchnorm_backward(g, &gvals, &cache);
            vec![gr.input, row_vec(gr.gamma), row_vec(gr.beta)]
        }),
    ))
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let xs = tape.shared(x);
    let y = nn::relu_forward(&xs);
    tape.push(y, vec![x], Box::new(move |g| vec![nn::relu_backward(g, &xs)]))
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::Shape(format!(
            "add: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let mut y = tape.value(a).clone();
    y.add_assign(tape.value(b));
    Ok(tape.push(y, vec![a, b], Box::new(|g| vec![g.clone(), g.clone()])))
}

/// Elementwise product of equal-shape matrices.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.shared(a), tape.shared(b));
    if av.shape() != bv.shape() {
        return Err(Error::Shape(format!("mul: {:?} vs {:?}", av.shape(), bv.shape())));
    }
    let mut y = (*av).clone();
    for (p, q) in y.as_mut_slice().iter_mut().zip(bv.as_slice()) {
        *p *= q;
    }
    Ok(tape.push(
        y,
        vec![a, b],
        Box::new(move |g| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            for ((x, y), (p, q)) in ga
                .as_mut_slice()
                .iter_mut()
                .zip(gb.as_mut_slice())
                .zip(av.as_slice().iter().zip(bv.as_slice()))
            {
                *x *= q;
                *y *= p;
            }
            vec![ga, gb]
        }),
    ))
}

/// Scale each row of `p` by the single column `s` (`N x 1`).
pub fn mul_rows(tape: &mut Tape, s: Var, p: Var) -> Result<Var> {
    let (sv, pv) = (tape.shared(s), tape.shared(p));
    if sv.cols() != 1 || sv.rows() != pv.rows() {
        return Err(Error::Shape(format!("mul_rows: scale {:?}, values {:?}", sv.shape(), pv.shape())));
    }
    let mut y = (*pv).clone();
    for r in 0..y.rows() {
        let k = sv.get(r, 0);
        y.row_mut(r).iter_mut().for_each(|v| *v *= k);
    }
    Ok(tape.push(
        y,
        vec![s, p],
        Box::new(move |g| {
            let mut gs = Matrix::zeros(sv.rows(), 1);
            let mut gp = g.clone();
            for r in 0..g.rows() {
                let k = sv.get(r, 0);
                gs.set(r, 0, g.row(r).iter().zip(pv.row(r)).map(|(a, b)| a * b).sum());
                gp.row_mut(r).iter_mut().for_each(|v| *v *= k);
            }
            vec![gs, gp]
        }),
    ))
}

pub fn slice_cols(tape: &mut Tape, x: Var, start: usize, width: usize) -> Result<Var> {
    let (rows, cols) = tape.value(x).shape();
    if start + width > cols {
        return Err(Error::Shape(format!("slice [{start}, {}) of {cols} columns", start + width)));
    }
    let y = tape.value(x).column_slice(start, width);
    Ok(tape.push(
        y,
        vec![x],
        Box::new(move |g| {
            let mut gx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                gx.row_mut(r)[start..start + width].copy_from_slice(g.row(r));
            }
            vec![gx]
        }),
    ))
}

pub fn concat_cols(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ca = tape.value(a).cols();
    let cb = tape.value(b).cols();
    let y = Matrix::hconcat(&[tape.value(a), tape.value(b)])?;
    Ok(tape.push(
        y,
        vec![a, b],
        Box::new(move |g| vec![g.column_slice(0, ca), g.column_slice(ca, cb)]),
    ))
}

/// Mean cross-entropy over labeled rows; the returned var is a `1 x 1` loss.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[i32],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Var)> {
    let (loss, grad) = nn::softmax_cross_entropy(tape.value(logits), labels, class_weights)?;
    let v = tape.push(
        Matrix::filled(1, 1, loss),
        vec![logits],
        Box::new(move |g| vec![grad.scale(g.get(0, 0))]),
    );
    Ok((loss, v))
}
