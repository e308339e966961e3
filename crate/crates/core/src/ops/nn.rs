//! Row-wise primitives: affine maps, batch norm, ReLU, cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `x W + b` with `W: C_in x C_out`.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::Shape(format!(
            "linear: input {:?}, weights {:?}, bias {}",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let y = out.row_mut(r);
        y.copy_from_slice(b);
        for (k, &xv) in x.row(r).iter().enumerate() {
            for (yv, &wv) in y.iter_mut().zip(w.row(k)) {
                *yv += xv * wv;
            }
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

pub fn linear_backward(gy: &Matrix, x: &Matrix, w: &Matrix) -> LinearGrads {
    let (cin, cout) = w.shape();
    let mut gx = Matrix::zeros(x.rows(), cin);
    let mut gw = Matrix::zeros(cin, cout);
    let mut gb = vec![0.0; cout];
    for r in 0..x.rows() {
        let gyr = gy.row(r);
        for (k, g) in gx.row_mut(r).iter_mut().enumerate() {
            *g = gyr.iter().zip(w.row(k)).map(|(a, b)| a * b).sum();
        }
        for (k, &xv) in x.row(r).iter().enumerate() {
            for (d, &g) in gw.row_mut(k).iter_mut().zip(gyr) {
                *d += xv * g;
            }
        }
        for (d, &g) in gb.iter_mut().zip(gyr) {
            *d += g;
        }
    }
    LinearGrads {
        input: gx,
        weights: gw,
        bias: gb,
    }
}

/// Running statistics and hyper-parameters of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Cached quantities needed by [`batchnorm_backward`].
pub struct BnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

/// Per-channel normalization over all rows. Training mode uses the batch
/// statistics (biased variance) and folds them into the running averages.
pub fn batchnorm_forward(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BnState,
    training: bool,
) -> Result<(Matrix, BnCache)> {
    let (n, c) = x.shape();
    if gamma.len() != c || beta.len() != c || state.running_mean.len() != c {
        return Err(Error::Shape("batch norm channel count mismatch".into()));
    }
    if !(state.eps > 0.0) {
        return Err(Error::InvalidInput("batch norm epsilon must be positive".into()));
    }
    let (mean, var) = if training {
        if n == 0 {
            return Err(Error::InvalidInput("batch norm over an empty tensor in training mode".into()));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let mom = state.momentum;
        for ch in 0..c {
            state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mean[ch];
            state.running_var[ch] = (1.0 - mom) * state.running_var[ch] + mom * var[ch];
        }
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, c);
    let mut y = Matrix::zeros(n, c);
    for r in 0..n {
        for ch in 0..c {
            let h = (x.get(r, ch) - mean[ch]) * inv_std[ch];
            xhat.set(r, ch, h);
            y.set(r, ch, gamma[ch] * h + beta[ch]);
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            training,
        },
    ))
}

pub struct BnGrads {
    pub input: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batchnorm_backward(gy: &Matrix, gamma: &[f64], cache: &BnCache) -> BnGrads {
    let (n, c) = gy.shape();
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for r in 0..n {
        for ch in 0..c {
            let g = gy.get(r, ch);
            gbeta[ch] += g;
            ggamma[ch] += g * cache.xhat.get(r, ch);
        }
    }
    let mut gx = Matrix::zeros(n, c);
    let nf = n as f64;
    for r in 0..n {
        for ch in 0..c {
            let g = gy.get(r, ch);
            let v = if cache.training {
                gamma[ch] * cache.inv_std[ch] / nf * (nf * g - gbeta[ch] - cache.xhat.get(r, ch) * ggamma[ch])
            } else {
                gamma[ch] * cache.inv_std[ch] * g
            };
            gx.set(r, ch, v);
        }
    }
    BnGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(gy: &Matrix, x: &Matrix) -> Matrix {
    let mut g = gy.clone();
    for (gv, &xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Weighted mean negative log-softmax over rows with `label >= 0`.
///
/// Returns the loss and its gradient w.r.t. the logits. The normalizer is the
/// sum of the per-row class weights (the row count when unweighted); rows
/// labeled `-1` contribute nothing.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    labels: &[i32],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape("one label per logit row required".into()));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(Error::Shape("one class weight per class required".into()));
        }
    }
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut probs = vec![0.0; k];
    for r in 0..n {
        let l = labels[r];
        if l < 0 {
            continue;
        }
        let l = l as usize;
        if l >= k {
            return Err(Error::InvalidInput(format!("label {l} >= {k} classes")));
        }
        let wt = class_weights.map_or(1.0, |w| w[l]);
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in probs.iter_mut().zip(row) {
            *p = (v - mx).exp();
            z += *p;
        }
        total += wt * (z.ln() + mx - row[l]);
        norm += wt;
        let gr = grad.row_mut(r);
        for (g, p) in gr.iter_mut().zip(&probs) {
            *g = wt * p / z;
        }
        gr[l] -= wt;
    }
    if norm == 0.0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / norm;
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_bias() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(linear_forward(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap(), x);
        let y = linear_forward(&Matrix::zeros(3, 2), &Matrix::filled(2, 3, 9.0), &[1.0, 2.0, 3.0]).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn bn_eval_and_constant_training() {
        let x = Matrix::from_vec(2, 1, vec![2.0, -1.0]).unwrap();
        let mut st = BnState::new(1);
        let (y, _) = batchnorm_forward(&x, &[1.0], &[0.0], &mut st, false).unwrap();
        let s = (1.0f64 + 1e-5).sqrt();
        assert_eq!(y.as_slice(), &[2.0 / s, -1.0 / s]);

        let x = Matrix::filled(5, 2, 3.5);
        let mut st = BnState::new(2);
        let (y, _) = batchnorm_forward(&x, &[2.0, 0.5], &[0.25, -1.0], &mut st, true).unwrap();
        for r in 0..5 {
            assert_eq!(y.row(r), &[0.25, -1.0]);
        }
        assert!((st.running_mean[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn bn_empty_training_errors_and_single_row_ok() {
        let mut st = BnState::new(1);
        assert!(batchnorm_forward(&Matrix::zeros(0, 1), &[1.0], &[0.0], &mut st, true).is_err());
        let (y, _) = batchnorm_forward(&Matrix::filled(1, 1, 4.0), &[1.0], &[0.5], &mut st, true).unwrap();
        assert_eq!(y.as_slice(), &[0.5]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let logits = Matrix::filled(4, 20, 0.3);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 5, 19, 7], None).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
        assert!((loss - 2.9957).abs() < 1e-4);

        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 1, 1000.0);
        let (loss, _) = softmax_cross_entropy(&logits, &[1], None).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_unlabeled() {
        let logits = Matrix::from_vec(2, 2, vec![1.0, 0.0, 5.0, -5.0]).unwrap();
        let (a, ga) = softmax_cross_entropy(&logits, &[0, -1], None).unwrap();
        let (b, _) = softmax_cross_entropy(&logits.column_slice(0, 2), &[0, -1], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga.row(1), &[0.0, 0.0]);
        let (z, gz) = softmax_cross_entropy(&logits, &[-1, -1], None).unwrap();
        assert_eq!(z, 0.0);
        assert!(gz.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_zero_gradient_at_nonpositive() {
        let x = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&Matrix::filled(1, 3, 1.0), &x);
        assert_eq!(g.as_slice(), &[0.0, 0.0, 1.0]);
    }
}
