//! Dense matrices, elementwise functions, the logistic loss, Adam / sparse-Adam
//! optimizer states, and a central finite-difference gradient oracle.
//!
//! All math is `f64`. The finite-difference checks in the test suites rely on
//! the extra headroom.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = selfᵀ · x` for a column vector `x` of length `rows`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * xr;
            }
        }
        out
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = ar * scale;
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 + exp(-y·s))` for a label `y ∈ {-1, +1}`.
#[inline]
pub fn logistic_loss(y: f64, s: f64) -> f64 {
    softplus(-y * s)
}

/// Derivative of [`logistic_loss`] with respect to the score: `-y·σ(-y·s)`.
#[inline]
pub fn logistic_loss_grad(y: f64, s: f64) -> f64 {
    -y * sigmoid(-y * s)
}

/// Pearson correlation. Returns `None` when either vector has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter matrix.
///
/// `t` is the dense step counter; `row_t` holds the per-row counters used by
/// [`sparse_adam_step`], so untouched rows keep both their moments and their
/// bias-correction clock.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub t: u64,
    pub row_t: Vec<u64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            t: 0,
            row_t: vec![0; rows],
            config,
        }
    }

    pub fn for_param(param: &DenseMatrix, config: AdamConfig) -> Self {
        Self::new(param.rows(), param.cols(), config)
    }
}

/// One elementwise Adam update at step `t` (already incremented).
#[inline]
fn adam_update_slice(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
    lr: f64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

pub fn adam_step(
    param: &mut DenseMatrix,
    grad: &DenseMatrix,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::config(format!(
            "adam shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    for r in state.row_t.iter_mut() {
        *r = state.t;
    }
    let cfg = state.config;
    adam_update_slice(
        param.as_mut_slice(),
        grad.as_slice(),
        state.m.as_mut_slice(),
        state.v.as_mut_slice(),
        state.t,
        &cfg,
        lr,
    );
    Ok(())
}

/// Sparse Adam: only the rows named in `row_grads` move, and each keeps its own
/// step counter.
pub fn sparse_adam_step(
    param: &mut DenseMatrix,
    row_grads: &BTreeMap<usize, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if param.shape() != state.m.shape() {
        return Err(Error::config(format!(
            "sparse adam shape mismatch: param {:?}, state {:?}",
            param.shape(),
            state.m.shape()
        )));
    }
    for (&row, g) in row_grads {
        if row >= param.rows() {
            return Err(Error::config(format!(
                "sparse adam row {} out of range ({} rows)",
                row,
                param.rows()
            )));
        }
        if g.len() != param.cols() {
            return Err(Error::config(format!(
                "sparse adam gradient width {} != {}",
                g.len(),
                param.cols()
            )));
        }
    }
    let cfg = state.config;
    for (&row, g) in row_grads {
        state.row_t[row] += 1;
        let t = state.row_t[row];
        adam_update_slice(
            param.row_mut(row),
            g,
            state.m.row_mut(row),
            state.v.row_mut(row),
            t,
            &cfg,
            lr,
        );
    }
    state.t = state.t.max(state.row_t.iter().copied().max().unwrap_or(0));
    Ok(())
}

/// Plain gradient step `param -= lr · grad`.
pub fn sgd_step(param: &mut DenseMatrix, grad: &DenseMatrix, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::config(format!(
            "sgd shape mismatch: param {:?}, grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn sparse_sgd_step(
    param: &mut DenseMatrix,
    row_grads: &BTreeMap<usize, Vec<f64>>,
    lr: f64,
) -> Result<()> {
    for (&row, g) in row_grads {
        if row >= param.rows() || g.len() != param.cols() {
            return Err(Error::config(format!(
                "sparse sgd row {} / width {} invalid for shape {:?}",
                row,
                g.len(),
                param.shape()
            )));
        }
        for (p, gv) in param.row_mut(row).iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

/// Central-difference gradient of `f` at `at`.
pub fn finite_diff_grad<F>(mut f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::config("finite difference step must be positive"));
    }
    let mut x = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle { coord: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_closed_forms() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid(-(3f64.ln())) - 0.25).abs() < 1e-15);
        let hi = sigmoid(700.0);
        let lo = sigmoid(-700.0);
        assert!(hi <= 1.0 && lo > 0.0 && lo.is_finite());
        assert!(sigmoid(30.0) < 1.0);
    }

    #[test]
    fn logistic_loss_values() {
        assert!((logistic_loss(1.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(1.0, 50.0) < 1e-20);
        assert!((logistic_loss(-1.0, 50.0) - 50.0).abs() < 1e-12);
        assert!(logistic_loss(-1.0, 1e6).is_finite());
    }

    #[test]
    fn adam_zero_grad_keeps_param() {
        let mut p = DenseMatrix::filled(2, 3, 0.7);
        let before = p.clone();
        let g = DenseMatrix::zeros(2, 3);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = DenseMatrix::zeros(1, 1);
        let g = DenseMatrix::filled(1, 1, 2.0);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        // lr * g / (|g| + eps)
        let expected = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-12);
        assert!((p.get(0, 0) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_two_identical_steps() {
        let lr = 0.01;
        let mut p = DenseMatrix::zeros(1, 1);
        let g = DenseMatrix::filled(1, 1, 1.0);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        let after1 = p.get(0, 0);
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        let after2 = p.get(0, 0);
        // t=2: m = 0.19, v = 0.001999; m_hat = 1, v_hat = 1.
        assert!((after1 + lr).abs() < 1e-8);
        assert!((after2 - after1 + lr).abs() < 1e-8);
        assert!(after2 < after1);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = DenseMatrix::zeros(2, 2);
        let g = DenseMatrix::zeros(2, 3);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sparse_adam_empty_and_single_row() {
        let mut p = DenseMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        sparse_adam_step(&mut p, &BTreeMap::new(), &mut st, 0.1).unwrap();
        assert_eq!(p, before);

        let mut rg = BTreeMap::new();
        rg.insert(1, vec![0.5, -0.5]);
        sparse_adam_step(&mut p, &rg, &mut st, 0.1).unwrap();
        assert_eq!(p.row(0), before.row(0));
        assert_eq!(p.row(2), before.row(2));
        assert_ne!(p.row(1), before.row(1));
        assert_eq!(st.row_t, vec![0, 1, 0]);
    }

    #[test]
    fn sparse_adam_rejects_bad_row() {
        let mut p = DenseMatrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        let mut rg = BTreeMap::new();
        rg.insert(5, vec![1.0, 1.0]);
        assert!(sparse_adam_step(&mut p, &rg, &mut st, 0.1).is_err());
    }

    #[test]
    fn sparse_matches_dense_on_one_row() {
        let mut dense = DenseMatrix::from_vec(1, 3, vec![0.1, -0.2, 0.3]).unwrap();
        let mut sparse = dense.clone();
        let g = vec![0.4, 0.0, -1.3];
        let mut sd = AdamState::for_param(&dense, AdamConfig::default());
        let mut ss = AdamState::for_param(&sparse, AdamConfig::default());
        for _ in 0..3 {
            adam_step(
                &mut dense,
                &DenseMatrix::from_vec(1, 3, g.clone()).unwrap(),
                &mut sd,
                0.05,
            )
            .unwrap();
            let mut rg = BTreeMap::new();
            rg.insert(0, g.clone());
            sparse_adam_step(&mut sparse, &rg, &mut ss, 0.05).unwrap();
        }
        assert_eq!(dense, sparse);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x| sigmoid(x[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let err = finite_diff_grad(
            |x| if x[1] > 0.5 { f64::NAN } else { 0.0 },
            &[0.0, 0.5],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle { coord: 1 }));
    }

    #[test]
    fn pearson_degenerate_is_none() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap();
        assert!(r > 0.99);
    }
}
