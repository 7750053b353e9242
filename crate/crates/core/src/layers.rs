//! Bilinear (BL) and temporal-attention bilinear (TABL) layers.
//!
//! A TABL maps `X (D x T)` to `Y (D' x T')` in five steps: feature
//! transform `X_bar = W1 X`, temporal importance `E = X_bar W` with the
//! diagonal of `W` fixed at `1/T`, row-softmax attention `A`, the soft
//! blend `X_tilde = lambda (X_bar . A) + (1 - lambda) X_bar`, and the
//! output `Y = phi(X_tilde W2 + B)`. A BL is the same layer without the
//! attention branch. Backward passes are hand-derived and checked against
//! central finite differences in the tests.

use rand::Rng;

use crate::error::{Result, TablError};
use crate::linalg::{Matrix, OpCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Softmax over each column; used by the 3x1 prediction layer.
    SoftmaxColumns,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// TABL layer parameters. `w` keeps its diagonal fixed at `1/T`: the
/// entries are stored in the matrix but masked out of every gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TablLayerParams {
    /// D' x D feature transform.
    pub w1: Matrix,
    /// T x T temporal importance; diagonal fixed, off-diagonal trainable.
    pub w: Matrix,
    /// T x T' temporal projection.
    pub w2: Matrix,
    /// D' x T' bias.
    pub b: Matrix,
    /// Attention blend in [0, 1].
    pub lambda: f64,
    pub activation: Activation,
}

/// BL layer parameters; a TABL without the attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlLayerParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b: Matrix,
    pub activation: Activation,
}

fn fan_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("init is finite")
}

impl TablLayerParams {
    /// Fan-based uniform init for weights, zero bias, `lambda = 0.5`,
    /// `w` diagonal at `1/T`.
    pub fn init(
        d: usize,
        t: usize,
        d_out: usize,
        t_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = fan_uniform(rng, t, t, t, t);
        for i in 0..t {
            w.set(i, i, 1.0 / t as f64);
        }
        Self {
            w1: fan_uniform(rng, d_out, d, d, d_out),
            w,
            w2: fan_uniform(rng, t, t_out, t, t_out),
            b: Matrix::zeros(d_out, t_out),
            lambda: 0.5,
            activation,
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.w1.cols(), self.w.rows())
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.w1.rows(), self.w2.cols())
    }
}

impl BlLayerParams {
    pub fn init(
        d: usize,
        t: usize,
        d_out: usize,
        t_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w1: fan_uniform(rng, d_out, d, d, d_out),
            w2: fan_uniform(rng, t, t_out, t, t_out),
            b: Matrix::zeros(d_out, t_out),
            activation,
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.w1.cols(), self.w2.rows())
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.w1.rows(), self.w2.cols())
    }
}

/// Intermediates stored by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Matrix,
    pub x_bar: Matrix,
    /// Attention matrix; absent for BL layers.
    pub a: Option<Matrix>,
    /// Blended features; absent for BL layers (where they equal `x_bar`).
    pub x_tilde: Option<Matrix>,
    /// Pre-activation output.
    pub z: Matrix,
}

/// Gradients of one TABL layer. `w` carries a zero diagonal.
#[derive(Debug, Clone)]
pub struct TablGrads {
    pub w1: Matrix,
    pub w: Matrix,
    pub w2: Matrix,
    pub b: Matrix,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct BlGrads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub b: Matrix,
}

pub(crate) fn apply_activation(activation: Activation, z: &Matrix) -> Matrix {
    match activation {
        Activation::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Identity => z.clone(),
        Activation::SoftmaxColumns => z.transpose().row_softmax().transpose(),
    }
}

/// Gradient through the activation: maps dL/dY to dL/dZ.
pub(crate) fn activation_backward(activation: Activation, z: &Matrix, dy: &Matrix) -> Matrix {
    match activation {
        Activation::Identity => dy.clone(),
        Activation::Relu => {
            let mut dz = dy.clone();
            for (g, &v) in dz.data_mut().iter_mut().zip(z.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            dz
        }
        Activation::SoftmaxColumns => {
            let y = apply_activation(activation, z);
            let mut dz = Matrix::zeros(z.rows(), z.cols());
            for c in 0..z.cols() {
                let dot: f64 = (0..z.rows()).map(|r| dy.get(r, c) * y.get(r, c)).sum();
                for r in 0..z.rows() {
                    dz.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                }
            }
            dz
        }
    }
}

/// Row-wise softmax Jacobian product: dE from dA given A.
pub(crate) fn row_softmax_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut de = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let dot: f64 = a.row(r).iter().zip(da.row(r)).map(|(&av, &gv)| av * gv).sum();
        for c in 0..a.cols() {
            de.set(r, c, a.get(r, c) * (da.get(r, c) - dot));
        }
    }
    de
}

fn check_input_shape(expected: (usize, usize), x: &Matrix) -> Result<()> {
    if x.shape() != expected {
        return Err(TablError::Shape(format!(
            "layer expects {}x{} input, got {}x{}",
            expected.0,
            expected.1,
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// TABL forward pass. With a counter, the pass costs
/// `D D' T + D' T T + D' T T' + 2 D' T'` MACs (the attention softmax and
/// blend are not part of the counted cost model).
pub fn tabl_forward(
    p: &TablLayerParams,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    check_input_shape(p.input_shape(), x)?;
    let x_bar = p.w1.matmul(x, counter.as_deref_mut())?;
    let e = x_bar.matmul(&p.w, counter.as_deref_mut())?;
    let a = e.row_softmax();
    let attended = x_bar.hadamard(&a)?;
    let x_tilde = attended.scale(p.lambda).add(&x_bar.scale(1.0 - p.lambda))?;
    let z = x_tilde.matmul(&p.w2, counter.as_deref_mut())?.add(&p.b)?;
    if let Some(c) = counter {
        c.add_macs(2 * (z.rows() * z.cols()) as u64);
    }
    let y = apply_activation(p.activation, &z);
    let cache = match mode {
        Mode::Train => Some(LayerCache { x: x.clone(), x_bar, a: Some(a), x_tilde: Some(x_tilde), z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

/// BL forward pass: `Y = phi(W1 X W2 + B)`.
pub fn bl_forward(
    p: &BlLayerParams,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    check_input_shape(p.input_shape(), x)?;
    let x_bar = p.w1.matmul(x, counter.as_deref_mut())?;
    let z = x_bar.matmul(&p.w2, counter.as_deref_mut())?.add(&p.b)?;
    if let Some(c) = counter {
        c.add_macs(2 * (z.rows() * z.cols()) as u64);
    }
    let y = apply_activation(p.activation, &z);
    let cache = match mode {
        Mode::Train => Some(LayerCache { x: x.clone(), x_bar, a: None, x_tilde: None, z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

pub(crate) fn zero_diagonal(m: &mut Matrix) {
    let n = m.rows().min(m.cols());
    for i in 0..n {
        m.set(i, i, 0.0);
    }
}

/// Shared upstream stage of the TABL backward pass: from dY back to
/// dX_bar, producing the W2/B/W/lambda gradients along the way.
pub(crate) fn tabl_backward_to_xbar(
    w2: &Matrix,
    w: &Matrix,
    lambda: f64,
    activation: Activation,
    cache: &LayerCache,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, f64, Matrix)> {
    let a = cache.a.as_ref().ok_or_else(|| TablError::State("cache lacks attention matrix".into()))?;
    let x_tilde = cache
        .x_tilde
        .as_ref()
        .ok_or_else(|| TablError::State("cache lacks blended features".into()))?;
    let dz = activation_backward(activation, &cache.z, dy);
    let db = dz.clone();
    let dw2 = x_tilde.transpose().matmul(&dz, None)?;
    let dx_tilde = dz.matmul(&w2.transpose(), None)?;
    // d lambda: X_tilde = lambda (X_bar . A) + (1 - lambda) X_bar.
    let attended = cache.x_bar.hadamard(a)?;
    let dlambda = dx_tilde.hadamard(&attended.sub(&cache.x_bar)?)?.sum();
    let da = dx_tilde.hadamard(&cache.x_bar)?.scale(lambda);
    let dx_bar_blend = dx_tilde
        .hadamard(a)?
        .scale(lambda)
        .add(&dx_tilde.scale(1.0 - lambda))?;
    let de = row_softmax_backward(a, &da);
    let mut dw = cache.x_bar.transpose().matmul(&de, None)?;
    zero_diagonal(&mut dw);
    let dx_bar = dx_bar_blend.add(&de.matmul(&w.transpose(), None)?)?;
    Ok((dw2, db, dw, dlambda, dx_bar))
}

/// TABL backward pass. Returns parameter gradients and dX. The diagonal
/// of the `w` gradient is identically zero.
pub fn tabl_backward(
    p: &TablLayerParams,
    cache: &LayerCache,
    dy: &Matrix,
) -> Result<(TablGrads, Matrix)> {
    let (dw2, db, dw, dlambda, dx_bar) =
        tabl_backward_to_xbar(&p.w2, &p.w, p.lambda, p.activation, cache, dy)?;
    let dw1 = dx_bar.matmul(&cache.x.transpose(), None)?;
    let dx = p.w1.transpose().matmul(&dx_bar, None)?;
    Ok((TablGrads { w1: dw1, w: dw, w2: dw2, b: db, lambda: dlambda }, dx))
}

/// Shared upstream stage of the BL backward pass.
pub(crate) fn bl_backward_to_xbar(
    w2: &Matrix,
    activation: Activation,
    cache: &LayerCache,
    dy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let dz = activation_backward(activation, &cache.z, dy);
    let db = dz.clone();
    let dw2 = cache.x_bar.transpose().matmul(&dz, None)?;
    let dx_bar = dz.matmul(&w2.transpose(), None)?;
    Ok((dw2, db, dx_bar))
}

pub fn bl_backward(p: &BlLayerParams, cache: &LayerCache, dy: &Matrix) -> Result<(BlGrads, Matrix)> {
    let (dw2, db, dx_bar) = bl_backward_to_xbar(&p.w2, p.activation, cache, dy)?;
    let dw1 = dx_bar.matmul(&cache.x.transpose(), None)?;
    let dx = p.w1.transpose().matmul(&dx_bar, None)?;
    Ok((BlGrads { w1: dw1, w2: dw2, b: db }, dx))
}
