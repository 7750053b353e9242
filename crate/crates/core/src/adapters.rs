//! Low-rank auxiliary connections over frozen base layers.
//!
//! Each weight matrix of a pre-trained layer gets a parallel trainable
//! connection `L R` of rank at most K: `W1 + L1 R1`, `W + L R`,
//! `W2 + L2 R2`. Two forward strategies compute the same function:
//!
//! - IS1 materializes the factor products, adds them into the base
//!   weights, and runs the plain layer on the combined weights;
//! - IS2 never materializes them, multiplying through the factors
//!   left-to-right (`W1 X + L1 (R1 X)` and so on).
//!
//! After training, [`fold_tabl`]/[`fold_bl`] bake the factors into the
//! base weights so deployment costs exactly what the base layer costs.

use rand::Rng;

use crate::error::{Result, TablError};
use crate::layers::{self, BlLayerParams, LayerCache, Mode, TablLayerParams};
use crate::linalg::{Matrix, OpCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Is1,
    Is2,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Is1 => "is1",
            Strategy::Is2 => "is2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "is1" => Ok(Strategy::Is1),
            "is2" => Ok(Strategy::Is2),
            other => Err(TablError::Config(format!("unknown strategy '{other}' (expected is1|is2)"))),
        }
    }
}

/// Rank-K factor pairs for one layer. The attention pair `l`/`r` is
/// present only when the wrapped layer has an attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxFactors {
    /// D' x K
    pub l1: Matrix,
    /// K x D
    pub r1: Matrix,
    /// T x K, TABL only.
    pub l: Option<Matrix>,
    /// K x T, TABL only.
    pub r: Option<Matrix>,
    /// T x K
    pub l2: Matrix,
    /// K x T'
    pub r2: Matrix,
    pub rank: usize,
}

fn small_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1e-2..1e-2)).collect();
    Matrix::from_vec(rows, cols, data).expect("init is finite")
}

/// Largest admissible rank for a TABL layer of the given shape.
pub fn max_rank_tabl(d: usize, t: usize, d_out: usize, t_out: usize) -> usize {
    d.min(d_out).min(t).min(t_out)
}

pub fn max_rank_bl(d: usize, t: usize, d_out: usize, t_out: usize) -> usize {
    max_rank_tabl(d, t, d_out, t_out)
}

impl AuxFactors {
    /// L factors start small, R factors start at zero, so the auxiliary
    /// products vanish and training begins exactly at the base model.
    pub fn init_tabl(
        d: usize,
        t: usize,
        d_out: usize,
        t_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let max = max_rank_tabl(d, t, d_out, t_out);
        if k == 0 || k > max {
            return Err(TablError::Config(format!(
                "rank {k} outside 1..={max} for layer ({d},{t})->({d_out},{t_out})"
            )));
        }
        Ok(Self {
            l1: small_uniform(rng, d_out, k),
            r1: Matrix::zeros(k, d),
            l: Some(small_uniform(rng, t, k)),
            r: Some(Matrix::zeros(k, t)),
            l2: small_uniform(rng, t, k),
            r2: Matrix::zeros(k, t_out),
            rank: k,
        })
    }

    pub fn init_bl(
        d: usize,
        t: usize,
        d_out: usize,
        t_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let max = max_rank_bl(d, t, d_out, t_out);
        if k == 0 || k > max {
            return Err(TablError::Config(format!(
                "rank {k} outside 1..={max} for layer ({d},{t})->({d_out},{t_out})"
            )));
        }
        Ok(Self {
            l1: small_uniform(rng, d_out, k),
            r1: Matrix::zeros(k, d),
            l: None,
            r: None,
            l2: small_uniform(rng, t, k),
            r2: Matrix::zeros(k, t_out),
            rank: k,
        })
    }

    pub fn w1_aux(&self, counter: Option<&mut OpCounter>) -> Matrix {
        self.l1.matmul(&self.r1, counter).expect("factor shapes agree")
    }

    pub fn w_aux(&self, counter: Option<&mut OpCounter>) -> Option<Matrix> {
        match (&self.l, &self.r) {
            (Some(l), Some(r)) => Some(l.matmul(r, counter).expect("factor shapes agree")),
            _ => None,
        }
    }

    pub fn w2_aux(&self, counter: Option<&mut OpCounter>) -> Matrix {
        self.l2.matmul(&self.r2, counter).expect("factor shapes agree")
    }

    /// Number of stored auxiliary values.
    pub fn param_count(&self) -> usize {
        let mut n = self.l1.data().len() + self.r1.data().len();
        n += self.l2.data().len() + self.r2.data().len();
        if let (Some(l), Some(r)) = (&self.l, &self.r) {
            n += l.data().len() + r.data().len();
        }
        n
    }

    /// Embeds these factors in a higher rank by zero-padding; the
    /// represented auxiliary matrices are unchanged.
    pub fn pad_to_rank(&self, k: usize) -> Result<Self> {
        if k < self.rank {
            return Err(TablError::Config(format!(
                "cannot pad rank {} down to {k}",
                self.rank
            )));
        }
        let pad_cols = |m: &Matrix| {
            let mut out = Matrix::zeros(m.rows(), k);
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    out.set(r, c, m.get(r, c));
                }
            }
            out
        };
        let pad_rows = |m: &Matrix| {
            let mut out = Matrix::zeros(k, m.cols());
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    out.set(r, c, m.get(r, c));
                }
            }
            out
        };
        Ok(Self {
            l1: pad_cols(&self.l1),
            r1: pad_rows(&self.r1),
            l: self.l.as_ref().map(&pad_cols),
            r: self.r.as_ref().map(&pad_rows),
            l2: pad_cols(&self.l2),
            r2: pad_rows(&self.r2),
            rank: k,
        })
    }
}

/// Stored auxiliary value count for a TABL layer of the given shape.
pub fn aux_param_count_tabl(d: usize, t: usize, d_out: usize, t_out: usize, k: usize) -> usize {
    k * (d_out + d) + k * (t + t) + k * (t + t_out)
}

pub fn aux_param_count_bl(d: usize, t: usize, d_out: usize, t_out: usize, k: usize) -> usize {
    let _ = t;
    k * (d_out + d) + k * (t + t_out)
}

/// A frozen TABL plus trainable factors.
#[derive(Debug, Clone)]
pub struct AugmentedTablLayer {
    pub base: TablLayerParams,
    pub aux: AuxFactors,
    pub strategy: Strategy,
    /// When set, lambda is adapted alongside the factors; by default it
    /// stays frozen with the base.
    pub train_lambda: bool,
}

#[derive(Debug, Clone)]
pub struct AugmentedBlLayer {
    pub base: BlLayerParams,
    pub aux: AuxFactors,
    pub strategy: Strategy,
}

/// Factor gradients; base weights never receive gradients.
#[derive(Debug, Clone)]
pub struct AuxGrads {
    pub l1: Matrix,
    pub r1: Matrix,
    pub l: Option<Matrix>,
    pub r: Option<Matrix>,
    pub l2: Matrix,
    pub r2: Matrix,
    pub lambda: Option<f64>,
}

/// Adds the materialized factor products into the base weights. Shared
/// by IS1 and the deployment fold, so both produce bit-identical layers.
fn materialize_tabl(
    base: &TablLayerParams,
    aux: &AuxFactors,
    mut counter: Option<&mut OpCounter>,
) -> Result<TablLayerParams> {
    let w1 = base.w1.add(&aux.w1_aux(counter.as_deref_mut()))?;
    let w = match aux.w_aux(counter.as_deref_mut()) {
        Some(wa) => base.w.add(&wa)?,
        None => base.w.clone(),
    };
    let w2 = base.w2.add(&aux.w2_aux(counter.as_deref_mut()))?;
    Ok(TablLayerParams {
        w1,
        w,
        w2,
        b: base.b.clone(),
        lambda: base.lambda,
        activation: base.activation,
    })
}

fn materialize_bl(
    base: &BlLayerParams,
    aux: &AuxFactors,
    mut counter: Option<&mut OpCounter>,
) -> Result<BlLayerParams> {
    Ok(BlLayerParams {
        w1: base.w1.add(&aux.w1_aux(counter.as_deref_mut()))?,
        w2: base.w2.add(&aux.w2_aux(counter.as_deref_mut()))?,
        b: base.b.clone(),
        activation: base.activation,
    })
}

/// Deployment-time fold: a plain layer that computes exactly what the
/// augmented layer computes, at the base layer's cost and size. The
/// folded `w` diagonal absorbs the factor product, so it is no longer
/// `1/T` in general.
pub fn fold_tabl(layer: &AugmentedTablLayer) -> Result<TablLayerParams> {
    materialize_tabl(&layer.base, &layer.aux, None)
}

pub fn fold_bl(layer: &AugmentedBlLayer) -> Result<BlLayerParams> {
    materialize_bl(&layer.base, &layer.aux, None)
}

/// IS1 forward: materialize the combined weights, then run the plain
/// layer. Counted cost is the plain-layer cost plus the factor
/// materialization `K (D' D + T T + T T')`.
pub fn aug_tabl_forward_is1(
    layer: &AugmentedTablLayer,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    let folded = materialize_tabl(&layer.base, &layer.aux, counter.as_deref_mut())?;
    layers::tabl_forward(&folded, x, mode, counter)
}

/// IS2 forward: multiply through the factors without materializing them,
/// left-to-right as written.
pub fn aug_tabl_forward_is2(
    layer: &AugmentedTablLayer,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    let base = &layer.base;
    let aux = &layer.aux;
    if x.shape() != base.input_shape() {
        return Err(TablError::Shape(format!(
            "layer expects {}x{} input, got {}x{}",
            base.input_shape().0,
            base.input_shape().1,
            x.rows(),
            x.cols()
        )));
    }
    let r1x = aux.r1.matmul(x, counter.as_deref_mut())?;
    let x_bar = base
        .w1
        .matmul(x, counter.as_deref_mut())?
        .add(&aux.l1.matmul(&r1x, counter.as_deref_mut())?)?;
    let (l, r) = (aux.l.as_ref().unwrap(), aux.r.as_ref().unwrap());
    let xbar_l = x_bar.matmul(l, counter.as_deref_mut())?;
    let e = x_bar
        .matmul(&base.w, counter.as_deref_mut())?
        .add(&xbar_l.matmul(r, counter.as_deref_mut())?)?;
    let a = e.row_softmax();
    let attended = x_bar.hadamard(&a)?;
    let x_tilde = attended.scale(base.lambda).add(&x_bar.scale(1.0 - base.lambda))?;
    let xt_l2 = x_tilde.matmul(&aux.l2, counter.as_deref_mut())?;
    let z = x_tilde
        .matmul(&base.w2, counter.as_deref_mut())?
        .add(&xt_l2.matmul(&aux.r2, counter.as_deref_mut())?)?
        .add(&base.b)?;
    if let Some(c) = counter {
        c.add_macs(2 * (z.rows() * z.cols()) as u64);
    }
    let y = layers::apply_activation(base.activation, &z);
    let cache = match mode {
        Mode::Train => Some(LayerCache { x: x.clone(), x_bar, a: Some(a), x_tilde: Some(x_tilde), z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

pub fn aug_tabl_forward(
    layer: &AugmentedTablLayer,
    x: &Matrix,
    mode: Mode,
    counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    match layer.strategy {
        Strategy::Is1 => aug_tabl_forward_is1(layer, x, mode, counter),
        Strategy::Is2 => aug_tabl_forward_is2(layer, x, mode, counter),
    }
}

pub fn aug_bl_forward_is1(
    layer: &AugmentedBlLayer,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    let folded = materialize_bl(&layer.base, &layer.aux, counter.as_deref_mut())?;
    layers::bl_forward(&folded, x, mode, counter)
}

pub fn aug_bl_forward_is2(
    layer: &AugmentedBlLayer,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    let base = &layer.base;
    let aux = &layer.aux;
    if x.shape() != base.input_shape() {
        return Err(TablError::Shape(format!(
            "layer expects {}x{} input, got {}x{}",
            base.input_shape().0,
            base.input_shape().1,
            x.rows(),
            x.cols()
        )));
    }
    let r1x = aux.r1.matmul(x, counter.as_deref_mut())?;
    let x_bar = base
        .w1
        .matmul(x, counter.as_deref_mut())?
        .add(&aux.l1.matmul(&r1x, counter.as_deref_mut())?)?;
    let xb_l2 = x_bar.matmul(&aux.l2, counter.as_deref_mut())?;
    let z = x_bar
        .matmul(&base.w2, counter.as_deref_mut())?
        .add(&xb_l2.matmul(&aux.r2, counter.as_deref_mut())?)?
        .add(&base.b)?;
    if let Some(c) = counter {
        c.add_macs(2 * (z.rows() * z.cols()) as u64);
    }
    let y = layers::apply_activation(base.activation, &z);
    let cache = match mode {
        Mode::Train => Some(LayerCache { x: x.clone(), x_bar, a: None, x_tilde: None, z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

pub fn aug_bl_forward(
    layer: &AugmentedBlLayer,
    x: &Matrix,
    mode: Mode,
    counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<LayerCache>)> {
    match layer.strategy {
        Strategy::Is1 => aug_bl_forward_is1(layer, x, mode, counter),
        Strategy::Is2 => aug_bl_forward_is2(layer, x, mode, counter),
    }
}

/// Backward pass for an augmented TABL. Only factor gradients (and
/// optionally lambda) are produced; the base stays frozen.
pub fn aug_tabl_backward(
    layer: &AugmentedTablLayer,
    cache: &LayerCache,
    dy: &Matrix,
) -> Result<(AuxGrads, Matrix)> {
    let base = &layer.base;
    let aux = &layer.aux;
    let (l, r) = (aux.l.as_ref().unwrap(), aux.r.as_ref().unwrap());
    let a = cache.a.as_ref().ok_or_else(|| TablError::State("cache lacks attention matrix".into()))?;
    let x_tilde = cache
        .x_tilde
        .as_ref()
        .ok_or_else(|| TablError::State("cache lacks blended features".into()))?;

    let dz = layers::activation_backward(base.activation, &cache.z, dy);
    // Output projection: W2_new = W2 + L2 R2.
    let dl2;
    let dr2;
    let dx_tilde;
    match layer.strategy {
        Strategy::Is1 => {
            let dw2_full = x_tilde.transpose().matmul(&dz, None)?;
            dl2 = dw2_full.matmul(&aux.r2.transpose(), None)?;
            dr2 = aux.l2.transpose().matmul(&dw2_full, None)?;
            let w2_new = base.w2.add(&aux.w2_aux(None))?;
            dx_tilde = dz.matmul(&w2_new.transpose(), None)?;
        }
        Strategy::Is2 => {
            dl2 = x_tilde.transpose().matmul(&dz.matmul(&aux.r2.transpose(), None)?, None)?;
            dr2 = x_tilde.matmul(&aux.l2, None)?.transpose().matmul(&dz, None)?;
            let dz_r2t_l2t = dz
                .matmul(&aux.r2.transpose(), None)?
                .matmul(&aux.l2.transpose(), None)?;
            dx_tilde = dz.matmul(&base.w2.transpose(), None)?.add(&dz_r2t_l2t)?;
        }
    }
    let attended = cache.x_bar.hadamard(a)?;
    let dlambda = if layer.train_lambda {
        Some(dx_tilde.hadamard(&attended.sub(&cache.x_bar)?)?.sum())
    } else {
        None
    };
    let da = dx_tilde.hadamard(&cache.x_bar)?.scale(base.lambda);
    let dx_bar_blend = dx_tilde
        .hadamard(a)?
        .scale(base.lambda)
        .add(&dx_tilde.scale(1.0 - base.lambda))?;
    let de = layers::row_softmax_backward(a, &da);

    // Attention weights: W_new = W + L R; the auxiliary product is
    // unconstrained, so no diagonal masking on the factor gradients.
    let dl_g;
    let dr_g;
    let de_w_t;
    match layer.strategy {
        Strategy::Is1 => {
            let dw_full = cache.x_bar.transpose().matmul(&de, None)?;
            dl_g = dw_full.matmul(&r.transpose(), None)?;
            dr_g = l.transpose().matmul(&dw_full, None)?;
            let w_new = base.w.add(&l.matmul(r, None)?)?;
            de_w_t = de.matmul(&w_new.transpose(), None)?;
        }
        Strategy::Is2 => {
            dl_g = cache.x_bar.transpose().matmul(&de.matmul(&r.transpose(), None)?, None)?;
            dr_g = cache.x_bar.matmul(l, None)?.transpose().matmul(&de, None)?;
            let de_rt_lt = de.matmul(&r.transpose(), None)?.matmul(&l.transpose(), None)?;
            de_w_t = de.matmul(&base.w.transpose(), None)?.add(&de_rt_lt)?;
        }
    }
    let dx_bar = dx_bar_blend.add(&de_w_t)?;

    // Feature transform: W1_new = W1 + L1 R1.
    let dl1;
    let dr1;
    let dx;
    match layer.strategy {
        Strategy::Is1 => {
            let dw1_full = dx_bar.matmul(&cache.x.transpose(), None)?;
            dl1 = dw1_full.matmul(&aux.r1.transpose(), None)?;
            dr1 = aux.l1.transpose().matmul(&dw1_full, None)?;
            let w1_new = base.w1.add(&aux.l1.matmul(&aux.r1, None)?)?;
            dx = w1_new.transpose().matmul(&dx_bar, None)?;
        }
        Strategy::Is2 => {
            dl1 = dx_bar.matmul(&aux.r1.matmul(&cache.x, None)?.transpose(), None)?;
            dr1 = aux.l1.transpose().matmul(&dx_bar, None)?.matmul(&cache.x.transpose(), None)?;
            let via_factors = aux
                .r1
                .transpose()
                .matmul(&aux.l1.transpose().matmul(&dx_bar, None)?, None)?;
            dx = base.w1.transpose().matmul(&dx_bar, None)?.add(&via_factors)?;
        }
    }

    Ok((
        AuxGrads { l1: dl1, r1: dr1, l: Some(dl_g), r: Some(dr_g), l2: dl2, r2: dr2, lambda: dlambda },
        dx,
    ))
}

/// Closed-form forward MAC count of one plain TABL on a batch of N.
pub fn tabl_forward_macs(n: u64, d: u64, t: u64, d_out: u64, t_out: u64) -> u64 {
    n * (d * d_out * t + d_out * t * t + d_out * t * t_out + 2 * d_out * t_out)
}

pub fn bl_forward_macs(n: u64, d: u64, t: u64, d_out: u64, t_out: u64) -> u64 {
    n * (d * d_out * t + d_out * t * t_out + 2 * d_out * t_out)
}

/// IS1 cost: the plain-layer cost plus one factor materialization per
/// counting scope (independent of N).
pub fn aug_tabl_is1_macs(n: u64, d: u64, t: u64, d_out: u64, t_out: u64, k: u64) -> u64 {
    tabl_forward_macs(n, d, t, d_out, t_out) + k * (d_out * d + t * t + t * t_out)
}

/// IS2 cost, stage by stage: feature transform, temporal importance,
/// output projection (bias add and activation included in the last).
pub fn aug_tabl_is2_stage_macs(
    n: u64,
    d: u64,
    t: u64,
    d_out: u64,
    t_out: u64,
    k: u64,
) -> [u64; 3] {
    [
        n * (d * d_out * t + d * k * t + k * t * d_out),
        n * (d_out * t * t + d_out * t * k + d_out * k * t),
        n * (d_out * t * t_out + d_out * t * k + d_out * k * t_out + 2 * d_out * t_out),
    ]
}

pub fn aug_tabl_is2_macs(n: u64, d: u64, t: u64, d_out: u64, t_out: u64, k: u64) -> u64 {
    aug_tabl_is2_stage_macs(n, d, t, d_out, t_out, k).iter().sum()
}

pub fn aug_bl_is1_macs(n: u64, d: u64, t: u64, d_out: u64, t_out: u64, k: u64) -> u64 {
    bl_forward_macs(n, d, t, d_out, t_out) + k * (d_out * d + t * t_out)
}

pub fn aug_bl_is2_macs(n: u64, d: u64, t: u64, d_out: u64, t_out: u64, k: u64) -> u64 {
    n * (d * d_out * t
        + d * k * t
        + k * t * d_out
        + d_out * t * t_out
        + d_out * t * k
        + d_out * k * t_out
        + 2 * d_out * t_out)
}

pub fn aug_bl_backward(
    layer: &AugmentedBlLayer,
    cache: &LayerCache,
    dy: &Matrix,
) -> Result<(AuxGrads, Matrix)> {
    let base = &layer.base;
    let aux = &layer.aux;
    let dz = layers::activation_backward(base.activation, &cache.z, dy);
    let dw2_full = cache.x_bar.transpose().matmul(&dz, None)?;
    let dl2 = dw2_full.matmul(&aux.r2.transpose(), None)?;
    let dr2 = aux.l2.transpose().matmul(&dw2_full, None)?;
    let w2_aux = aux.w2_aux(None);
    let dx_bar = dz.matmul(&base.w2.add(&w2_aux)?.transpose(), None)?;
    let dw1_full = dx_bar.matmul(&cache.x.transpose(), None)?;
    let dl1 = dw1_full.matmul(&aux.r1.transpose(), None)?;
    let dr1 = aux.l1.transpose().matmul(&dw1_full, None)?;
    let w1_new = base.w1.add(&aux.l1.matmul(&aux.r1, None)?)?;
    let dx = w1_new.transpose().matmul(&dx_bar, None)?;
    Ok((AuxGrads { l1: dl1, r1: dr1, l: None, r: None, l2: dl2, r2: dr2, lambda: None }, dx))
}
