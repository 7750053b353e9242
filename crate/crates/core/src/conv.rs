//! 1D convolution layers for multichannel time-series, plus the
//! CP-factored auxiliary filter adapter.
//!
//! Filters form a 3-mode tensor `N x D x t` (filters, input channels,
//! kernel size). The auxiliary filters are a sum of K rank-one outer
//! products `w1(k) (x) w2(k) (x) w3(k)`, which makes the auxiliary
//! convolution separable: project channels with `w2`, convolve the
//! resulting row with `w3`, and expand over filters with `w1`.
//! Convolution means cross-correlation (no kernel flip) throughout.

use rand::Rng;

use crate::error::{Result, TablError};
use crate::layers::{apply_activation, activation_backward, Activation, Mode};
use crate::linalg::{Matrix, OpCounter};

/// Dense 3-mode tensor, `[n][d][t]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n: usize,
    d: usize,
    t: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, d: usize, t: usize) -> Self {
        assert!(n > 0 && d > 0 && t > 0);
        Self { n, d, t, data: vec![0.0; n * d * t] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.d, self.t)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d + j) * self.t + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.d + j) * self.t + k] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mode-1 unfolding: `n x (d*t)` matrix, fibers in row-major order.
    pub fn unfold_mode1(&self) -> Matrix {
        Matrix::from_vec(self.n, self.d * self.t, self.data.clone()).expect("finite")
    }

    /// Mode-2 unfolding: `d x (n*t)`.
    pub fn unfold_mode2(&self) -> Matrix {
        let mut m = Matrix::zeros(self.d, self.n * self.t);
        for i in 0..self.n {
            for j in 0..self.d {
                for k in 0..self.t {
                    m.set(j, i * self.t + k, self.get(i, j, k));
                }
            }
        }
        m
    }

    /// Mode-3 unfolding: `t x (n*d)`.
    pub fn unfold_mode3(&self) -> Matrix {
        let mut m = Matrix::zeros(self.t, self.n * self.d);
        for i in 0..self.n {
            for j in 0..self.d {
                for k in 0..self.t {
                    m.set(k, i * self.d + j, self.get(i, j, k));
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    pub filters: Tensor3,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

impl Conv1dParams {
    pub fn init(
        filters: usize,
        in_channels: usize,
        kernel: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let limit = (6.0 / (fan_in + filters) as f64).sqrt();
        let mut tensor = Tensor3::zeros(filters, in_channels, kernel);
        for v in tensor.data_mut() {
            *v = rng.gen_range(-limit..limit);
        }
        Self {
            filters: tensor,
            bias: vec![0.0; filters],
            stride: 1,
            padding: Padding::Same,
            activation,
        }
    }

    pub fn out_len(&self, t_in: usize) -> Result<usize> {
        let (_, _, k) = self.filters.dims();
        match self.padding {
            Padding::Same => Ok(t_in.div_ceil(self.stride)),
            Padding::Valid => {
                if t_in < k {
                    return Err(TablError::Shape(format!(
                        "kernel {k} larger than input length {t_in} with valid padding"
                    )));
                }
                Ok((t_in - k) / self.stride + 1)
            }
        }
    }

    fn pad_left(&self) -> usize {
        let (_, _, k) = self.filters.dims();
        match self.padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.filters.data.len() + self.bias.len()
    }

    /// Counted forward cost on one sample of length `t_in`.
    pub fn forward_macs(&self, t_in: usize) -> u64 {
        let (n, d, k) = self.filters.dims();
        let t_out = self.out_len(t_in).unwrap_or(0);
        (n * d * k * t_out + 2 * n * t_out) as u64
    }
}

/// CP-form auxiliary filters: K rank-one terms over (filters, channels,
/// kernel). Rows of each matrix are the per-term vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CpAuxFilters {
    /// K x N
    pub w1: Matrix,
    /// K x D
    pub w2: Matrix,
    /// K x t
    pub w3: Matrix,
    pub rank: usize,
}

impl CpAuxFilters {
    /// `w1`, `w3` small uniform; `w2` zero so the reconstructed tensor
    /// starts at zero and training begins at the base filters.
    pub fn init(filters: usize, in_channels: usize, kernel: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(TablError::Config("CP rank must be at least 1".into()));
        }
        let small = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-1e-2..1e-2)).collect();
            Matrix::from_vec(rows, cols, data).expect("finite")
        };
        Ok(Self {
            w1: small(rng, k, filters),
            w2: Matrix::zeros(k, in_channels),
            w3: small(rng, k, kernel),
            rank: k,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.w2.data().len() + self.w3.data().len()
    }

    /// Materializes `sum_k w1(k) (x) w2(k) (x) w3(k)`.
    pub fn reconstruct(&self) -> Tensor3 {
        let n = self.w1.cols();
        let d = self.w2.cols();
        let t = self.w3.cols();
        let mut out = Tensor3::zeros(n, d, t);
        for k in 0..self.rank {
            for i in 0..n {
                let a = self.w1.get(k, i);
                for j in 0..d {
                    let ab = a * self.w2.get(k, j);
                    for q in 0..t {
                        let v = out.get(i, j, q) + ab * self.w3.get(k, q);
                        out.set(i, j, q, v);
                    }
                }
            }
        }
        out
    }
}

pub fn cp_aux_param_count(filters: usize, in_channels: usize, kernel: usize, k: usize) -> usize {
    k * (filters + in_channels + kernel)
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub x: Matrix,
    pub z: Matrix,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub filters: Tensor3,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CpAuxGrads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

/// Raw cross-correlation of `x (D x T)` with the filter bank, bias
/// included, no activation.
fn conv_raw(p: &Conv1dParams, x: &Matrix, counter: Option<&mut OpCounter>) -> Result<Matrix> {
    let (n, d, k) = p.filters.dims();
    if x.rows() != d {
        return Err(TablError::Shape(format!(
            "conv expects {d} input channels, got {}",
            x.rows()
        )));
    }
    let t_in = x.cols();
    let t_out = p.out_len(t_in)?;
    let pad = p.pad_left();
    if let Some(c) = counter {
        c.add_macs((n * d * k * t_out + n * t_out) as u64);
    }
    let mut z = Matrix::zeros(n, t_out);
    for f in 0..n {
        for o in 0..t_out {
            let start = (o * p.stride) as isize - pad as isize;
            let mut acc = p.bias[f];
            for ch in 0..d {
                for q in 0..k {
                    let j = start + q as isize;
                    if j >= 0 && (j as usize) < t_in {
                        acc += x.get(ch, j as usize) * p.filters.get(f, ch, q);
                    }
                }
            }
            z.set(f, o, acc);
        }
    }
    Ok(z)
}

pub fn conv1d_forward(
    p: &Conv1dParams,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<ConvCache>)> {
    let z = conv_raw(p, x, counter.as_deref_mut())?;
    if let Some(c) = counter {
        c.add_macs((z.rows() * z.cols()) as u64);
    }
    let y = apply_activation(p.activation, &z);
    let cache = match mode {
        Mode::Train => Some(ConvCache { x: x.clone(), z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

pub fn conv1d_backward(
    p: &Conv1dParams,
    cache: &ConvCache,
    dy: &Matrix,
) -> Result<(ConvGrads, Matrix)> {
    let (n, d, k) = p.filters.dims();
    let t_in = cache.x.cols();
    let pad = p.pad_left();
    let dz = activation_backward(p.activation, &cache.z, dy);
    let mut dfilters = Tensor3::zeros(n, d, k);
    let mut dbias = vec![0.0; n];
    let mut dx = Matrix::zeros(d, t_in);
    for f in 0..n {
        for o in 0..dz.cols() {
            let g = dz.get(f, o);
            if g == 0.0 {
                continue;
            }
            dbias[f] += g;
            let start = (o * p.stride) as isize - pad as isize;
            for ch in 0..d {
                for q in 0..k {
                    let j = start + q as isize;
                    if j >= 0 && (j as usize) < t_in {
                        let v = dfilters.get(f, ch, q) + g * cache.x.get(ch, j as usize);
                        dfilters.set(f, ch, q, v);
                        let cur = dx.get(ch, j as usize) + g * p.filters.get(f, ch, q);
                        dx.set(ch, j as usize, cur);
                    }
                }
            }
        }
    }
    Ok((ConvGrads { filters: dfilters, bias: dbias }, dx))
}

/// Per-rank separable intermediates of the auxiliary convolution.
fn cp_intermediates(
    p: &Conv1dParams,
    aux: &CpAuxFilters,
    x: &Matrix,
    t_out: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t_in = x.cols();
    let (_, d, k) = p.filters.dims();
    let pad = p.pad_left();
    let mut s_all = Vec::with_capacity(aux.rank);
    let mut r_all = Vec::with_capacity(aux.rank);
    for term in 0..aux.rank {
        let mut s = vec![0.0; t_in];
        for (j, sv) in s.iter_mut().enumerate() {
            for ch in 0..d {
                *sv += aux.w2.get(term, ch) * x.get(ch, j);
            }
        }
        let mut r = vec![0.0; t_out];
        for (o, rv) in r.iter_mut().enumerate() {
            let start = (o * p.stride) as isize - pad as isize;
            for q in 0..k {
                let j = start + q as isize;
                if j >= 0 && (j as usize) < t_in {
                    *rv += s[j as usize] * aux.w3.get(term, q);
                }
            }
        }
        s_all.push(s);
        r_all.push(r);
    }
    (s_all, r_all)
}

/// Augmented convolution: base filters plus the CP auxiliary filters,
/// computed separably without materializing the auxiliary tensor.
pub fn aug_conv_forward(
    p: &Conv1dParams,
    aux: &CpAuxFilters,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<ConvCache>)> {
    let mut z = conv_raw(p, x, counter.as_deref_mut())?;
    let (n, d, k) = p.filters.dims();
    let t_out = z.cols();
    if let Some(c) = counter.as_deref_mut() {
        let kr = aux.rank;
        c.add_macs((kr * d * x.cols() + kr * k * t_out + kr * n * t_out) as u64);
    }
    let (_, r_all) = cp_intermediates(p, aux, x, t_out);
    for (term, r) in r_all.iter().enumerate() {
        for f in 0..n {
            let w = aux.w1.get(term, f);
            for (o, rv) in r.iter().enumerate() {
                z.set(f, o, z.get(f, o) + w * rv);
            }
        }
    }
    if let Some(c) = counter {
        c.add_macs((z.rows() * z.cols()) as u64);
    }
    let y = apply_activation(p.activation, &z);
    let cache = match mode {
        Mode::Train => Some(ConvCache { x: x.clone(), z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

/// Backward for the augmented convolution: CP factor gradients only;
/// base filters and bias stay frozen. dX flows through both paths.
pub fn aug_conv_backward(
    p: &Conv1dParams,
    aux: &CpAuxFilters,
    cache: &ConvCache,
    dy: &Matrix,
) -> Result<(CpAuxGrads, Matrix)> {
    let (n, d, k) = p.filters.dims();
    let t_in = cache.x.cols();
    let t_out = cache.z.cols();
    let pad = p.pad_left();
    let dz = activation_backward(p.activation, &cache.z, dy);

    // Base path contribution to dX.
    let mut dx = Matrix::zeros(d, t_in);
    for f in 0..n {
        for o in 0..t_out {
            let g = dz.get(f, o);
            if g == 0.0 {
                continue;
            }
            let start = (o * p.stride) as isize - pad as isize;
            for ch in 0..d {
                for q in 0..k {
                    let j = start + q as isize;
                    if j >= 0 && (j as usize) < t_in {
                        let cur = dx.get(ch, j as usize) + g * p.filters.get(f, ch, q);
                        dx.set(ch, j as usize, cur);
                    }
                }
            }
        }
    }

    let (s_all, r_all) = cp_intermediates(p, aux, &cache.x, t_out);
    let mut dw1 = Matrix::zeros(aux.rank, n);
    let mut dw2 = Matrix::zeros(aux.rank, d);
    let mut dw3 = Matrix::zeros(aux.rank, aux.w3.cols());
    for term in 0..aux.rank {
        // dw1[term, f] = sum_o dz[f,o] r[o]; dr[o] = sum_f dz[f,o] w1[term, f]
        let mut dr = vec![0.0; t_out];
        for f in 0..n {
            let mut acc = 0.0;
            for o in 0..t_out {
                acc += dz.get(f, o) * r_all[term][o];
                dr[o] += dz.get(f, o) * aux.w1.get(term, f);
            }
            dw1.set(term, f, acc);
        }
        // Through the temporal correlation: dw3 and ds.
        let mut ds = vec![0.0; t_in];
        for (o, &g) in dr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let start = (o * p.stride) as isize - pad as isize;
            for q in 0..aux.w3.cols() {
                let j = start + q as isize;
                if j >= 0 && (j as usize) < t_in {
                    dw3.set(term, q, dw3.get(term, q) + g * s_all[term][j as usize]);
                    ds[j as usize] += g * aux.w3.get(term, q);
                }
            }
        }
        // Through the channel projection: dw2 and dX.
        for ch in 0..d {
            let mut acc = 0.0;
            for (j, &dsv) in ds.iter().enumerate() {
                acc += dsv * cache.x.get(ch, j);
                let cur = dx.get(ch, j) + dsv * aux.w2.get(term, ch);
                dx.set(ch, j, cur);
            }
            dw2.set(term, ch, acc);
        }
    }
    Ok((CpAuxGrads { w1: dw1, w2: dw2, w3: dw3 }, dx))
}

/// Folds the CP auxiliary filters into the base filter tensor.
pub fn fold_conv(p: &Conv1dParams, aux: &CpAuxFilters) -> Conv1dParams {
    let rec = aux.reconstruct();
    let mut filters = p.filters.clone();
    for (v, a) in filters.data_mut().iter_mut().zip(rec.data()) {
        *v += a;
    }
    Conv1dParams {
        filters,
        bias: p.bias.clone(),
        stride: p.stride,
        padding: p.padding,
        activation: p.activation,
    }
}

/// Flatten-and-project classification head: `y = phi(W vec(X) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// C x F
    pub w: Matrix,
    /// C x 1
    pub b: Matrix,
    pub activation: Activation,
}

impl DenseParams {
    pub fn init(in_features: usize, classes: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_features + classes) as f64).sqrt();
        let data = (0..classes * in_features).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            w: Matrix::from_vec(classes, in_features, data).expect("finite"),
            b: Matrix::zeros(classes, 1),
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.data().len() + self.b.data().len()
    }

    pub fn forward_macs(&self) -> u64 {
        (self.w.rows() * self.w.cols() + 2 * self.w.rows()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    pub x_shape: (usize, usize),
    pub x_flat: Matrix,
    pub z: Matrix,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub w: Matrix,
    pub b: Matrix,
}

fn flatten_column(x: &Matrix) -> Matrix {
    Matrix::from_vec(x.rows() * x.cols(), 1, x.data().to_vec()).expect("finite")
}

pub fn dense_forward(
    p: &DenseParams,
    x: &Matrix,
    mode: Mode,
    mut counter: Option<&mut OpCounter>,
) -> Result<(Matrix, Option<DenseCache>)> {
    let x_flat = flatten_column(x);
    if x_flat.rows() != p.w.cols() {
        return Err(TablError::Shape(format!(
            "dense head expects {} features, got {}",
            p.w.cols(),
            x_flat.rows()
        )));
    }
    let z = p.w.matmul(&x_flat, counter.as_deref_mut())?.add(&p.b)?;
    if let Some(c) = counter {
        c.add_macs(2 * z.rows() as u64);
    }
    let y = apply_activation(p.activation, &z);
    let cache = match mode {
        Mode::Train => Some(DenseCache { x_shape: x.shape(), x_flat, z }),
        Mode::Infer => None,
    };
    Ok((y, cache))
}

pub fn dense_backward(p: &DenseParams, cache: &DenseCache, dy: &Matrix) -> Result<(DenseGrads, Matrix)> {
    let dz = activation_backward(p.activation, &cache.z, dy);
    let dw = dz.matmul(&cache.x_flat.transpose(), None)?;
    let db = dz.clone();
    let dx_flat = p.w.transpose().matmul(&dz, None)?;
    let (r, c) = cache.x_shape;
    let dx = Matrix::from_vec(r, c, dx_flat.data().to_vec())?;
    Ok((DenseGrads { w: dw, b: db }, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_conv(rng: &mut StdRng, n: usize, d: usize, k: usize) -> Conv1dParams {
        let mut p = Conv1dParams::init(n, d, k, Activation::Identity, rng);
        for b in p.bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        p
    }

    fn random_cp(rng: &mut StdRng, n: usize, d: usize, k: usize, rank: usize) -> CpAuxFilters {
        CpAuxFilters {
            w1: random_matrix(rng, rank, n),
            w2: random_matrix(rng, rank, d),
            w3: random_matrix(rng, rank, k),
            rank,
        }
    }

    /// Brute-force sliding-window oracle for same-padding stride-1
    /// cross-correlation.
    fn conv_oracle(p: &Conv1dParams, x: &Matrix) -> Matrix {
        let (n, d, k) = p.filters.dims();
        let t = x.cols();
        let pad = (k - 1) / 2;
        let mut y = Matrix::zeros(n, t);
        for f in 0..n {
            for o in 0..t {
                let mut acc = p.bias[f];
                for ch in 0..d {
                    for q in 0..k {
                        let j = o as isize + q as isize - pad as isize;
                        if j >= 0 && (j as usize) < t {
                            acc += x.get(ch, j as usize) * p.filters.get(f, ch, q);
                        }
                    }
                }
                y.set(f, o, acc);
            }
        }
        y
    }

    #[test]
    fn all_ones_1x1_kernel_sums_channels() {
        let mut p = Conv1dParams::init(1, 3, 1, Activation::Identity, &mut StdRng::seed_from_u64(0));
        for v in p.filters.data_mut() {
            *v = 1.0;
        }
        p.bias[0] = 0.0;
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let (y, _) = conv1d_forward(&p, &x, Mode::Infer, None).unwrap();
        assert_eq!(y.data(), &[9.0, 12.0]);
    }

    #[test]
    fn centered_delta_kernel_is_identity_over_time() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut p = Conv1dParams::init(1, 2, 3, Activation::Identity, &mut rng);
        for v in p.filters.data_mut() {
            *v = 0.0;
        }
        p.bias[0] = 0.0;
        // Delta at the kernel center for channel 0 only.
        p.filters.set(0, 0, 1, 1.0);
        let x = random_matrix(&mut rng, 2, 8);
        let (y, _) = conv1d_forward(&p, &x, Mode::Infer, None).unwrap();
        for o in 0..8 {
            assert!((y.get(0, o) - x.get(0, o)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_sliding_window_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let p = random_conv(&mut rng, 2, 3, 3);
        let x = random_matrix(&mut rng, 3, 8);
        let (y, _) = conv1d_forward(&p, &x, Mode::Infer, None).unwrap();
        assert!(y.max_abs_diff(&conv_oracle(&p, &x)) < 1e-12);
    }

    #[test]
    fn valid_padding_rejects_short_input() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut p = random_conv(&mut rng, 2, 3, 5);
        p.padding = Padding::Valid;
        let x = random_matrix(&mut rng, 3, 4);
        assert!(matches!(conv1d_forward(&p, &x, Mode::Infer, None), Err(TablError::Shape(_))));
    }

    #[test]
    fn zero_cp_factors_reproduce_base() {
        let mut rng = StdRng::seed_from_u64(4);
        let p = random_conv(&mut rng, 3, 4, 3);
        let aux = CpAuxFilters::init(3, 4, 3, 2, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 4, 7);
        let (y_base, _) = conv1d_forward(&p, &x, Mode::Infer, None).unwrap();
        let (y_aug, _) = aug_conv_forward(&p, &aux, &x, Mode::Infer, None).unwrap();
        assert!(y_aug.max_abs_diff(&y_base) < 1e-15);
    }

    #[test]
    fn augmented_equals_fold_and_two_conv_sum() {
        let mut rng = StdRng::seed_from_u64(5);
        let p = random_conv(&mut rng, 3, 4, 3);
        let aux = random_cp(&mut rng, 3, 4, 3, 1);
        let x = random_matrix(&mut rng, 4, 9);
        let (y_aug, _) = aug_conv_forward(&p, &aux, &x, Mode::Infer, None).unwrap();
        let folded = fold_conv(&p, &aux);
        let (y_fold, _) = conv1d_forward(&folded, &x, Mode::Infer, None).unwrap();
        assert!(y_aug.max_abs_diff(&y_fold) < 1e-12);
        assert_eq!(folded.param_count(), p.param_count());

        // Two-convolution form: base conv plus a zero-bias conv with the
        // reconstructed auxiliary tensor.
        let aux_only = Conv1dParams {
            filters: aux.reconstruct(),
            bias: vec![0.0; 3],
            stride: 1,
            padding: Padding::Same,
            activation: Activation::Identity,
        };
        let (ya, _) = conv1d_forward(&aux_only, &x, Mode::Infer, None).unwrap();
        let base_linear = Conv1dParams { activation: Activation::Identity, ..p.clone() };
        let (yb, _) = conv1d_forward(&base_linear, &x, Mode::Infer, None).unwrap();
        let summed = apply_activation(p.activation, &yb.add(&ya).unwrap());
        assert!(y_aug.max_abs_diff(&summed) < 1e-12);
    }

    #[test]
    fn cp_unfoldings_have_rank_at_most_k() {
        let mut rng = StdRng::seed_from_u64(6);
        let aux = random_cp(&mut rng, 6, 5, 4, 2);
        let rec = aux.reconstruct();
        for m in [rec.unfold_mode1(), rec.unfold_mode2(), rec.unfold_mode3()] {
            let sv = m.singular_values();
            assert!(sv[2] < 1e-10, "sigma_3 = {}", sv[2]);
        }
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in [10u64, 11, 12] {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut p = random_conv(&mut rng, 2, 3, 3);
            p.activation = Activation::Relu;
            let x = random_matrix(&mut rng, 3, 6);
            let m = random_matrix(&mut rng, 2, 6);
            let loss = |p: &Conv1dParams, x: &Matrix| {
                let (y, _) = conv1d_forward(p, x, Mode::Infer, None).unwrap();
                y.hadamard(&m).unwrap().sum()
            };
            let (_, cache) = conv1d_forward(&p, &x, Mode::Train, None).unwrap();
            let (g, dx) = conv1d_backward(&p, &cache.unwrap(), &m).unwrap();
            let mut max_err = 0.0f64;
            for idx in 0..p.filters.data().len() {
                let mut pp = p.clone();
                pp.filters.data_mut()[idx] += h;
                let up = loss(&pp, &x);
                pp.filters.data_mut()[idx] -= 2.0 * h;
                let down = loss(&pp, &x);
                max_err = max_err.max(rel_err(g.filters.data()[idx], (up - down) / (2.0 * h)));
            }
            for idx in 0..p.bias.len() {
                let mut pp = p.clone();
                pp.bias[idx] += h;
                let up = loss(&pp, &x);
                pp.bias[idx] -= 2.0 * h;
                let down = loss(&pp, &x);
                max_err = max_err.max(rel_err(g.bias[idx], (up - down) / (2.0 * h)));
            }
            for idx in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let up = loss(&p, &xp);
                xp.data_mut()[idx] -= 2.0 * h;
                let down = loss(&p, &xp);
                max_err = max_err.max(rel_err(dx.data()[idx], (up - down) / (2.0 * h)));
            }
            assert!(max_err < 1e-6, "seed {seed}: max rel err {max_err}");
        }
    }

    #[test]
    fn cp_gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in [20u64, 21, 22] {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut p = random_conv(&mut rng, 3, 4, 3);
            p.activation = Activation::Relu;
            let aux = random_cp(&mut rng, 3, 4, 3, 2);
            let x = random_matrix(&mut rng, 4, 6);
            let m = random_matrix(&mut rng, 3, 6);
            let loss = |aux: &CpAuxFilters, x: &Matrix| {
                let (y, _) = aug_conv_forward(&p, aux, x, Mode::Infer, None).unwrap();
                y.hadamard(&m).unwrap().sum()
            };
            let (_, cache) = aug_conv_forward(&p, &aux, &x, Mode::Train, None).unwrap();
            let (g, dx) = aug_conv_backward(&p, &aux, &cache.unwrap(), &m).unwrap();
            let mut max_err = 0.0f64;
            let mut check = |get: &dyn Fn(&mut CpAuxFilters) -> &mut Matrix, analytic: &Matrix| {
                for idx in 0..analytic.data().len() {
                    let mut ap = aux.clone();
                    get(&mut ap).data_mut()[idx] += h;
                    let up = loss(&ap, &x);
                    get(&mut ap).data_mut()[idx] -= 2.0 * h;
                    let down = loss(&ap, &x);
                    let e = rel_err(analytic.data()[idx], (up - down) / (2.0 * h));
                    if e > max_err {
                        max_err = e;
                    }
                }
            };
            check(&|a| &mut a.w1, &g.w1);
            check(&|a| &mut a.w2, &g.w2);
            check(&|a| &mut a.w3, &g.w3);
            for idx in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let up = loss(&aux, &xp);
                xp.data_mut()[idx] -= 2.0 * h;
                let down = loss(&aux, &xp);
                max_err = max_err.max(rel_err(dx.data()[idx], (up - down) / (2.0 * h)));
            }
            assert!(max_err < 1e-6, "seed {seed}: max rel err {max_err}");
        }
    }

    #[test]
    fn dense_head_gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = StdRng::seed_from_u64(30);
        let p = DenseParams::init(12, 3, Activation::Identity, &mut rng);
        let x = random_matrix(&mut rng, 3, 4);
        let m = random_matrix(&mut rng, 3, 1);
        let loss = |p: &DenseParams, x: &Matrix| {
            let (y, _) = dense_forward(p, x, Mode::Infer, None).unwrap();
            y.hadamard(&m).unwrap().sum()
        };
        let (_, cache) = dense_forward(&p, &x, Mode::Train, None).unwrap();
        let (g, dx) = dense_backward(&p, &cache.unwrap(), &m).unwrap();
        let mut max_err = 0.0f64;
        for idx in 0..p.w.data().len() {
            let mut pp = p.clone();
            pp.w.data_mut()[idx] += h;
            let up = loss(&pp, &x);
            pp.w.data_mut()[idx] -= 2.0 * h;
            let down = loss(&pp, &x);
            max_err = max_err.max(rel_err(g.w.data()[idx], (up - down) / (2.0 * h)));
        }
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let up = loss(&p, &xp);
            xp.data_mut()[idx] -= 2.0 * h;
            let down = loss(&p, &xp);
            max_err = max_err.max(rel_err(dx.data()[idx], (up - down) / (2.0 * h)));
        }
        assert!(max_err < 1e-6, "max rel err {max_err}");
        assert!(g.b.max_abs() > 0.0);
    }
}
