//! Parameter storage, the Adam optimizer and finite-difference gradient
//! verification.
//!
//! Every learnable quantity lives in a [`ParamTensor`]: a flat `f64` buffer
//! with a shape, a same-shape gradient accumulator and a trainable flag.
//! Backward passes always *add* into the gradient buffer, so parameters
//! shared between scoring paths (most importantly the embedding table)
//! receive summed contributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// A named, shaped, flat `f64` parameter with a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(name: &str, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "shape/value mismatch for {name}");
        let grad = vec![0.0; n];
        ParamTensor {
            name: name.to_string(),
            shape,
            values,
            grad,
            trainable: true,
        }
    }

    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        ParamTensor::new(name, shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = 0.0;
        }
    }

    /// Accumulate into the gradient buffer; frozen tensors stay at zero.
    #[inline]
    pub fn add_grad(&mut self, idx: usize, g: f64) {
        if self.trainable {
            self.grad[idx] += g;
        }
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.values[r * c..(r + 1) * c]
    }

    /// Row-major element of a rank-2 tensor.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape[1] + c]
    }
}

/// Anything that exposes its parameters as an ordered tensor list.
///
/// The order must be stable: it defines optimizer-state alignment and the
/// checkpoint layout.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}

/// Adam state: one pair of moment buffers per parameter tensor, plus the
/// shared step counter and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &impl ParamSet) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update from the accumulated gradients. Non-trainable tensors
/// are untouched; a non-finite gradient aborts with the parameter name.
pub fn adam_step(params: &mut impl ParamSet, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (ti, tensor) in params.tensors_mut().into_iter().enumerate() {
        if !tensor.trainable {
            continue;
        }
        if tensor.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter '{}'",
                tensor.name
            )));
        }
        let m = &mut state.first_moment[ti];
        let v = &mut state.second_moment[ti];
        for i in 0..tensor.values.len() {
            let g = tensor.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Options for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per tensor (all coordinates if the tensor is
    /// smaller than this).
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_coords_per_tensor: 32,
            seed: 0x5eed,
        }
    }
}

/// Per-tensor result of a gradient check.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().fold(0.0, |a, t| a.max(t.max_rel_err))
    }

    pub fn worst_tensor(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error between an analytic and numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare the gradients already accumulated in `params` against central
/// differences of `loss_fn`, sampling coordinates of every trainable tensor.
///
/// `loss_fn` must be deterministic; it is evaluated twice at the unperturbed
/// point and any bitwise difference is reported as an error.
pub fn grad_check<M, F>(params: &mut M, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: ParamSet,
    F: FnMut(&M) -> Result<f64>,
{
    let l0 = loss_fn(params)?;
    let l1 = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::Numeric("nondeterministic loss".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_tensors = params.tensors().len();
    let mut report = Vec::new();
    for ti in 0..n_tensors {
        let (name, numel, trainable) = {
            let ts = params.tensors();
            (ts[ti].name.clone(), ts[ti].numel(), ts[ti].trainable)
        };
        if !trainable || numel == 0 {
            continue;
        }
        let coords: Vec<usize> = if numel <= opts.max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, numel, opts.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name,
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst: None,
        };
        for idx in coords {
            let orig = params.tensors()[ti].values[idx];
            params.tensors_mut()[ti].values[idx] = orig + opts.step;
            let lp = loss_fn(params)?;
            params.tensors_mut()[ti].values[idx] = orig - opts.step;
            let lm = loss_fn(params)?;
            params.tensors_mut()[ti].values[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.step);
            let analytic = params.tensors()[ti].grad[idx];
            let rel = relative_error(analytic, numeric);
            if rel >= check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = Some((idx, analytic, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { tensors: report })
}

// ---------------------------------------------------------------------------
// Small dense helpers shared by the attention and ranking modules. Sequences
// of token vectors are `Vec<Vec<f64>>` rows; weight matrices live flat inside
// `ParamTensor` with shape [rows, cols].
// ---------------------------------------------------------------------------

/// Numerically stable softmax. `f64::NEG_INFINITY` entries get weight zero.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; xs.len()];
    }
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Backward of softmax: given outputs `y` and upstream `dy`, returns `dx`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, dyi)| yi * (dyi - dot)).collect()
}

/// Gather embedding rows for a token sequence.
pub fn embed_rows(embedding: &ParamTensor, tokens: &[u32]) -> Vec<Vec<f64>> {
    tokens.iter().map(|&t| embedding.row(t as usize).to_vec()).collect()
}

/// Scatter row gradients back into the embedding table.
pub fn accumulate_embed_grads(embedding: &mut ParamTensor, tokens: &[u32], d_rows: &[Vec<f64>]) {
    if !embedding.trainable {
        return;
    }
    let dim = embedding.shape[1];
    for (&t, dr) in tokens.iter().zip(d_rows) {
        let base = t as usize * dim;
        for (c, d) in dr.iter().enumerate() {
            embedding.grad[base + c] += d;
        }
    }
}

/// `y = x · W` for row sequences, `W` shaped [in, out].
pub(crate) fn linear_forward(x: &[Vec<f64>], w: &ParamTensor) -> Vec<Vec<f64>> {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    x.iter()
        .map(|xi| {
            debug_assert_eq!(xi.len(), n_in);
            let mut y = vec![0.0; n_out];
            for (a, &xa) in xi.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                let row = &w.values[a * n_out..(a + 1) * n_out];
                for (b, &wab) in row.iter().enumerate() {
                    y[b] += xa * wab;
                }
            }
            y
        })
        .collect()
}

/// Backward of [`linear_forward`]: accumulates `dW += xᵀ·dy` and `dx += dy·Wᵀ`.
pub(crate) fn linear_backward(x: &[Vec<f64>], w: &mut ParamTensor, dy: &[Vec<f64>], dx: &mut [Vec<f64>]) {
    let (n_in, n_out) = (w.shape[0], w.shape[1]);
    if w.trainable {
        for (xi, dyi) in x.iter().zip(dy) {
            for (a, &xa) in xi.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                let grow = &mut w.grad[a * n_out..(a + 1) * n_out];
                for (b, &db) in dyi.iter().enumerate() {
                    grow[b] += xa * db;
                }
            }
        }
    }
    for (dxi, dyi) in dx.iter_mut().zip(dy) {
        for a in 0..n_in {
            let row = &w.values[a * n_out..(a + 1) * n_out];
            let mut s = 0.0;
            for (b, &db) in dyi.iter().enumerate() {
                s += db * row[b];
            }
            dxi[a] += s;
        }
    }
}

/// `y = M · x` for a square matrix stored in a rank-2 tensor.
pub(crate) fn matvec(m: &ParamTensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape[0], m.shape[1]);
    debug_assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| {
            let row = &m.values[r * cols..(r + 1) * cols];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Backward of [`matvec`]: `dM += dy ⊗ x`, returns `dx = Mᵀ · dy`.
pub(crate) fn matvec_backward(m: &mut ParamTensor, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.shape[0], m.shape[1]);
    if m.trainable {
        for (r, &dr) in dy.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let grow = &mut m.grad[r * cols..(r + 1) * cols];
            for (c, &xc) in x.iter().enumerate() {
                grow[c] += dr * xc;
            }
        }
    }
    let mut dx = vec![0.0; cols];
    for r in 0..rows {
        let dr = dy[r];
        if dr == 0.0 {
            continue;
        }
        let row = &m.values[r * cols..(r + 1) * cols];
        for (c, &mc) in row.iter().enumerate() {
            dx[c] += dr * mc;
        }
    }
    dx
}
