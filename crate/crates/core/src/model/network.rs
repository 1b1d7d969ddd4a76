use nalgebra::{DMatrix, DVector};

use super::{check_state, Nonlinearity, ParameterLayout, ParameterVector, TransitionModel};
use crate::error::{invalid, Result};

pub const BLOCK_B: &str = "B.free";
pub const BLOCK_OFFSET: &str = "c";
pub const BLOCK_BIAS: &str = "bias";

/// Recurrent network `f(x) = A x + B φ(s∘x + c) + b`.
///
/// The canonical network form has `b = 0`; the Hopfield form
/// `W tanh(x) + D∘x + c` maps to `A = diag(D)`, `B = W`, `c = 0` inside the
/// activation and the additive term carried by `b`.
///
/// Only entries of `B` selected by `free_mask` are trainable, optionally
/// followed by the activation offset `c` and the additive bias `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    a_matrix: DMatrix<f64>,
    b_matrix: DMatrix<f64>,
    offset: DVector<f64>,
    gain: DVector<f64>,
    bias: DVector<f64>,
    nonlinearity: Nonlinearity,
    free_mask: DMatrix<bool>,
    train_offset: bool,
    train_bias: bool,
}

impl NetworkModel {
    /// Canonical form `A x + B tanh(x + c)`, all of `B` trainable.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(invalid("network dimension must be positive"));
        }
        if a.ncols() != n || b.nrows() != n || b.ncols() != n || offset.len() != n {
            return Err(invalid(format!(
                "inconsistent network shapes: A {}x{}, B {}x{}, c {}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                offset.len()
            )));
        }
        if a.iter().chain(b.iter()).chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("network parameters must be finite"));
        }
        Ok(Self {
            a_matrix: a,
            b_matrix: b,
            offset,
            gain: DVector::from_element(n, 1.0),
            bias: DVector::zeros(n),
            nonlinearity: Nonlinearity::Tanh,
            free_mask: DMatrix::from_element(n, n, true),
            train_offset: false,
            train_bias: false,
        })
    }

    /// Hopfield network `W tanh(x) + D∘x + c`.
    pub fn hopfield(w: DMatrix<f64>, d: DVector<f64>, c: DVector<f64>) -> Result<Self> {
        let n = d.len();
        let a = DMatrix::from_diagonal(&d);
        Self::new(a, w, DVector::zeros(n))?.with_bias(c)
    }

    pub fn with_nonlinearity(mut self, nonlinearity: Nonlinearity) -> Self {
        self.nonlinearity = nonlinearity;
        self
    }

    pub fn with_gain(mut self, gain: DVector<f64>) -> Result<Self> {
        if gain.len() != self.n() || !gain.iter().all(|v| v.is_finite()) {
            return Err(invalid("gain must be a finite vector of length n"));
        }
        self.gain = gain;
        Ok(self)
    }

    pub fn with_bias(mut self, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != self.n() || !bias.iter().all(|v| v.is_finite()) {
            return Err(invalid("bias must be a finite vector of length n"));
        }
        self.bias = bias;
        Ok(self)
    }

    /// Restricts trainable `B` entries to `mask`; masked-out entries are zeroed.
    pub fn with_free_mask(mut self, mask: DMatrix<bool>) -> Result<Self> {
        let n = self.n();
        if mask.nrows() != n || mask.ncols() != n {
            return Err(invalid("free mask must be n x n"));
        }
        for (v, &free) in self.b_matrix.iter_mut().zip(mask.iter()) {
            if !free {
                *v = 0.0;
            }
        }
        self.free_mask = mask;
        Ok(self)
    }

    pub fn with_trainable_offset(mut self, train: bool) -> Self {
        self.train_offset = train;
        self
    }

    pub fn with_trainable_bias(mut self, train: bool) -> Self {
        self.train_bias = train;
        self
    }

    /// Replaces `B`, which must be zero wherever the free mask is false.
    pub fn with_b_matrix(mut self, b: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != self.n() || b.ncols() != self.n() {
            return Err(invalid("B must be n x n"));
        }
        if b.iter().zip(self.free_mask.iter()).any(|(v, &free)| !free && *v != 0.0) {
            return Err(invalid("B has nonzero entries outside the free mask"));
        }
        self.b_matrix = b;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_matrix
    }

    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn gain(&self) -> &DVector<f64> {
        &self.gain
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn free_mask(&self) -> &DMatrix<bool> {
        &self.free_mask
    }

    pub fn trains_offset(&self) -> bool {
        self.train_offset
    }

    pub fn trains_bias(&self) -> bool {
        self.train_bias
    }

    /// Free `B` coordinates in row-major order; this is the order of the `B.free` block.
    pub fn free_entries(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.free_mask[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn free_count(&self) -> usize {
        self.free_mask.iter().filter(|&&f| f).count()
    }

    /// Pre-activation `s∘x + c`.
    pub fn preactivation(&self, x: &DVector<f64>) -> DVector<f64> {
        self.gain.component_mul(x) + &self.offset
    }

    /// `φ(u)`, `φ'(u)` and `φ''(u)` at `u = s∘x + c`.
    pub(crate) fn activations(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let u = self.preactivation(x);
        let nl = self.nonlinearity;
        (u.map(|v| nl.value(v)), u.map(|v| nl.derivative(v)), u.map(|v| nl.second_derivative(v)))
    }

    /// Elementwise `∂²/∂x_i² φ(s_i x_i + c_i) = s_i² φ''(s_i x_i + c_i)`.
    pub fn activation_second_derivative(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(x, self.n())?;
        let (_, _, d2) = self.activations(x);
        Ok(d2.component_mul(&self.gain).component_mul(&self.gain))
    }
}

impl TransitionModel for NetworkModel {
    fn state_dim(&self) -> usize {
        self.n()
    }

    fn layout(&self) -> ParameterLayout {
        let mut layout = ParameterLayout::new();
        layout.push(BLOCK_B, self.free_count());
        if self.train_offset {
            layout.push(BLOCK_OFFSET, self.n());
        }
        if self.train_bias {
            layout.push(BLOCK_BIAS, self.n());
        }
        layout
    }

    fn pack_parameters(&self) -> ParameterVector {
        let mut values: Vec<f64> = self
            .free_entries()
            .into_iter()
            .map(|(i, j)| self.b_matrix[(i, j)])
            .collect();
        if self.train_offset {
            values.extend(self.offset.iter());
        }
        if self.train_bias {
            values.extend(self.bias.iter());
        }
        ParameterVector {
            values: DVector::from_vec(values),
            layout: self.layout(),
        }
    }

    fn unpack_parameters(&self, values: &DVector<f64>) -> Result<Self> {
        let layout = self.layout();
        if values.len() != layout.len() {
            return Err(invalid(format!(
                "parameter vector has length {} but the model has {} trainable parameters",
                values.len(),
                layout.len()
            )));
        }
        let mut out = self.clone();
        let n = self.n();
        let mut idx = 0;
        for (i, j) in self.free_entries() {
            out.b_matrix[(i, j)] = values[idx];
            idx += 1;
        }
        if self.train_offset {
            out.offset.copy_from(&values.rows(idx, n));
            idx += n;
        }
        if self.train_bias {
            out.bias.copy_from(&values.rows(idx, n));
        }
        Ok(out)
    }

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(x, self.n())?;
        let (phi, _, _) = self.activations(x);
        Ok(&self.a_matrix * x + &self.b_matrix * phi + &self.bias)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_state(x, self.n())?;
        let (_, d1, _) = self.activations(x);
        let slope = d1.component_mul(&self.gain);
        let mut f = self.b_matrix.clone();
        for (k, mut col) in f.column_iter_mut().enumerate() {
            col.scale_mut(slope[k]);
        }
        f += &self.a_matrix;
        Ok(f)
    }

    fn param_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_state(x, self.n())?;
        let n = self.n();
        let (phi, d1, _) = self.activations(x);
        let mut jac = DMatrix::zeros(n, self.param_count());
        let mut col = 0;
        for (i, j) in self.free_entries() {
            jac[(i, col)] = phi[j];
            col += 1;
        }
        if self.train_offset {
            for k in 0..n {
                for i in 0..n {
                    jac[(i, col)] = self.b_matrix[(i, k)] * d1[k];
                }
                col += 1;
            }
        }
        if self.train_bias {
            for k in 0..n {
                jac[(k, col)] = 1.0;
                col += 1;
            }
        }
        Ok(jac)
    }

    fn jacobian_state_derivative(&self, x: &DVector<f64>, i: usize) -> Result<DMatrix<f64>> {
        check_state(x, self.n())?;
        let n = self.n();
        if i >= n {
            return Err(invalid("state coordinate out of range"));
        }
        let (_, _, d2) = self.activations(x);
        let s = self.gain[i];
        let mut out = DMatrix::zeros(n, n);
        for r in 0..n {
            out[(r, i)] = self.b_matrix[(r, i)] * d2[i] * s * s;
        }
        Ok(out)
    }

    fn jacobian_param_derivative(&self, x: &DVector<f64>, j: usize) -> Result<DMatrix<f64>> {
        check_state(x, self.n())?;
        let n = self.n();
        let layout = self.layout();
        if j >= layout.len() {
            return Err(invalid("parameter coordinate out of range"));
        }
        let (_, d1, d2) = self.activations(x);
        let mut out = DMatrix::zeros(n, n);
        let free = self.free_count();
        if j < free {
            let (r, k) = self.free_entries()[j];
            out[(r, k)] = d1[k] * self.gain[k];
        } else if self.train_offset && j < free + n {
            let k = j - free;
            for r in 0..n {
                out[(r, k)] = self.b_matrix[(r, k)] * d2[k] * self.gain[k];
            }
        }
        // the additive bias does not enter F
        Ok(out)
    }
}
