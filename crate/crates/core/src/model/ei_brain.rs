use nalgebra::{DMatrix, DVector};

use super::network::BLOCK_OFFSET;
use super::{check_state, NetworkModel, ParameterLayout, ParameterVector, TransitionModel};
use crate::error::{invalid, Result};

/// Two-population (excitatory `p`, inhibitory `r`) regional brain model.
///
/// State is `[p; r]` of length `2n`. With `ψ = tanh(s∘x + c)`:
///
/// ```text
/// p' = p / τp + Wp ψ_p − Jp ∘ ψ_r
/// r' = r / τr + Wr ψ_p − Jr ∘ ψ_r
/// ```
///
/// Trainable blocks are `W_p`, `W_r` (row-major), `J_p`, `J_r` and optionally `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct EiBrainModel {
    pub w_p: DMatrix<f64>,
    pub w_r: DMatrix<f64>,
    pub j_p: DVector<f64>,
    pub j_r: DVector<f64>,
    pub tau_p: DVector<f64>,
    pub tau_r: DVector<f64>,
    pub gain: DVector<f64>,
    pub offset: DVector<f64>,
    pub train_offset: bool,
}

impl EiBrainModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w_p: DMatrix<f64>,
        w_r: DMatrix<f64>,
        j_p: DVector<f64>,
        j_r: DVector<f64>,
        tau_p: DVector<f64>,
        tau_r: DVector<f64>,
        gain: DVector<f64>,
        offset: DVector<f64>,
    ) -> Result<Self> {
        let n = j_p.len();
        if n == 0 {
            return Err(invalid("brain model needs at least one region"));
        }
        let square = |m: &DMatrix<f64>| m.nrows() == n && m.ncols() == n;
        if !square(&w_p) || !square(&w_r) || j_r.len() != n || tau_p.len() != n || tau_r.len() != n {
            return Err(invalid("inconsistent regional dimensions"));
        }
        if gain.len() != 2 * n || offset.len() != 2 * n {
            return Err(invalid("gain and offset must have length 2n"));
        }
        if tau_p.iter().chain(tau_r.iter()).any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(invalid("time constants must be strictly positive"));
        }
        Ok(Self {
            w_p,
            w_r,
            j_p,
            j_r,
            tau_p,
            tau_r,
            gain,
            offset,
            train_offset: false,
        })
    }

    pub fn with_trainable_offset(mut self, train: bool) -> Self {
        self.train_offset = train;
        self
    }

    pub fn n_regions(&self) -> usize {
        self.j_p.len()
    }

    fn psi(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let u = self.gain.component_mul(x) + &self.offset;
        let t = u.map(f64::tanh);
        let d1 = t.map(|v| 1.0 - v * v);
        let d2 = t.map(|v| -2.0 * v * (1.0 - v * v));
        (t, d1, d2)
    }

    /// Coupling matrix `[[Wp, −diag Jp], [Wr, −diag Jr]]` of the stacked network form.
    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        let n = self.n_regions();
        let mut b = DMatrix::zeros(2 * n, 2 * n);
        b.view_mut((0, 0), (n, n)).copy_from(&self.w_p);
        b.view_mut((n, 0), (n, n)).copy_from(&self.w_r);
        for i in 0..n {
            b[(i, n + i)] = -self.j_p[i];
            b[(n + i, n + i)] = -self.j_r[i];
        }
        b
    }

    fn free_mask(&self) -> DMatrix<bool> {
        let n = self.n_regions();
        DMatrix::from_fn(2 * n, 2 * n, |i, j| j < n || j == n + (i % n))
    }

    /// Equivalent [`NetworkModel`] on the stacked `2n` state.
    pub fn to_network(&self) -> Result<NetworkModel> {
        let n = self.n_regions();
        let decay = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                1.0 / self.tau_p[i]
            } else {
                1.0 / self.tau_r[i - n]
            }
        });
        NetworkModel::new(DMatrix::from_diagonal(&decay), self.coupling_matrix(), self.offset.clone())?
            .with_gain(self.gain.clone())?
            .with_free_mask(self.free_mask())
            .map(|m| m.with_trainable_offset(self.train_offset))
    }

    /// Maps a gradient in the layout of [`Self::to_network`] back to this model's layout.
    pub fn pull_back_network_gradient(&self, net_grad: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_regions();
        let net = self.to_network()?;
        if net_grad.len() != net.param_count() {
            return Err(invalid("network gradient has the wrong length"));
        }
        let mut out = DVector::zeros(self.param_count());
        for (idx, (i, j)) in net.free_entries().into_iter().enumerate() {
            let g = net_grad[idx];
            let slot = match (i < n, j < n) {
                (true, true) => i * n + j,
                (false, true) => n * n + (i - n) * n + j,
                (true, false) => {
                    out[2 * n * n + i] = -g;
                    continue;
                }
                (false, false) => {
                    out[2 * n * n + n + (i - n)] = -g;
                    continue;
                }
            };
            out[slot] = g;
        }
        if self.train_offset {
            let start = net.free_count();
            out.rows_mut(2 * n * n + 2 * n, 2 * n)
                .copy_from(&net_grad.rows(start, 2 * n));
        }
        Ok(out)
    }
}

impl TransitionModel for EiBrainModel {
    fn state_dim(&self) -> usize {
        2 * self.n_regions()
    }

    fn layout(&self) -> ParameterLayout {
        let n = self.n_regions();
        let mut layout = ParameterLayout::new();
        layout.push("W_p", n * n);
        layout.push("W_r", n * n);
        layout.push("J_p", n);
        layout.push("J_r", n);
        if self.train_offset {
            layout.push(BLOCK_OFFSET, 2 * n);
        }
        layout
    }

    fn pack_parameters(&self) -> ParameterVector {
        let n = self.n_regions();
        let mut v = Vec::with_capacity(self.param_count());
        for m in [&self.w_p, &self.w_r] {
            for i in 0..n {
                for j in 0..n {
                    v.push(m[(i, j)]);
                }
            }
        }
        v.extend(self.j_p.iter());
        v.extend(self.j_r.iter());
        if self.train_offset {
            v.extend(self.offset.iter());
        }
        ParameterVector {
            values: DVector::from_vec(v),
            layout: self.layout(),
        }
    }

    fn unpack_parameters(&self, values: &DVector<f64>) -> Result<Self> {
        if values.len() != self.param_count() {
            return Err(invalid("parameter vector length does not match the brain model layout"));
        }
        let n = self.n_regions();
        let mut out = self.clone();
        out.w_p = DMatrix::from_row_slice(n, n, &values.as_slice()[..n * n]);
        out.w_r = DMatrix::from_row_slice(n, n, &values.as_slice()[n * n..2 * n * n]);
        out.j_p.copy_from(&values.rows(2 * n * n, n));
        out.j_r.copy_from(&values.rows(2 * n * n + n, n));
        if self.train_offset {
            out.offset.copy_from(&values.rows(2 * n * n + 2 * n, 2 * n));
        }
        Ok(out)
    }

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_regions();
        check_state(x, 2 * n)?;
        let (psi, _, _) = self.psi(x);
        let psi_p = psi.rows(0, n);
        let psi_r = psi.rows(n, n);
        let drive_p = &self.w_p * psi_p;
        let drive_r = &self.w_r * psi_p;
        let mut out = DVector::zeros(2 * n);
        for i in 0..n {
            out[i] = x[i] / self.tau_p[i] + drive_p[i] - self.j_p[i] * psi_r[i];
            out[n + i] = x[n + i] / self.tau_r[i] + drive_r[i] - self.j_r[i] * psi_r[i];
        }
        Ok(out)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.n_regions();
        check_state(x, 2 * n)?;
        let (_, d1, _) = self.psi(x);
        let slope = d1.component_mul(&self.gain);
        let mut f = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                f[(i, j)] = self.w_p[(i, j)] * slope[j];
                f[(n + i, j)] = self.w_r[(i, j)] * slope[j];
            }
            f[(i, i)] += 1.0 / self.tau_p[i];
            f[(i, n + i)] = -self.j_p[i] * slope[n + i];
            f[(n + i, n + i)] = 1.0 / self.tau_r[i] - self.j_r[i] * slope[n + i];
        }
        Ok(f)
    }

    fn param_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.n_regions();
        check_state(x, 2 * n)?;
        let (psi, d1, _) = self.psi(x);
        let mut jac = DMatrix::zeros(2 * n, self.param_count());
        for i in 0..n {
            for j in 0..n {
                jac[(i, i * n + j)] = psi[j];
                jac[(n + i, n * n + i * n + j)] = psi[j];
            }
            jac[(i, 2 * n * n + i)] = -psi[n + i];
            jac[(n + i, 2 * n * n + n + i)] = -psi[n + i];
        }
        if self.train_offset {
            let b = self.coupling_matrix();
            let base = 2 * n * n + 2 * n;
            for k in 0..2 * n {
                for r in 0..2 * n {
                    jac[(r, base + k)] = b[(r, k)] * d1[k];
                }
            }
        }
        Ok(jac)
    }

    fn jacobian_state_derivative(&self, x: &DVector<f64>, k: usize) -> Result<DMatrix<f64>> {
        let n = self.n_regions();
        check_state(x, 2 * n)?;
        if k >= 2 * n {
            return Err(invalid("state coordinate out of range"));
        }
        let (_, _, d2) = self.psi(x);
        let b = self.coupling_matrix();
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        let factor = d2[k] * self.gain[k] * self.gain[k];
        for r in 0..2 * n {
            out[(r, k)] = b[(r, k)] * factor;
        }
        Ok(out)
    }

    fn jacobian_param_derivative(&self, x: &DVector<f64>, idx: usize) -> Result<DMatrix<f64>> {
        let n = self.n_regions();
        check_state(x, 2 * n)?;
        if idx >= self.param_count() {
            return Err(invalid("parameter coordinate out of range"));
        }
        let (_, d1, d2) = self.psi(x);
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        let nn = n * n;
        if idx < nn {
            let (i, j) = (idx / n, idx % n);
            out[(i, j)] = d1[j] * self.gain[j];
        } else if idx < 2 * nn {
            let (i, j) = ((idx - nn) / n, (idx - nn) % n);
            out[(n + i, j)] = d1[j] * self.gain[j];
        } else if idx < 2 * nn + n {
            let i = idx - 2 * nn;
            out[(i, n + i)] = -d1[n + i] * self.gain[n + i];
        } else if idx < 2 * nn + 2 * n {
            let i = idx - 2 * nn - n;
            out[(n + i, n + i)] = -d1[n + i] * self.gain[n + i];
        } else {
            let k = idx - 2 * nn - 2 * n;
            let b = self.coupling_matrix();
            for r in 0..2 * n {
                out[(r, k)] = b[(r, k)] * d2[k] * self.gain[k];
            }
        }
        Ok(out)
    }
}
