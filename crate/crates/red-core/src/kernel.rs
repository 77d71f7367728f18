//! ARD-RBF kernels over the raw-feature space and the softmax-output
//! space, composed additively, with analytic gradients in log-parameter
//! space.
//!
//! The composite covariance between two classifier-visible points is
//! `k_c((x, s), (x', s')) = k_in(x, x') + k_out(s, s')` where both parts
//! are squared-exponential kernels with per-dimension lengthscales. The
//! output kernel can be switched off, which is how the staged optimizer
//! schedule runs its first phase.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::RedError;
use crate::Result;

/// Smallest noise variance the log-vector mapping produces. Unconstrained
/// likelihood maximization otherwise drives the noise to the interpolation
/// regime, where the covariance sits at the edge of positive definiteness
/// and refactorization becomes unreliable.
pub const NOISE_VAR_FLOOR: f64 = 1e-8;

/// All trainable hyperparameters of the composite kernel plus the noise
/// variance. Values are stored in linear space; optimization happens on
/// the log vector (see [`KernelHyperparams::to_log_vector`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub input_signal_var: f64,
    pub input_lengthscales: Vec<f64>,
    pub output_signal_var: f64,
    pub output_lengthscales: Vec<f64>,
    pub noise_var: f64,
    pub output_kernel_enabled: bool,
}

impl KernelHyperparams {
    /// Unit hyperparameters for given feature and class dimensions.
    pub fn unit(m: usize, k: usize) -> Self {
        Self {
            input_signal_var: 1.0,
            input_lengthscales: vec![1.0; m],
            output_signal_var: 1.0,
            output_lengthscales: vec![1.0; k],
            noise_var: 1.0,
            output_kernel_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .input_lengthscales
            .iter()
            .chain(self.output_lengthscales.iter())
            .chain([
                &self.input_signal_var,
                &self.output_signal_var,
                &self.noise_var,
            ]);
        for v in all {
            if !v.is_finite() || *v <= 0.0 {
                return Err(RedError::Config(format!(
                    "kernel hyperparameters must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_lengthscales.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_lengthscales.len()
    }

    /// Prior variance of a single point under the composite kernel.
    pub fn prior_amplitude(&self) -> f64 {
        self.input_signal_var
            + if self.output_kernel_enabled {
                self.output_signal_var
            } else {
                0.0
            }
    }

    /// Log-space parameter vector:
    /// `[ln s_in, ln l_in_1.., ln s_out, ln l_out_1.., ln noise]`.
    /// Length is `M + K + 3` regardless of whether the output kernel is
    /// enabled; the enabled flag travels separately.
    pub fn to_log_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.input_dim() + self.output_dim() + 3);
        v.push(self.input_signal_var.ln());
        v.extend(self.input_lengthscales.iter().map(|l| l.ln()));
        v.push(self.output_signal_var.ln());
        v.extend(self.output_lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        DVector::from_vec(v)
    }

    /// Inverse of [`to_log_vector`](Self::to_log_vector), with the noise
    /// variance floored at [`NOISE_VAR_FLOOR`].
    pub fn from_log_vector(v: &DVector<f64>, m: usize, k: usize, output_enabled: bool) -> Self {
        assert_eq!(v.len(), m + k + 3, "log-parameter vector length");
        Self {
            input_signal_var: v[0].exp(),
            input_lengthscales: (0..m).map(|d| v[1 + d].exp()).collect(),
            output_signal_var: v[1 + m].exp(),
            output_lengthscales: (0..k).map(|d| v[2 + m + d].exp()).collect(),
            noise_var: v[m + k + 2].exp().max(NOISE_VAR_FLOOR),
            output_kernel_enabled: output_enabled,
        }
    }

    /// Names matching the log-vector layout, for reports.
    pub fn param_names(m: usize, k: usize) -> Vec<String> {
        let mut names = vec!["input_signal_var".to_string()];
        names.extend((0..m).map(|d| format!("input_lengthscale_{d}")));
        names.push("output_signal_var".to_string());
        names.extend((0..k).map(|d| format!("output_lengthscale_{d}")));
        names.push("noise_var".to_string());
        names
    }
}

/// Squared-exponential kernel with per-dimension lengthscales:
/// `signal_var * exp(-0.5 * sum_d (a_d - b_d)^2 / l_d^2)`.
pub fn rbf(a: &[f64], b: &[f64], signal_var: f64, lengthscales: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), lengthscales.len());
    let mut q = 0.0;
    for d in 0..a.len() {
        let diff = (a[d] - b[d]) / lengthscales[d];
        q += diff * diff;
    }
    signal_var * (-0.5 * q).exp()
}

/// Gram matrix of the ARD-RBF kernel via the fused squared-norm expansion
/// `|u_i|^2 + |u_j|^2 - 2 u_i . u_j` on lengthscale-scaled rows, with tiny
/// negatives clamped to zero.
pub(crate) fn rbf_matrix(
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    signal_var: f64,
    lengthscales: &[f64],
) -> DMatrix<f64> {
    let ua = scale_columns(xa, lengthscales);
    let ub = scale_columns(xb, lengthscales);
    let sq_a: Vec<f64> = (0..ua.nrows()).map(|i| ua.row(i).norm_squared()).collect();
    let sq_b: Vec<f64> = (0..ub.nrows()).map(|i| ub.row(i).norm_squared()).collect();
    let mut gram = &ua * ub.transpose();
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let d2 = (sq_a[i] + sq_b[j] - 2.0 * gram[(i, j)]).max(0.0);
            gram[(i, j)] = signal_var * (-0.5 * d2).exp();
        }
    }
    gram
}

fn scale_columns(x: &DMatrix<f64>, lengthscales: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] / lengthscales[j])
}

fn check_dims(
    xa: &DMatrix<f64>,
    sa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    sb: &DMatrix<f64>,
    hp: &KernelHyperparams,
) -> Result<()> {
    if xa.ncols() != hp.input_dim() || xb.ncols() != hp.input_dim() {
        return Err(RedError::Dimension(format!(
            "feature width {} / {} vs {} input lengthscales",
            xa.ncols(),
            xb.ncols(),
            hp.input_dim()
        )));
    }
    if sa.ncols() != hp.output_dim() || sb.ncols() != hp.output_dim() {
        return Err(RedError::Dimension(format!(
            "softmax width {} / {} vs {} output lengthscales",
            sa.ncols(),
            sb.ncols(),
            hp.output_dim()
        )));
    }
    if xa.nrows() != sa.nrows() || xb.nrows() != sb.nrows() {
        return Err(RedError::Dimension(
            "feature and softmax row counts differ".into(),
        ));
    }
    Ok(())
}

/// Composite covariance matrix between row blocks `(Xa, Sa)` and
/// `(Xb, Sb)`: entry (i, j) is the input kernel on feature rows plus,
/// when enabled, the output kernel on softmax rows.
pub fn io_kernel_matrix(
    xa: &DMatrix<f64>,
    sa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
    sb: &DMatrix<f64>,
    hp: &KernelHyperparams,
) -> Result<DMatrix<f64>> {
    check_dims(xa, sa, xb, sb, hp)?;
    let mut k = rbf_matrix(xa, xb, hp.input_signal_var, &hp.input_lengthscales);
    if hp.output_kernel_enabled {
        k += rbf_matrix(sa, sb, hp.output_signal_var, &hp.output_lengthscales);
    }
    Ok(k)
}

/// Composite covariance of one query point against itself.
pub fn io_kernel_point(x: &[f64], s: &[f64], hp: &KernelHyperparams) -> f64 {
    let mut v = rbf(x, x, hp.input_signal_var, &hp.input_lengthscales);
    if hp.output_kernel_enabled {
        v += rbf(s, s, hp.output_signal_var, &hp.output_lengthscales);
    }
    v
}

/// Gradients of the symmetric composite Gram matrix with respect to each
/// log-hyperparameter, in log-vector order without the trailing noise
/// entry (the Gram matrix does not contain the noise term; its gradient
/// is handled where the noise is added).
///
/// When the output kernel is disabled its gradient matrices are zero.
pub fn io_kernel_gradients(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    hp: &KernelHyperparams,
) -> Result<Vec<DMatrix<f64>>> {
    check_dims(x, s, x, s, hp)?;
    let n = x.nrows();
    let m = hp.input_dim();
    let k = hp.output_dim();
    let k_in = rbf_matrix(x, x, hp.input_signal_var, &hp.input_lengthscales);
    let mut grads = Vec::with_capacity(m + k + 2);

    // d K / d ln(input_signal_var) is the input part itself
    grads.push(k_in.clone());
    // d K / d ln(l_d): K_in(i,j) * (x_id - x_jd)^2 / l_d^2
    for d in 0..m {
        let l2 = hp.input_lengthscales[d] * hp.input_lengthscales[d];
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let diff = x[(i, d)] - x[(j, d)];
                g[(i, j)] = k_in[(i, j)] * diff * diff / l2;
            }
        }
        grads.push(g);
    }

    if hp.output_kernel_enabled {
        let k_out = rbf_matrix(s, s, hp.output_signal_var, &hp.output_lengthscales);
        grads.push(k_out.clone());
        for d in 0..k {
            let l2 = hp.output_lengthscales[d] * hp.output_lengthscales[d];
            let mut g = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let diff = s[(i, d)] - s[(j, d)];
                    g[(i, j)] = k_out[(i, j)] * diff * diff / l2;
                }
            }
            grads.push(g);
        }
    } else {
        for _ in 0..=k {
            grads.push(DMatrix::zeros(n, n));
        }
    }
    Ok(grads)
}
