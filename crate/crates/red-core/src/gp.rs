//! Exact Gaussian-process regression on residuals, plus a deterministic
//! inducing-point approximation for larger training sets.
//!
//! The exact model factors `K_c + noise_var * I` once with a Cholesky
//! decomposition and reuses the factor for the log marginal likelihood,
//! its gradient, and predictive means/variances. The sparse model is a
//! projected-process approximation with inducing locations fixed to a
//! seeded random training subset; with the inducing set equal to the
//! training set it reproduces the exact model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::RedError;
use crate::kernel::{io_kernel_matrix, io_kernel_point, KernelHyperparams};
use crate::Result;

/// Largest N the exact engine accepts before directing callers to sparse
/// mode.
pub const DEFAULT_EXACT_LIMIT: usize = 4000;

const LN_2PI: f64 = 1.8378770664093453;

/// Factorizes `k` (already including the noise diagonal), escalating a
/// diagonal jitter when plain Cholesky fails: first retry at
/// `1e-8 * mean(diag)`, then x10 per retry, giving up above
/// `1e-2 * mean(diag)`. Returns the factor and the jitter used.
fn factorize(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok((chol, 0.0));
    }
    let base = k.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-8 * base;
    let ceiling = 1e-2 * base;
    while jitter <= ceiling * (1.0 + 1e-12) {
        let mut jittered = k.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(RedError::FactorizationFailed {
        jitter_ceiling: ceiling,
    })
}

fn noisy_kernel(
    hp: &KernelHyperparams,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut k = io_kernel_matrix(x, s, x, s, hp)?;
    for i in 0..k.nrows() {
        k[(i, i)] += hp.noise_var;
    }
    Ok(k)
}

fn lml_from_factor(chol: &Cholesky<f64, Dyn>, targets: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = targets.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * targets.dot(alpha) - log_det_half - 0.5 * n * LN_2PI
}

/// Log marginal likelihood of the residuals under the composite kernel,
/// computed through the factored form.
pub fn log_marginal_likelihood(
    hp: &KernelHyperparams,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> Result<f64> {
    hp.validate()?;
    let k = noisy_kernel(hp, x, s)?;
    let (chol, _) = factorize(&k)?;
    let alpha = chol.solve(targets);
    Ok(lml_from_factor(&chol, targets, &alpha))
}

/// Gradient of the log marginal likelihood with respect to every
/// log-hyperparameter, in log-vector order (noise last). Uses the trace
/// identity `dL/dt = 0.5 tr((alpha alpha^T - K^-1) dK/dt)`.
pub fn lml_gradient(
    hp: &KernelHyperparams,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(lml_value_and_grad(hp, x, s, targets)?.1)
}

/// Value and gradient from a single factorization.
///
/// Gradients use the trace identity `dL/dt = 0.5 tr(A dK/dt)` with
/// `A = alpha alpha^T - K^-1`, fused per kernel block: with
/// `B = A . K_block` (elementwise), the lengthscale gradients reduce to
/// `(sum_i rowsum(B)_i z_id^2 - z_d^T B z_d) / l_d^2`, one gemm for all
/// dimensions instead of one N x N matrix per hyperparameter.
pub fn lml_value_and_grad(
    hp: &KernelHyperparams,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    hp.validate()?;
    let k = noisy_kernel(hp, x, s)?;
    let (chol, _) = factorize(&k)?;
    let alpha = chol.solve(targets);
    let value = lml_from_factor(&chol, targets, &alpha);

    let k_inv = chol.inverse();
    let n = x.nrows();
    let trace_inv: f64 = (0..n).map(|i| k_inv[(i, i)]).sum();
    // A = aa^T - Kinv, shared across all parameter directions
    let mut a_mat = -k_inv;
    for j in 0..n {
        for i in 0..n {
            a_mat[(i, j)] += alpha[i] * alpha[j];
        }
    }

    let m = hp.input_dim();
    let kk = hp.output_dim();
    let mut grad = DVector::zeros(m + kk + 3);

    let block = |gram: &DMatrix<f64>,
                 coords: &DMatrix<f64>,
                 lengthscales: &[f64],
                 grad_out: &mut [f64]| {
        // B = A . gram
        let mut b = gram.clone();
        for (bv, av) in b.iter_mut().zip(a_mat.iter()) {
            *bv *= *av;
        }
        let total: f64 = b.iter().sum();
        // signal-variance direction: dK/d ln s = gram itself
        grad_out[0] = 0.5 * total;
        // lengthscale directions, all dimensions through one product
        let row_sums = DVector::from_fn(n, |i, _| b.row(i).sum());
        let bz = &b * coords;
        for d in 0..coords.ncols() {
            let mut weighted_sq = 0.0;
            let mut quad = 0.0;
            for i in 0..n {
                let z = coords[(i, d)];
                weighted_sq += row_sums[i] * z * z;
                quad += z * bz[(i, d)];
            }
            grad_out[1 + d] = (weighted_sq - quad) / (lengthscales[d] * lengthscales[d]);
        }
    };

    let k_in = crate::kernel::rbf_matrix(x, x, hp.input_signal_var, &hp.input_lengthscales);
    block(
        &k_in,
        x,
        &hp.input_lengthscales,
        &mut grad.as_mut_slice()[0..=m],
    );
    if hp.output_kernel_enabled {
        let k_out =
            crate::kernel::rbf_matrix(s, s, hp.output_signal_var, &hp.output_lengthscales);
        block(
            &k_out,
            s,
            &hp.output_lengthscales,
            &mut grad.as_mut_slice()[m + 1..=m + 1 + kk],
        );
    }
    // noise term: dK/d ln(noise_var) = noise_var * I
    grad[m + kk + 2] = 0.5 * hp.noise_var * (alpha.dot(&alpha) - trace_inv);
    Ok((value, grad))
}

/// A fitted exact GP: the factored covariance plus everything needed to
/// score new points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub hp: KernelHyperparams,
    pub train_x: DMatrix<f64>,
    pub train_s: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub alpha: DVector<f64>,
    pub jitter_used: f64,
    pub lml: f64,
    #[serde(skip)]
    factor: Option<Cholesky<f64, Dyn>>,
}

impl GpModel {
    fn factor(&self) -> &Cholesky<f64, Dyn> {
        self.factor
            .as_ref()
            .expect("GpModel factor missing; call rebuild() after deserializing")
    }

    /// Recomputes the Cholesky factor from the stored arrays (applying the
    /// stored jitter, escalating further only if the recomputed matrix no
    /// longer factors) and verifies the stored `alpha` still solves the
    /// linear system to 1e-8 relative residual.
    pub fn rebuild(&mut self) -> Result<()> {
        let mut k = noisy_kernel(&self.hp, &self.train_x, &self.train_s)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.jitter_used;
        }
        let residual = (&k * &self.alpha - &self.targets).norm();
        let scale = 1.0 + k.norm() * self.alpha.norm();
        if residual > 1e-8 * scale {
            return Err(RedError::Data(format!(
                "stored alpha no longer solves the covariance system \
                 (residual {residual:.3e} against scale {scale:.3e})"
            )));
        }
        let (chol, _) = factorize(&k)?;
        self.factor = Some(chol);
        Ok(())
    }

    /// Predictive mean and latent variance at one query point. The
    /// observation noise is not added; pass `include_noise = true` to the
    /// long form if it should be.
    pub fn predict(&self, x_star: &[f64], s_star: &[f64]) -> Result<(f64, f64)> {
        self.predict_with(x_star, s_star, false)
    }

    /// Leave-one-out predictive means at the training points, from the
    /// closed form `r_i - alpha_i / (K^-1)_ii`. Unlike in-sample
    /// predictions (which interpolate), these measure how well each
    /// training target is explained by the others.
    pub fn loo_residual_means(&self) -> DVector<f64> {
        let k_inv = self.factor().inverse();
        DVector::from_fn(self.targets.len(), |i, _| {
            self.targets[i] - self.alpha[i] / k_inv[(i, i)]
        })
    }

    pub fn predict_with(
        &self,
        x_star: &[f64],
        s_star: &[f64],
        include_noise: bool,
    ) -> Result<(f64, f64)> {
        if x_star.len() != self.train_x.ncols() || s_star.len() != self.train_s.ncols() {
            return Err(RedError::Dimension(format!(
                "query ({}, {}) vs training ({}, {})",
                x_star.len(),
                s_star.len(),
                self.train_x.ncols(),
                self.train_s.ncols()
            )));
        }
        let xq = DMatrix::from_row_slice(1, x_star.len(), x_star);
        let sq = DMatrix::from_row_slice(1, s_star.len(), s_star);
        let k_star = io_kernel_matrix(&self.train_x, &self.train_s, &xq, &sq, &self.hp)?;
        let k_star = k_star.column(0).into_owned();
        let mean = k_star.dot(&self.alpha);
        let prior = io_kernel_point(x_star, s_star, &self.hp);
        let w = self.factor().solve(&k_star);
        let mut var = prior - k_star.dot(&w);
        var = var.clamp(0.0, prior);
        if include_noise {
            var += self.hp.noise_var;
        }
        Ok((mean, var))
    }
}

/// Fits the exact GP at fixed hyperparameters.
pub fn fit_exact(
    hp: &KernelHyperparams,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> Result<GpModel> {
    hp.validate()?;
    let n = x.nrows();
    if n > DEFAULT_EXACT_LIMIT {
        return Err(RedError::Config(format!(
            "{n} training rows exceed the exact-mode limit {DEFAULT_EXACT_LIMIT}; use sparse mode"
        )));
    }
    if n == 0 {
        return Err(RedError::Data("cannot fit a GP on zero rows".into()));
    }
    let k = noisy_kernel(hp, x, s)?;
    let (chol, jitter_used) = factorize(&k)?;
    let alpha = chol.solve(targets);
    let lml = lml_from_factor(&chol, targets, &alpha);
    Ok(GpModel {
        hp: hp.clone(),
        train_x: x.clone(),
        train_s: s.clone(),
        targets: targets.clone(),
        alpha,
        jitter_used,
        lml,
        factor: Some(chol),
    })
}

/// Projected-process sparse GP with fixed inducing locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseGpModel {
    pub hp: KernelHyperparams,
    pub inducing_x: DMatrix<f64>,
    pub inducing_s: DMatrix<f64>,
    /// Indices into the training set the inducing points were taken from.
    pub inducing_indices: Vec<usize>,
    /// Lower Cholesky factor of the (jittered) inducing Gram matrix.
    lm: DMatrix<f64>,
    /// Lower Cholesky factor of `I + A A^T` with `A = Lm^-1 Kmn / noise`.
    lb: DMatrix<f64>,
    /// Projection weights: predictive mean at a query is `u . c` with
    /// `u = Lb^-1 Lm^-1 k_star`.
    c: DVector<f64>,
    pub jitter_used: f64,
    /// Titsias collapsed-bound value at the fitted hyperparameters.
    pub bound: f64,
}

/// Fits the sparse model on `(x, s, targets)` with `p` inducing points
/// drawn as a seeded random subset of the training rows (all of them when
/// `p == n`, which makes the approximation exact).
pub fn fit_sparse(
    hp: &KernelHyperparams,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
    p: usize,
    seed: u64,
) -> Result<SparseGpModel> {
    hp.validate()?;
    let n = x.nrows();
    if p == 0 || p > n {
        return Err(RedError::Config(format!(
            "inducing count {p} must be in [1, {n}]"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(p);
    indices.sort_unstable();

    let inducing_x = DMatrix::from_fn(p, x.ncols(), |i, j| x[(indices[i], j)]);
    let inducing_s = DMatrix::from_fn(p, s.ncols(), |i, j| s[(indices[i], j)]);

    let kmm = io_kernel_matrix(&inducing_x, &inducing_s, &inducing_x, &inducing_s, hp)?;
    let (lm_chol, jitter_used) = factorize(&kmm)?;
    let lm = lm_chol.l();

    let kmn = io_kernel_matrix(&inducing_x, &inducing_s, x, s, hp)?;
    let sigma = hp.noise_var.sqrt();
    let a_sig = lm
        .solve_lower_triangular(&kmn)
        .ok_or_else(|| RedError::Numerical("singular inducing factor".into()))?
        / sigma;

    let mut b = &a_sig * a_sig.transpose();
    for i in 0..p {
        b[(i, i)] += 1.0;
    }
    let lb_chol = Cholesky::new(b.clone()).ok_or(RedError::FactorizationFailed {
        jitter_ceiling: 0.0,
    })?;
    let lb = lb_chol.l();

    let proj = &a_sig * targets;
    let c = lb
        .solve_lower_triangular(&proj)
        .ok_or_else(|| RedError::Numerical("singular projected factor".into()))?
        / sigma;

    // collapsed bound: log N(r | 0, Qnn + noise I) - trace penalty
    let log_det_b: f64 = (0..p).map(|i| 2.0 * lb[(i, i)].ln()).sum();
    let r_norm2 = targets.dot(targets);
    let quad = r_norm2 / hp.noise_var - c.dot(&c);
    let log_det = log_det_b + n as f64 * hp.noise_var.ln();
    let q_diag: Vec<f64> = (0..n)
        .map(|j| {
            let col = a_sig.column(j);
            col.dot(&col) * hp.noise_var
        })
        .collect();
    let mut trace_penalty = 0.0;
    for (j, qd) in q_diag.iter().enumerate() {
        let xx: Vec<f64> = x.row(j).iter().copied().collect();
        let ss: Vec<f64> = s.row(j).iter().copied().collect();
        trace_penalty += io_kernel_point(&xx, &ss, hp) - qd;
    }
    let bound =
        -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * LN_2PI - trace_penalty / (2.0 * hp.noise_var);

    Ok(SparseGpModel {
        hp: hp.clone(),
        inducing_x,
        inducing_s,
        inducing_indices: indices,
        lm,
        lb,
        c,
        jitter_used,
        bound,
    })
}

impl SparseGpModel {
    pub fn predict(&self, x_star: &[f64], s_star: &[f64]) -> Result<(f64, f64)> {
        self.predict_with(x_star, s_star, false)
    }

    pub fn predict_with(
        &self,
        x_star: &[f64],
        s_star: &[f64],
        include_noise: bool,
    ) -> Result<(f64, f64)> {
        if x_star.len() != self.inducing_x.ncols() || s_star.len() != self.inducing_s.ncols() {
            return Err(RedError::Dimension(format!(
                "query ({}, {}) vs inducing ({}, {})",
                x_star.len(),
                s_star.len(),
                self.inducing_x.ncols(),
                self.inducing_s.ncols()
            )));
        }
        let xq = DMatrix::from_row_slice(1, x_star.len(), x_star);
        let sq = DMatrix::from_row_slice(1, s_star.len(), s_star);
        let k_star = io_kernel_matrix(&self.inducing_x, &self.inducing_s, &xq, &sq, &self.hp)?;
        let k_star = k_star.column(0).into_owned();
        let w = self
            .lm
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| RedError::Numerical("singular inducing factor".into()))?;
        let u = self
            .lb
            .solve_lower_triangular(&w)
            .ok_or_else(|| RedError::Numerical("singular projected factor".into()))?;
        let mean = u.dot(&self.c);
        let prior = io_kernel_point(x_star, s_star, &self.hp);
        let mut var = prior - w.dot(&w) + u.dot(&u);
        var = var.clamp(0.0, prior);
        if include_noise {
            var += self.hp.noise_var;
        }
        Ok((mean, var))
    }
}
