//! Quasi-Newton maximization of the log marginal likelihood with a
//! multi-restart, two-schedule protocol and top-k model selection.
//!
//! Hyperparameters are optimized in log space, which enforces positivity
//! without box constraints. Half the restarts optimize the input kernel
//! first with the output kernel switched off, then re-enable it at fresh
//! initial values and optimize everything jointly; the other half
//! optimize jointly from the start.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::RedError;
use crate::gp::{self, GpModel, SparseGpModel};
use crate::kernel::KernelHyperparams;
use crate::Result;

const GRAD_TOL: f64 = 1e-5;
const REL_IMPROVEMENT_TOL: f64 = 1e-9;
const REL_IMPROVEMENT_WINDOW: usize = 3;
const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

/// Restart protocol parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartSchedule {
    pub num_restarts: usize,
    /// How many restarts run the input-kernel-first staged schedule; the
    /// remainder optimize both kernels jointly from the start.
    pub staged_count: usize,
    pub init_signal_var_range: (f64, f64),
    pub init_lengthscale_range: (f64, f64),
    pub init_noise_range: (f64, f64),
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for RestartSchedule {
    fn default() -> Self {
        Self {
            num_restarts: 20,
            staged_count: 10,
            init_signal_var_range: (0.0, 1.0),
            init_lengthscale_range: (0.0, 10.0),
            init_noise_range: (1e-4, 1.0),
            max_iterations: 1000,
            seed: 0,
        }
    }
}

impl RestartSchedule {
    pub fn joint_count(&self) -> usize {
        self.num_restarts - self.staged_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_restarts == 0 {
            return Err(RedError::Config("num_restarts must be >= 1".into()));
        }
        if self.staged_count > self.num_restarts {
            return Err(RedError::Config(format!(
                "staged_count {} exceeds num_restarts {}",
                self.staged_count, self.num_restarts
            )));
        }
        for (lo, hi) in [
            self.init_signal_var_range,
            self.init_lengthscale_range,
            self.init_noise_range,
        ] {
            if !(hi > lo) || lo < 0.0 {
                return Err(RedError::Config(format!(
                    "invalid init range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Exact or inducing-point fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Exact,
    Sparse { inducing: usize },
}

/// Which schedule a restart followed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Staged,
    Joint,
}

/// Staged hand-off record: phase 2 starts from phase 1's optimized input
/// and noise parameters with freshly drawn output-kernel values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagedTrace {
    pub phase1_final_value: f64,
    pub phase2_initial_value: f64,
    pub phase2_initial_hp: KernelHyperparams,
}

/// Outcome of one restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub restart_index: usize,
    pub kind: ScheduleKind,
    pub final_lml: Option<f64>,
    pub initial_lml: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
    /// Index into the returned candidate list, when the restart produced
    /// a model.
    pub candidate: Option<usize>,
    pub staged_trace: Option<StagedTrace>,
}

/// All restart outcomes plus the indices selected downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub outcomes: Vec<RestartOutcome>,
    /// Candidate indices chosen by top-k selection (filled by the caller).
    pub selected: Vec<usize>,
}

/// A fitted model from one restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GpCandidate {
    Exact(GpModel),
    Sparse(SparseGpModel),
}

impl GpCandidate {
    /// Training objective value used for tie-breaks: the exact log
    /// marginal likelihood, or the collapsed bound for sparse models.
    pub fn selection_lml(&self) -> f64 {
        match self {
            GpCandidate::Exact(m) => m.lml,
            GpCandidate::Sparse(m) => m.bound,
        }
    }

    pub fn predict(&self, x_star: &[f64], s_star: &[f64]) -> Result<(f64, f64)> {
        match self {
            GpCandidate::Exact(m) => m.predict(x_star, s_star),
            GpCandidate::Sparse(m) => m.predict(x_star, s_star),
        }
    }

    pub fn hp(&self) -> &KernelHyperparams {
        match self {
            GpCandidate::Exact(m) => &m.hp,
            GpCandidate::Sparse(m) => &m.hp,
        }
    }

    /// Rebuilds transient factors after deserialization.
    pub fn rebuild(&mut self) -> Result<()> {
        match self {
            GpCandidate::Exact(m) => m.rebuild(),
            GpCandidate::Sparse(_) => Ok(()),
        }
    }
}

/// An objective to maximize. Evaluations may fail (non-finite values,
/// factorization failures); the line search treats failures as
/// unacceptable steps and shrinks.
pub trait Objective: Sync {
    fn value(&self, x: &DVector<f64>) -> Option<f64>;
    fn value_grad(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;
}

/// Result of one L-BFGS run.
#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximizes `obj` from `x0` with limited-memory BFGS and a backtracking
/// Armijo line search. Terminates on the gradient-norm tolerance, on
/// three consecutive iterations of negligible relative improvement, or at
/// `max_iter`. The returned value never falls below the initial value.
pub fn lbfgs_maximize<O: Objective>(
    obj: &O,
    x0: &DVector<f64>,
    max_iter: usize,
) -> Result<LbfgsOutcome> {
    let (f0, g0) = obj
        .value_grad(x0)
        .ok_or_else(|| RedError::Numerical("objective not finite at initial point".into()))?;

    let mut x = x0.clone();
    let mut f = f0;
    let mut grad = g0;
    let mut pairs: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    // trailing window of objective values for the improvement criterion
    let mut recent: Vec<f64> = vec![f0];
    let mut iterations = 0usize;
    let mut converged = false;

    for _ in 0..max_iter {
        if grad.amax() < GRAD_TOL * (1.0 + f.abs()) {
            converged = true;
            break;
        }

        let mut direction = two_loop_direction(&grad, &pairs);
        let mut slope = grad.dot(&direction);
        if slope <= 0.0 {
            // not an ascent direction; fall back to steepest ascent
            pairs.clear();
            direction = grad.clone();
            slope = grad.dot(&direction);
        }

        let mut step = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        while step >= MIN_STEP {
            let trial = &x + &direction * step;
            if let Some(ft) = obj.value(&trial) {
                if ft >= f + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((x_new, f_new)) = accepted else {
            if iterations == 0 {
                return Err(RedError::Numerical(
                    "line search found no finite improving step from the initial point".into(),
                ));
            }
            break;
        };

        let Some((f_new, g_new)) = obj.value_grad(&x_new).map(|(v, g)| (v.max(f_new), g)) else {
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &grad;
        // curvature pairs for maximization mirror the minimization ones
        // with negated gradients: s^T (g_old - g_new) must be positive
        let sy = s.dot(&(-&y));
        if sy > 1e-10 * s.norm() * y.norm() {
            pairs.push((s, -y));
            if pairs.len() > LBFGS_MEMORY {
                pairs.remove(0);
            }
        }

        x = x_new;
        f = f_new;
        grad = g_new;
        iterations += 1;

        recent.push(f);
        if recent.len() > REL_IMPROVEMENT_WINDOW + 1 {
            recent.remove(0);
        }
        if recent.len() == REL_IMPROVEMENT_WINDOW + 1
            && recent[REL_IMPROVEMENT_WINDOW] - recent[0]
                < REL_IMPROVEMENT_TOL * (1.0 + f.abs())
        {
            converged = true;
            break;
        }
    }

    if !converged && grad.amax() < GRAD_TOL * (1.0 + f.abs()) {
        converged = true;
    }

    Ok(LbfgsOutcome {
        x,
        value: f,
        initial_value: f0,
        iterations,
        converged,
    })
}

/// Two-loop recursion returning an ascent direction `H * grad` where the
/// implicit Hessian approximation is built from minimization-convention
/// pairs.
fn two_loop_direction(grad: &DVector<f64>, pairs: &[(DVector<f64>, DVector<f64>)]) -> DVector<f64> {
    // minimize -f: q = -grad, direction_min = -H q, ascent = -direction_min
    let mut q = -grad.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push((a, rho));
    }
    if let Some((s, y)) = pairs.last() {
        let gamma = s.dot(y) / y.dot(y);
        q *= gamma;
    }
    for ((s, y), (a, rho)) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    // q is now H * (-grad); the ascent direction is -q
    -q
}

/// Which log-vector entries a phase optimizes.
struct ActiveSet {
    template: DVector<f64>,
    active: Vec<usize>,
    m: usize,
    k: usize,
    output_enabled: bool,
}

impl ActiveSet {
    fn embed(&self, reduced: &DVector<f64>) -> DVector<f64> {
        let mut full = self.template.clone();
        for (slot, &idx) in self.active.iter().enumerate() {
            full[idx] = reduced[slot];
        }
        full
    }

    fn extract(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.active.len(), |slot, _| full[self.active[slot]])
    }

    fn hp(&self, reduced: &DVector<f64>) -> KernelHyperparams {
        let full = self.embed(reduced);
        KernelHyperparams::from_log_vector(&full, self.m, self.k, self.output_enabled)
    }
}

struct LmlObjective<'a> {
    x: &'a DMatrix<f64>,
    s: &'a DMatrix<f64>,
    targets: &'a DVector<f64>,
    active: &'a ActiveSet,
}

impl Objective for LmlObjective<'_> {
    fn value(&self, reduced: &DVector<f64>) -> Option<f64> {
        let hp = self.active.hp(reduced);
        gp::log_marginal_likelihood(&hp, self.x, self.s, self.targets)
            .ok()
            .filter(|v| v.is_finite())
    }

    fn value_grad(&self, reduced: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let hp = self.active.hp(reduced);
        let (value, full_grad) = gp::lml_value_and_grad(&hp, self.x, self.s, self.targets).ok()?;
        if !value.is_finite() {
            return None;
        }
        let grad = DVector::from_fn(self.active.active.len(), |slot, _| {
            full_grad[self.active.active[slot]]
        });
        Some((value, grad))
    }
}

fn draw_positive(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    loop {
        let v = rng.gen_range(range.0..range.1);
        if v > 0.0 {
            return v;
        }
    }
}

/// Draws a full initial hyperparameter set in linear space, in the
/// documented order: input signal, input lengthscales, output signal,
/// output lengthscales, noise.
fn draw_init(rng: &mut ChaCha8Rng, m: usize, k: usize, schedule: &RestartSchedule) -> DVector<f64> {
    let mut v = Vec::with_capacity(m + k + 3);
    v.push(draw_positive(rng, schedule.init_signal_var_range).ln());
    for _ in 0..m {
        v.push(draw_positive(rng, schedule.init_lengthscale_range).ln());
    }
    v.push(draw_positive(rng, schedule.init_signal_var_range).ln());
    for _ in 0..k {
        v.push(draw_positive(rng, schedule.init_lengthscale_range).ln());
    }
    v.push(draw_positive(rng, schedule.init_noise_range).ln());
    DVector::from_vec(v)
}

fn input_and_noise_indices(m: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..=m).collect();
    idx.push(m + k + 2);
    idx
}

struct RestartResult {
    outcome: RestartOutcome,
    model: Option<GpCandidate>,
}

#[allow(clippy::too_many_arguments)]
fn run_restart(
    restart_index: usize,
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
    opt_x: &DMatrix<f64>,
    opt_s: &DMatrix<f64>,
    opt_targets: &DVector<f64>,
    schedule: &RestartSchedule,
    output_kernel: bool,
    mode: FitMode,
    sparse_seed: u64,
) -> RestartResult {
    let m = x.ncols();
    let k = s.ncols();
    let kind = if output_kernel && restart_index < schedule.staged_count {
        ScheduleKind::Staged
    } else {
        ScheduleKind::Joint
    };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    rng.set_stream(restart_index as u64 + 1);
    let mut full = draw_init(&mut rng, m, k, schedule);

    let mut outcome = RestartOutcome {
        restart_index,
        kind,
        final_lml: None,
        initial_lml: None,
        iterations: 0,
        converged: false,
        error: None,
        candidate: None,
        staged_trace: None,
    };

    let fail = |mut o: RestartOutcome, err: String| {
        o.error = Some(err);
        RestartResult {
            outcome: o,
            model: None,
        }
    };

    if kind == ScheduleKind::Staged {
        let active1 = ActiveSet {
            template: full.clone(),
            active: input_and_noise_indices(m, k),
            m,
            k,
            output_enabled: false,
        };
        let obj1 = LmlObjective {
            x: opt_x,
            s: opt_s,
            targets: opt_targets,
            active: &active1,
        };
        let start1 = active1.extract(&full);
        let phase1 = match lbfgs_maximize(&obj1, &start1, schedule.max_iterations) {
            Ok(o) => o,
            Err(e) => return fail(outcome, format!("phase 1: {e}")),
        };
        outcome.initial_lml = Some(phase1.initial_value);
        outcome.iterations += phase1.iterations;
        full = active1.embed(&phase1.x);
        // fresh output-kernel draws for the joint phase
        full[1 + m] = draw_positive(&mut rng, schedule.init_signal_var_range).ln();
        for d in 0..k {
            full[2 + m + d] = draw_positive(&mut rng, schedule.init_lengthscale_range).ln();
        }

        let active2 = ActiveSet {
            template: full.clone(),
            active: (0..m + k + 3).collect(),
            m,
            k,
            output_enabled: true,
        };
        let obj2 = LmlObjective {
            x: opt_x,
            s: opt_s,
            targets: opt_targets,
            active: &active2,
        };
        let start2 = active2.extract(&full);
        let phase2 = match lbfgs_maximize(&obj2, &start2, schedule.max_iterations) {
            Ok(o) => o,
            Err(e) => return fail(outcome, format!("phase 2: {e}")),
        };
        outcome.staged_trace = Some(StagedTrace {
            phase1_final_value: phase1.value,
            phase2_initial_value: phase2.initial_value,
            phase2_initial_hp: KernelHyperparams::from_log_vector(&full, m, k, true),
        });
        outcome.iterations += phase2.iterations;
        outcome.converged = phase2.converged;
        full = active2.embed(&phase2.x);
    } else {
        let active = ActiveSet {
            template: full.clone(),
            active: if output_kernel {
                (0..m + k + 3).collect()
            } else {
                input_and_noise_indices(m, k)
            },
            m,
            k,
            output_enabled: output_kernel,
        };
        let obj = LmlObjective {
            x: opt_x,
            s: opt_s,
            targets: opt_targets,
            active: &active,
        };
        let start = active.extract(&full);
        let run = match lbfgs_maximize(&obj, &start, schedule.max_iterations) {
            Ok(o) => o,
            Err(e) => return fail(outcome, format!("{e}")),
        };
        outcome.initial_lml = Some(run.initial_value);
        outcome.iterations = run.iterations;
        outcome.converged = run.converged;
        full = active.embed(&run.x);
    }

    let hp = KernelHyperparams::from_log_vector(&full, m, k, output_kernel);
    let fitted = match mode {
        FitMode::Exact => gp::fit_exact(&hp, x, s, targets).map(GpCandidate::Exact),
        FitMode::Sparse { inducing } => {
            gp::fit_sparse(&hp, x, s, targets, inducing.min(x.nrows()), sparse_seed)
                .map(GpCandidate::Sparse)
        }
    };
    match fitted {
        Ok(model) => {
            outcome.final_lml = Some(model.selection_lml());
            RestartResult {
                outcome,
                model: Some(model),
            }
        }
        Err(e) => fail(outcome, format!("final fit: {e}")),
    }
}

/// Runs the full restart protocol on `(x, s, targets)` and returns every
/// successfully fitted model plus a per-restart report.
///
/// `output_kernel = false` collapses the schedule to single-phase
/// input-kernel-only restarts (used by the direct-GP baseline). In sparse
/// mode, hyperparameters are optimized against the exact log marginal
/// likelihood restricted to the seeded inducing subset, then each final
/// model is fitted on the full data with those hyperparameters.
pub fn multi_restart_fit(
    x: &DMatrix<f64>,
    s: &DMatrix<f64>,
    targets: &DVector<f64>,
    schedule: &RestartSchedule,
    output_kernel: bool,
    mode: FitMode,
) -> Result<(Vec<GpCandidate>, FitReport)> {
    schedule.validate()?;
    if x.nrows() < 2 {
        return Err(RedError::Data("need at least 2 training rows".into()));
    }
    let sparse_seed = schedule.seed.wrapping_add(104_729);

    // in sparse mode the optimization objective runs on the inducing subset
    let (opt_x, opt_s, opt_targets) = match mode {
        FitMode::Exact => (x.clone(), s.clone(), targets.clone()),
        FitMode::Sparse { inducing } => {
            let probe = gp::fit_sparse(
                &KernelHyperparams::unit(x.ncols(), s.ncols()),
                x,
                s,
                targets,
                inducing.min(x.nrows()),
                sparse_seed,
            )?;
            let idx = probe.inducing_indices;
            let sub_x = DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
            let sub_s = DMatrix::from_fn(idx.len(), s.ncols(), |i, j| s[(idx[i], j)]);
            let sub_t = DVector::from_fn(idx.len(), |i, _| targets[idx[i]]);
            (sub_x, sub_s, sub_t)
        }
    };

    let results: Vec<RestartResult> = (0..schedule.num_restarts)
        .into_par_iter()
        .map(|r| {
            run_restart(
                r,
                x,
                s,
                targets,
                &opt_x,
                &opt_s,
                &opt_targets,
                schedule,
                output_kernel,
                mode,
                sparse_seed,
            )
        })
        .collect();

    let mut candidates = Vec::new();
    let mut outcomes = Vec::with_capacity(results.len());
    for result in results {
        let mut outcome = result.outcome;
        if let Some(model) = result.model {
            outcome.candidate = Some(candidates.len());
            candidates.push(model);
        }
        outcomes.push(outcome);
    }
    if candidates.is_empty() {
        return Err(RedError::AllRestartsFailed(schedule.num_restarts));
    }
    Ok((
        candidates,
        FitReport {
            outcomes,
            selected: Vec::new(),
        },
    ))
}

/// Picks the `k` models with the highest scores; ties broken by higher
/// training objective, then by lower index.
pub fn select_top(scores: &[f64], lmls: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(RedError::Data("no models to select from".into()));
    }
    if scores.len() != lmls.len() {
        return Err(RedError::Dimension(
            "scores and objective values differ in length".into(),
        ));
    }
    if k > scores.len() {
        return Err(RedError::Config(format!(
            "cannot select top {k} of {} models",
            scores.len()
        )));
    }
    let key = |i: usize| {
        // NaN scores sort below everything
        let s = if scores[i].is_nan() {
            f64::NEG_INFINITY
        } else {
            scores[i]
        };
        let l = if lmls[i].is_nan() {
            f64::NEG_INFINITY
        } else {
            lmls[i]
        };
        (s, l)
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, la) = key(a);
        let (sb, lb) = key(b);
        sb.partial_cmp(&sa)
            .unwrap()
            .then(lb.partial_cmp(&la).unwrap())
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}
