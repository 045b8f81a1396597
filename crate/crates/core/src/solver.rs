//! Primal-dual interior-point solver for square nonlinear complementarity
//! systems over the nonnegative orthant.
//!
//! The residual `r(v; rho)` must stack equality rows and relaxed
//! complementarity rows `a_i * b_i - rho`, one per cone pair `(a_i, b_i)`. The
//! solver runs damped Newton iterations on a sequence of relaxed problems with
//! Mehrotra-style adaptive centering: an affine predictor step sets the
//! centering weight, the corrector step carries a second-order complementarity
//! correction, and a fraction-to-boundary rule keeps every cone variable
//! strictly positive. The relaxation decreases monotonically toward
//! `rho_target` and convergence is declared on the residual at `rho_target`.

use crate::linalg::LuSolver;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// A square relaxed nonlinear complementarity system.
pub trait NcpProblem {
    /// Number of variables (= number of residual rows).
    fn dim(&self) -> usize;

    /// Complementarity structure: `(a_index, b_index, residual_row)` for each
    /// cone pair. The residual row must equal `v[a] * v[b] - rho`.
    fn cone_pairs(&self) -> Vec<ConePair>;

    /// Evaluate the residual at relaxation `rho`.
    fn residual(&self, v: &DVector<f64>, rho: f64, out: &mut DVector<f64>);

    /// Evaluate the residual Jacobian (independent of `rho`).
    fn jacobian(&self, v: &DVector<f64>, out: &mut DMatrix<f64>);
}

/// One complementarity pair: variable indices and the residual row that
/// carries their product.
#[derive(Clone, Copy, Debug)]
pub struct ConePair {
    pub a: usize,
    pub b: usize,
    pub row: usize,
}

/// Interior-point options.
#[derive(Clone, Debug)]
pub struct SolverOptions {
    /// Final complementarity relaxation.
    pub rho_target: f64,
    /// Residual infinity-norm tolerance, scaled by `max(1, |r(init)|_inf)`.
    pub tol: f64,
    /// Iteration cap; exceeding it is the step-failure criterion.
    pub max_iter: usize,
    /// Fraction-to-boundary parameter in (0, 1).
    pub tau: f64,
    /// Clamp for the Mehrotra centering weight `sigma`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Apply the second-order complementarity correction.
    pub corrector: bool,
    /// Backtracking halvings allowed per iteration.
    pub max_linesearch: u32,
    /// Additive shift applied to cone variables when warm starting.
    pub warm_perturbation: f64,
    /// Initial diagonal regularization when the Jacobian fails to factor.
    pub regularization: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rho_target: 1e-6,
            tol: 1e-10,
            max_iter: 30,
            tau: 0.99,
            sigma_min: 0.01,
            sigma_max: 1.0,
            corrector: true,
            max_linesearch: 8,
            warm_perturbation: 1e-2,
            regularization: 1e-10,
        }
    }
}

impl SolverOptions {
    /// Defaults for standalone collision solves: stiff relaxation so the
    /// optimal scaling is resolved to full accuracy.
    pub fn collision() -> Self {
        SolverOptions { rho_target: 1e-11, ..Default::default() }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho_target = rho;
        self
    }
}

/// Termination status of a solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Singular,
}

/// One accepted iterate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Residual at the target relaxation after the step.
    pub residual_target: f64,
    /// Relaxation used for this step.
    pub rho: f64,
    /// Accepted step length.
    pub step: f64,
}

/// Solve outcome: final (or best) iterate plus diagnostics.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub v: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub residual_norm: f64,
    pub trace: Vec<IterationRecord>,
    pub factorizations: usize,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Elementwise cone operations for the nonnegative orthant.
pub mod cone {
    use nalgebra::DVector;

    /// Cone product; elementwise for the orthant.
    pub fn product(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        a.component_mul(b)
    }

    /// Neutral element of the cone product.
    pub fn neutral(n: usize) -> DVector<f64> {
        DVector::from_element(n, 1.0)
    }

    /// Largest step `s` in `[0, 1]` with `x + s*dx >= (1 - tau) * x`
    /// componentwise, for strictly positive `x`.
    pub fn min_step(x: &DVector<f64>, dx: &DVector<f64>, tau: f64) -> f64 {
        let mut step = 1.0f64;
        for i in 0..x.len() {
            if dx[i] < 0.0 {
                step = step.min(-tau * x[i] / dx[i]);
            }
        }
        step
    }
}

/// Warm-start vector from a previous solution: cone variables are shifted into
/// the strict interior, everything else is copied.
pub fn warm_start(
    previous: &DVector<f64>,
    pairs: &[ConePair],
    perturbation: f64,
) -> DVector<f64> {
    let mut v = previous.clone();
    for p in pairs {
        v[p.a] += perturbation;
        v[p.b] += perturbation;
    }
    v
}

/// Run the interior-point method from `init`.
///
/// `init` must have strictly positive cone variables; the returned iterate is
/// the converged point or, on failure, the best iterate seen (lowest residual
/// at the target relaxation).
pub fn solve(problem: &dyn NcpProblem, init: &DVector<f64>, opts: &SolverOptions) -> SolveReport {
    let n = problem.dim();
    assert_eq!(init.len(), n, "initial iterate dimension mismatch");
    let pairs = problem.cone_pairs();
    let n_cone = pairs.len();

    let mut v = init.clone();
    let mut r = DVector::zeros(n);
    let mut r_work = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, n);
    let mut trace = Vec::new();
    let mut factorizations = 0usize;

    problem.residual(&v, opts.rho_target, &mut r);
    let scale = 1.0f64.max(r.amax());
    let tol = opts.tol * scale;

    let mut best_v = v.clone();
    let mut best_norm = finite_or_inf(r.amax());
    // Start the relaxation one centering step below the iterate's own
    // complementarity level; warm starts land near the previous solution and
    // begin almost converged.
    let mut rho_k = if n_cone == 0 {
        opts.rho_target
    } else {
        let mu0: f64 = pairs.iter().map(|p| v[p.a] * v[p.b]).sum::<f64>() / n_cone as f64;
        (0.1 * mu0).max(opts.rho_target)
    };
    let mut last_step = 0.0f64;

    for iter in 0..opts.max_iter {
        problem.residual(&v, opts.rho_target, &mut r);
        let norm_target = finite_or_inf(r.amax());
        if norm_target < best_norm {
            best_norm = norm_target;
            best_v.copy_from(&v);
        }
        if norm_target <= tol {
            return SolveReport {
                v,
                status: SolveStatus::Converged,
                iterations: iter,
                residual_norm: norm_target,
                trace,
                factorizations,
            };
        }

        problem.jacobian(&v, &mut jac);
        let mut reg = opts.regularization.min(1e-12);
        let lu = loop {
            let mut m = jac.clone();
            if reg > 0.0 {
                for i in 0..n {
                    m[(i, i)] += reg;
                }
            }
            factorizations += 1;
            match LuSolver::new(m) {
                Some(f) if f.pivot_ratio() > 1e-15 || reg >= 1e-6 => break Some(f),
                _ => {
                    reg = if reg == 0.0 { opts.regularization } else { reg * 100.0 };
                    if reg > 1e-4 {
                        break None;
                    }
                }
            }
        };
        let Some(lu) = lu else {
            return SolveReport {
                v: best_v,
                status: SolveStatus::Singular,
                iterations: iter,
                residual_norm: best_norm,
                trace,
                factorizations,
            };
        };

        // Relaxation schedule: track the iterate's own complementarity level
        // down toward the target. The centering weight comes from a Mehrotra
        // affine probe when the previous step was essentially full (the
        // iterate follows the central path), and stays conservative when
        // steps are being truncated; monotonicity is enforced.
        if n_cone > 0 && rho_k > opts.rho_target {
            let mu: f64 =
                pairs.iter().map(|p| v[p.a] * v[p.b]).sum::<f64>() / n_cone as f64;
            let sigma = if last_step > 0.9 {
                problem.residual(&v, 0.0, &mut r_work);
                let neg_r0 = -&r_work;
                match lu.solve(&neg_r0) {
                    Some(d) => {
                        let step_aff = cone_min_step(&v, &d, &pairs, 1.0);
                        let mu_aff: f64 = pairs
                            .iter()
                            .map(|p| {
                                (v[p.a] + step_aff * d[p.a]).max(0.0)
                                    * (v[p.b] + step_aff * d[p.b]).max(0.0)
                            })
                            .sum::<f64>()
                            / n_cone as f64;
                        ((mu_aff / mu.max(1e-300)).powi(3))
                            .clamp(opts.sigma_min, opts.sigma_max)
                    }
                    None => 0.5,
                }
            } else {
                0.5
            };
            // Cap the decrease rate and keep the relaxation within two
            // decades of the achieved complementarity: the ladder must stay
            // within reach of the Newton basin at each level.
            let proposed = (sigma * mu).max(0.05 * rho_k).max(0.01 * mu);
            rho_k = rho_k.min(proposed.max(opts.rho_target));
        }

        // Corrector step at rho_k, with a second-order complementarity term.
        // If the corrected direction yields no descent (the correction can
        // dominate far from the central path), retry with the plain centered
        // direction before settling for the best trial seen.
        problem.residual(&v, rho_k, &mut r_work);
        let base_norm = finite_or_inf(r_work.norm());
        let neg_r_center = -&r_work;
        let mut chosen = 0.0f64;
        let mut chosen_norm = f64::INFINITY;
        let mut chosen_delta: Option<DVector<f64>> = None;
        let mut descended = false;
        'passes: for with_correction in [opts.corrector && n_cone > 0, false] {
            let mut rhs = neg_r_center.clone();
            if with_correction {
                problem.residual(&v, 0.0, &mut r);
                let neg_r0 = -&r;
                match lu.solve(&neg_r0) {
                    Some(d_aff) => {
                        for p in &pairs {
                            rhs[p.row] -= d_aff[p.a] * d_aff[p.b];
                        }
                    }
                    None => continue,
                }
            }
            let Some(delta) = lu.solve(&rhs) else { continue };
            let step_max = cone_min_step(&v, &delta, &pairs, opts.tau);
            let mut step = step_max;
            for _ in 0..=opts.max_linesearch {
                let trial = &v + step * &delta;
                problem.residual(&trial, rho_k, &mut r_work);
                let norm = finite_or_inf(r_work.norm());
                if norm < chosen_norm {
                    chosen_norm = norm;
                    chosen = step;
                    chosen_delta = Some(delta.clone());
                }
                // Only strong descent short-circuits; otherwise both
                // directions compete and the lowest trial wins.
                if norm <= 0.5 * base_norm {
                    descended = true;
                    break 'passes;
                }
                step *= 0.5;
            }
            if !with_correction {
                break;
            }
        }
        let Some(delta) = chosen_delta else {
            return SolveReport {
                v: best_v,
                status: SolveStatus::Singular,
                iterations: iter,
                residual_norm: best_norm,
                trace,
                factorizations,
            };
        };
        let _ = descended;
        if std::env::var_os("NCP_DEBUG").is_some() {
            eprintln!(
                "[ncp] it {iter} rho {rho_k:.3e} step {chosen:.4} norm_after {chosen_norm:.4e}"
            );
        }
        last_step = chosen;
        v.axpy(chosen, &delta, 1.0);

        problem.residual(&v, opts.rho_target, &mut r);
        trace.push(IterationRecord {
            iter,
            residual_target: finite_or_inf(r.amax()),
            rho: rho_k,
            step: chosen,
        });
    }

    problem.residual(&v, opts.rho_target, &mut r);
    let norm_target = finite_or_inf(r.amax());
    if norm_target <= tol {
        return SolveReport {
            v,
            status: SolveStatus::Converged,
            iterations: opts.max_iter,
            residual_norm: norm_target,
            trace,
            factorizations,
        };
    }
    if norm_target < best_norm {
        best_norm = norm_target;
        best_v.copy_from(&v);
    }
    SolveReport {
        v: best_v,
        status: SolveStatus::MaxIter,
        iterations: opts.max_iter,
        residual_norm: best_norm,
        trace,
        factorizations,
    }
}

fn cone_min_step(v: &DVector<f64>, d: &DVector<f64>, pairs: &[ConePair], tau: f64) -> f64 {
    let mut step = 1.0f64;
    for p in pairs {
        for idx in [p.a, p.b] {
            if d[idx] < 0.0 {
                step = step.min(-tau * v[idx] / d[idx]);
            }
        }
    }
    step
}

fn finite_or_inf(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        f64::INFINITY
    }
}
