//! Maximizes the penalized sampled partial likelihood — a weighted
//! no-intercept logistic regression with all-one responses — with automatic
//! smoothing-parameter selection.
//!
//! Inner loop: penalized IRLS (Newton with step halving, so the penalized
//! log-likelihood never decreases). Outer loop: quasi-Newton ascent with
//! finite-difference gradients on log lambda, maximizing either the Laplace
//! approximate restricted marginal likelihood or (on request) minimizing GCV.
//! Random-effect smoothing parameters read out as sigma = lambda^{-1/2}.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{assemble_design, DesignAssembly, ModelLayout, TermLayout, TermSpec};
use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, chol_solve, dot, sym_inverse_psd};
use crate::sampling::CaseControlDataset;

/// Coefficients larger than this on an unpenalized column flag separation.
pub const SEPARATION_THRESHOLD: f64 = 15.0;

/// Bounds for log lambda; hitting them is a boundary estimate, not a failure.
pub const RHO_MIN: f64 = -16.0;
pub const RHO_MAX: f64 = 28.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Reml,
    Gcv,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reml" => Ok(Criterion::Reml),
            "gcv" => Ok(Criterion::Gcv),
            other => Err(Error::Spec(format!("unknown smoothing criterion '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub criterion: Criterion,
    pub max_irls: usize,
    pub irls_tol: f64,
    pub grad_tol: f64,
    pub max_outer: usize,
    pub outer_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            criterion: Criterion::Reml,
            max_irls: 200,
            irls_tol: 1e-9,
            grad_tol: 1e-8,
            max_outer: 50,
            outer_tol: 1e-4,
        }
    }
}

/// Converged inner fit for one smoothing-parameter vector.
#[derive(Debug, Clone)]
pub struct Pirls {
    pub gamma: DVector<f64>,
    /// (H + S_lambda)^{-1} at convergence
    pub posterior_cov: DMatrix<f64>,
    /// unpenalized weighted log sampled-PL
    pub log_pl: f64,
    pub penalized_ll: f64,
    /// trace of (H + S_lambda)^{-1} H
    pub edf_total: f64,
    pub edf_by_col: Vec<f64>,
    /// X' W X at convergence (negative unpenalized Hessian)
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// penalized log-likelihood after each accepted step
    pub ll_trace: Vec<f64>,
}

fn log_sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        -(-eta).exp().ln_1p()
    } else {
        eta - eta.exp().ln_1p()
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// S_lambda = sum_j lambda_j S_j as a dense d x d matrix.
fn penalty_sum(design: &DesignAssembly, lambda: &[f64]) -> DMatrix<f64> {
    let d = design.layout.d;
    let mut s = DMatrix::<f64>::zeros(d, d);
    for (block, &lam) in design.penalties.iter().zip(lambda) {
        let offset = block.cols.start;
        for i in 0..block.matrix.nrows() {
            for j in 0..block.matrix.ncols() {
                s[(offset + i, offset + j)] += lam * block.matrix[(i, j)];
            }
        }
    }
    s
}

fn penalty_quadratic(design: &DesignAssembly, lambda: &[f64], gamma: &DVector<f64>) -> f64 {
    let mut q = 0.0;
    for (block, &lam) in design.penalties.iter().zip(lambda) {
        let g = gamma.rows(block.cols.start, block.cols.len());
        q += lam * (&block.matrix * &g).dot(&g);
    }
    q
}

fn weighted_log_lik(design: &DesignAssembly, eta: &[f64]) -> f64 {
    design
        .weights
        .iter()
        .zip(eta)
        .map(|(w, e)| w * log_sigmoid(*e))
        .sum()
}

/// Gradient of the penalized log-likelihood at gamma.
pub fn penalized_gradient(
    design: &DesignAssembly,
    lambda: &[f64],
    gamma: &DVector<f64>,
) -> DVector<f64> {
    let eta = design.x.matvec(gamma);
    let resid: Vec<f64> = design
        .weights
        .iter()
        .zip(&eta)
        .map(|(w, e)| w * (1.0 - sigmoid(*e)))
        .collect();
    let mut grad = design.x.weighted_column_sum(&resid);
    for (block, &lam) in design.penalties.iter().zip(lambda) {
        let g = gamma.rows(block.cols.start, block.cols.len());
        let sg = &block.matrix * g;
        for (i, v) in sg.iter().enumerate() {
            grad[block.cols.start + i] -= lam * v;
        }
    }
    grad
}

/// Penalized log-likelihood at gamma (for tests and line searches).
pub fn penalized_log_lik(
    design: &DesignAssembly,
    lambda: &[f64],
    gamma: &DVector<f64>,
) -> f64 {
    let eta = design.x.matvec(gamma);
    weighted_log_lik(design, &eta) - 0.5 * penalty_quadratic(design, lambda, gamma)
}

/// Penalized IRLS from a cold start.
pub fn penalized_irls(design: &DesignAssembly, lambda: &[f64]) -> Result<Pirls> {
    penalized_irls_from(design, lambda, None, &FitOptions::default())
}

/// Penalized IRLS with an optional warm start.
pub fn penalized_irls_from(
    design: &DesignAssembly,
    lambda: &[f64],
    start: Option<&DVector<f64>>,
    options: &FitOptions,
) -> Result<Pirls> {
    if lambda.len() != design.penalties.len() {
        return Err(Error::Spec(format!(
            "expected {} smoothing parameters, got {}",
            design.penalties.len(),
            lambda.len()
        )));
    }
    if lambda.iter().any(|&l| !(l > 0.0)) && !lambda.is_empty() {
        return Err(Error::Spec("smoothing parameters must be positive".into()));
    }
    let d = design.layout.d;
    let s_lambda = penalty_sum(design, lambda);
    let mut gamma = match start {
        Some(g) => g.clone(),
        None => DVector::zeros(d),
    };
    let mut pll = penalized_log_lik(design, lambda, &gamma);
    let mut ll_trace = vec![pll];
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=options.max_irls {
        iterations = iter;
        let grad = penalized_gradient(design, lambda, &gamma);
        grad_norm = grad.amax();
        if grad_norm < options.grad_tol {
            converged = true;
            break;
        }
        let eta = design.x.matvec(&gamma);
        let w_irls: Vec<f64> = design
            .weights
            .iter()
            .zip(&eta)
            .map(|(w, e)| {
                let mu = sigmoid(*e);
                w * mu * (1.0 - mu)
            })
            .collect();
        let mut hp = design.x.weighted_gram(&w_irls);
        hp += &s_lambda;
        let step = chol_solve(&hp, &grad)?;

        // step halving keeps the penalized log-likelihood non-decreasing
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &gamma + &step * alpha;
            let cand_pll = penalized_log_lik(design, lambda, &candidate);
            if cand_pll.is_finite() && cand_pll >= pll - 1e-12 {
                let rel_change = (cand_pll - pll).abs() / (pll.abs() + 1.0);
                gamma = candidate;
                pll = cand_pll;
                ll_trace.push(pll);
                accepted = true;
                if rel_change < options.irls_tol {
                    converged = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no ascent direction left at floating-point resolution
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            iterations,
            grad_norm,
            trace: format!(
                "penalized IRLS: last penalized log-likelihood {pll:.6e}, trace length {}",
                ll_trace.len()
            ),
        });
    }

    // final quantities at the converged gamma
    let eta = design.x.matvec(&gamma);
    let log_pl = weighted_log_lik(design, &eta);
    let w_irls: Vec<f64> = design
        .weights
        .iter()
        .zip(&eta)
        .map(|(w, e)| {
            let mu = sigmoid(*e);
            w * mu * (1.0 - mu)
        })
        .collect();
    let hessian = design.x.weighted_gram(&w_irls);
    let mut hp = hessian.clone();
    hp += &s_lambda;
    let posterior_cov = sym_inverse_psd(&hp);
    let m = &posterior_cov * &hessian;
    let edf_by_col: Vec<f64> = (0..d).map(|j| m[(j, j)]).collect();
    let edf_total = edf_by_col.iter().sum();
    let grad = penalized_gradient(design, lambda, &gamma);

    Ok(Pirls {
        gamma,
        posterior_cov,
        log_pl,
        penalized_ll: pll,
        edf_total,
        edf_by_col,
        hessian,
        iterations,
        grad_norm: grad.amax(),
        ll_trace,
    })
}

/// Value of the smoothing criterion at a given lambda (higher is better for
/// both: GCV is returned negated). Exposed for grid-search verification.
pub fn smoothing_criterion(
    design: &DesignAssembly,
    lambda: &[f64],
    criterion: Criterion,
) -> Result<f64> {
    let fit = penalized_irls(design, lambda)?;
    criterion_from_fit(design, lambda, &fit, criterion)
}

fn criterion_from_fit(
    design: &DesignAssembly,
    lambda: &[f64],
    fit: &Pirls,
    criterion: Criterion,
) -> Result<f64> {
    match criterion {
        Criterion::Reml => {
            let mut hp = fit.hessian.clone();
            hp += &penalty_sum(design, lambda);
            let log_det = chol_log_det(&hp)?;
            let rank_term: f64 = design
                .penalties
                .iter()
                .zip(lambda)
                .map(|(b, &l)| b.rank as f64 * l.ln())
                .sum();
            Ok(fit.penalized_ll + 0.5 * rank_term - 0.5 * log_det)
        }
        Criterion::Gcv => {
            let n: f64 = design.weights.iter().sum();
            let deviance = -2.0 * fit.log_pl;
            let denom = n - fit.edf_total;
            if denom <= 0.0 {
                return Err(Error::Numerical("GCV denominator vanished".into()));
            }
            Ok(-(n * deviance) / (denom * denom))
        }
    }
}

/// Result of the outer smoothing-parameter search.
#[derive(Debug, Clone)]
pub struct SmoothingFit {
    pub lambda: Vec<f64>,
    pub boundary: Vec<bool>,
    pub outer_iterations: usize,
    pub criterion_value: f64,
    pub pirls: Pirls,
}

struct CriterionEval<'a> {
    design: &'a DesignAssembly,
    criterion: Criterion,
    options: FitOptions,
    warm: Option<DVector<f64>>,
    evals: usize,
}

impl<'a> CriterionEval<'a> {
    /// Criterion at rho = log lambda; None when the inner fit breaks down
    /// (treated as an infinitely bad point by the optimizer).
    fn value(&mut self, rho: &[f64]) -> Option<(f64, Pirls)> {
        let lambda: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        self.evals += 1;
        let fit =
            penalized_irls_from(self.design, &lambda, self.warm.as_ref(), &self.options).ok()?;
        let v = criterion_from_fit(self.design, &lambda, &fit, self.criterion).ok()?;
        if !v.is_finite() {
            return None;
        }
        self.warm = Some(fit.gamma.clone());
        Some((v, fit))
    }

    fn value_only(&mut self, rho: &[f64]) -> Option<f64> {
        self.value(rho).map(|(v, _)| v)
    }
}

fn clamp_rho(rho: &mut [f64]) {
    for r in rho.iter_mut() {
        *r = r.clamp(RHO_MIN, RHO_MAX);
    }
}

fn fd_gradient(eval: &mut CriterionEval<'_>, rho: &[f64], f0: f64, h: f64) -> Option<Vec<f64>> {
    let q = rho.len();
    let mut g = vec![0.0; q];
    for j in 0..q {
        let mut up = rho.to_vec();
        let mut dn = rho.to_vec();
        up[j] = (rho[j] + h).min(RHO_MAX);
        dn[j] = (rho[j] - h).max(RHO_MIN);
        if (up[j] - dn[j]).abs() < 1e-12 {
            g[j] = 0.0;
            continue;
        }
        let fu = eval.value_only(&up);
        let fd = eval.value_only(&dn);
        g[j] = match (fu, fd) {
            (Some(fu), Some(fd)) => (fu - fd) / (up[j] - dn[j]),
            (Some(fu), None) => (fu - f0) / (up[j] - rho[j]),
            (None, Some(fd)) => (f0 - fd) / (rho[j] - dn[j]),
            (None, None) => return None,
        };
    }
    Some(g)
}

/// Maximize the smoothing criterion over log lambda with BFGS and
/// finite-difference gradients, starting from lambda = 1.
pub fn optimize_smoothing(
    design: &DesignAssembly,
    options: &FitOptions,
) -> Result<SmoothingFit> {
    let q = design.penalties.len();
    if q == 0 {
        let pirls = penalized_irls_from(design, &[], None, options)?;
        return Ok(SmoothingFit {
            lambda: vec![],
            boundary: vec![],
            outer_iterations: 0,
            criterion_value: f64::NAN,
            pirls,
        });
    }
    let mut eval = CriterionEval {
        design,
        criterion: options.criterion,
        options: options.clone(),
        warm: None,
        evals: 0,
    };
    let mut rho = vec![0.0; q];
    let (mut f0, mut best_fit) = eval
        .value(&rho)
        .ok_or_else(|| Error::Numerical("smoothing criterion undefined at lambda = 1".into()))?;
    let h = 1e-3;
    let mut grad = fd_gradient(&mut eval, &rho, f0, h)
        .ok_or_else(|| Error::Numerical("criterion gradient undefined at lambda = 1".into()))?;
    // inverse Hessian approximation for the minimization of -criterion
    let mut b_inv = DMatrix::<f64>::identity(q, q);
    let mut outer_iterations = 0;

    for _ in 0..options.max_outer {
        outer_iterations += 1;
        let g_inf = grad.iter().fold(0.0_f64, |a, &g| a.max(g.abs()));
        if g_inf < 1e-5 {
            break;
        }
        // ascent direction: B^{-1} grad (BFGS tracks -criterion)
        let gvec = DVector::from_column_slice(&grad);
        let mut dir = &b_inv * &gvec;
        if dir.dot(&gvec) <= 0.0 {
            // lost positive definiteness; reset
            b_inv = DMatrix::identity(q, q);
            dir = gvec.clone();
        }
        // cap the step so one outer iteration cannot jump across the box
        let dmax = dir.amax();
        if dmax > 5.0 {
            dir *= 5.0 / dmax;
        }

        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<f64>, f64, Pirls)> = None;
        for _ in 0..25 {
            let mut cand: Vec<f64> = rho
                .iter()
                .zip(dir.iter())
                .map(|(r, d)| r + alpha * d)
                .collect();
            clamp_rho(&mut cand);
            if cand == rho {
                break;
            }
            if let Some((fc, fit)) = eval.value(&cand) {
                let ascent: f64 = gvec
                    .iter()
                    .zip(cand.iter().zip(&rho))
                    .map(|(g, (c, r))| g * (c - r))
                    .sum();
                if fc > f0 + 1e-4 * ascent.max(0.0) {
                    accepted = Some((cand, fc, fit));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((rho_new, f_new, fit_new)) = accepted else {
            break; // no improving step: converged (possibly at a boundary)
        };
        let step_inf = rho_new
            .iter()
            .zip(&rho)
            .fold(0.0_f64, |a, (n, o)| a.max((n - o).abs()));
        let grad_new = match fd_gradient(&mut eval, &rho_new, f_new, h) {
            Some(g) => g,
            None => {
                rho = rho_new;
                f0 = f_new;
                best_fit = fit_new;
                break;
            }
        };
        // BFGS update on phi = -criterion: s = step, y = grad_phi_new - grad_phi
        let s = DVector::from_iterator(q, rho_new.iter().zip(&rho).map(|(n, o)| n - o));
        let y = DVector::from_iterator(q, grad_new.iter().zip(&grad).map(|(n, o)| -(n - o)));
        let sy = s.dot(&y);
        if sy > 1e-10 {
            let by = &b_inv * &y;
            let yby = y.dot(&by);
            let c1 = (sy + yby) / (sy * sy);
            b_inv = b_inv.clone() + (&s * s.transpose()) * c1
                - (&by * s.transpose() + &s * by.transpose()) / sy;
        }
        rho = rho_new;
        f0 = f_new;
        grad = grad_new;
        best_fit = fit_new;
        if step_inf < options.outer_tol {
            break;
        }
    }

    // a block whose criterion stays flat all the way to a box edge is an
    // effectively-zero (or unpenalized) term: snap it and report a boundary
    // estimate rather than an arbitrary interior stop on the plateau
    let mut boundary = vec![false; q];
    for j in 0..q {
        if rho[j] <= RHO_MIN + 1e-6 || rho[j] >= RHO_MAX - 1e-6 {
            boundary[j] = true;
            continue;
        }
        for bound in [RHO_MAX, RHO_MIN] {
            let mut probe = rho.clone();
            probe[j] = bound;
            if let Some((v, fit)) = eval.value(&probe) {
                if v >= f0 - 1e-3 {
                    rho = probe;
                    f0 = f0.max(v);
                    best_fit = fit;
                    boundary[j] = true;
                    break;
                }
            }
        }
    }

    Ok(SmoothingFit {
        lambda: rho.iter().map(|r| r.exp()).collect(),
        boundary,
        outer_iterations,
        criterion_value: f0,
        pirls: best_fit,
    })
}

// ---------------------------------------------------------------------------
// FitResult
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceInfo {
    pub outer_iterations: usize,
    pub irls_iterations: usize,
    pub grad_norm: f64,
    pub criterion_value: f64,
    /// penalty-block labels whose smoothing parameter hit the search bounds
    pub boundary: Vec<String>,
}

/// A fitted smooth relational event model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitResult {
    pub layout: ModelLayout,
    pub gamma: Vec<f64>,
    /// coefficients keyed by term then column/level name
    pub coefficients: BTreeMap<String, BTreeMap<String, f64>>,
    /// smoothing parameter per penalty block
    pub lambda: BTreeMap<String, f64>,
    /// sigma = lambda^{-1/2} per random-effect block
    pub re_sd: BTreeMap<String, f64>,
    pub edf_by_term: BTreeMap<String, f64>,
    pub edf_total: f64,
    pub edf_corrected: f64,
    pub log_pl: f64,
    pub aic_corrected: f64,
    /// true when the smoothing-uncertainty correction fell back to plain EDF
    pub aic_correction_fallback: bool,
    /// (H + S_lambda)^{-1}, row-major
    pub posterior_cov: Vec<Vec<f64>>,
    pub separation_flags: Vec<String>,
    pub convergence: ConvergenceInfo,
    pub criterion: Criterion,
    pub n_events: usize,
    pub m: usize,
    pub matched: bool,
}

impl FitResult {
    pub fn cov_block(&self, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        DMatrix::from_fn(cols.len(), cols.len(), |i, j| {
            self.posterior_cov[cols.start + i][cols.start + j]
        })
    }

    /// Linear predictor for one dyad's absolute covariates.
    pub fn eta_absolute(
        &self,
        year: f64,
        x_abs: &[f64],
        sender: &str,
        receiver: &str,
        labels: &[String],
    ) -> f64 {
        self.layout
            .eta_absolute(&self.gamma, year, x_abs, sender, receiver, labels)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Corrected AIC: -2 log_pl + 2 edf_corrected, where the corrected EDF
/// accounts for smoothing-parameter uncertainty (first-order correction using
/// d gamma / d log lambda and the criterion's curvature). Falls back to the
/// plain EDF when the curvature solve fails.
pub fn corrected_aic(fit: &FitResult) -> f64 {
    fit.aic_corrected
}

fn edf_correction(
    design: &DesignAssembly,
    smooth: &SmoothingFit,
    options: &FitOptions,
) -> Option<f64> {
    let q = design.penalties.len();
    if q == 0 {
        return Some(0.0);
    }
    let active: Vec<usize> = (0..q).filter(|&j| !smooth.boundary[j]).collect();
    if active.is_empty() {
        return Some(0.0);
    }
    let rho: Vec<f64> = smooth.lambda.iter().map(|l| l.ln()).collect();
    let mut eval = CriterionEval {
        design,
        criterion: options.criterion,
        options: options.clone(),
        warm: Some(smooth.pirls.gamma.clone()),
        evals: 0,
    };
    let f0 = eval.value_only(&rho)?;
    let h = 1e-2;
    let na = active.len();
    // negative Hessian of the criterion on the active blocks
    let mut neg_h = DMatrix::<f64>::zeros(na, na);
    for (ai, &j) in active.iter().enumerate() {
        let mut up = rho.clone();
        let mut dn = rho.clone();
        up[j] += h;
        dn[j] -= h;
        let fu = eval.value_only(&up)?;
        let fd = eval.value_only(&dn)?;
        neg_h[(ai, ai)] = -(fu - 2.0 * f0 + fd) / (h * h);
    }
    for (ai, &j) in active.iter().enumerate() {
        for (bi, &l) in active.iter().enumerate().skip(ai + 1) {
            let mut pp = rho.clone();
            let mut pm = rho.clone();
            let mut mp = rho.clone();
            let mut mm = rho.clone();
            pp[j] += h;
            pp[l] += h;
            pm[j] += h;
            pm[l] -= h;
            mp[j] -= h;
            mp[l] += h;
            mm[j] -= h;
            mm[l] -= h;
            let v = -(eval.value_only(&pp)? - eval.value_only(&pm)? - eval.value_only(&mp)?
                + eval.value_only(&mm)?)
                / (4.0 * h * h);
            neg_h[(ai, bi)] = v;
            neg_h[(bi, ai)] = v;
        }
    }
    let v_rho = neg_h.clone().cholesky()?.inverse();

    // J_j = d gamma / d rho_j = -lambda_j (H + S)^{-1} S_j gamma
    let pirls = &smooth.pirls;
    let mut j_cols: Vec<DVector<f64>> = Vec::with_capacity(na);
    for &j in &active {
        let block = &design.penalties[j];
        let g = pirls.gamma.rows(block.cols.start, block.cols.len());
        let sg = &block.matrix * g;
        let mut rhs = DVector::<f64>::zeros(design.layout.d);
        for (i, v) in sg.iter().enumerate() {
            rhs[block.cols.start + i] = *v;
        }
        let jj = &pirls.posterior_cov * rhs * (-smooth.lambda[j]);
        j_cols.push(jj);
    }
    let mut corr = 0.0;
    for a in 0..na {
        let hja = &pirls.hessian * &j_cols[a];
        for b in 0..na {
            corr += v_rho[(a, b)] * j_cols[b].dot(&hja);
        }
    }
    if corr.is_finite() {
        Some(corr.max(0.0))
    } else {
        None
    }
}

/// Assemble, select smoothing parameters, and fit. Deterministic.
pub fn fit_smooth_rem(
    dataset: &CaseControlDataset,
    terms: &[TermSpec],
    options: &FitOptions,
) -> Result<FitResult> {
    if dataset.rows.is_empty() {
        return Err(Error::Spec("dataset has no rows".into()));
    }
    let design = assemble_design(dataset, terms)?;
    if design.layout.d > dataset.n_events {
        return Err(Error::TooManyCoefficients {
            d: design.layout.d,
            n_events: dataset.n_events,
        });
    }
    let smooth = optimize_smoothing(&design, options)?;
    finish_fit(&design, smooth, options, dataset.n_events, dataset.m, dataset.matched)
}

fn finish_fit(
    design: &DesignAssembly,
    smooth: SmoothingFit,
    options: &FitOptions,
    n_events: usize,
    m: usize,
    matched: bool,
) -> Result<FitResult> {
    let layout = design.layout.clone();
    let pirls = &smooth.pirls;
    let d = layout.d;

    let mut coefficients = BTreeMap::new();
    let mut edf_by_term = BTreeMap::new();
    for term in &layout.terms {
        let cols = term.cols();
        let mut by_name = BTreeMap::new();
        for c in cols.clone() {
            let col_name = match term {
                TermLayout::RandomEffect { levels, col_start, .. } => {
                    levels[c - col_start].clone()
                }
                _ => layout.col_names[c].clone(),
            };
            by_name.insert(col_name, pirls.gamma[c]);
        }
        coefficients.insert(term.name().to_string(), by_name);
        edf_by_term.insert(
            term.name().to_string(),
            cols.map(|c| pirls.edf_by_col[c]).sum(),
        );
    }

    let mut lambda = BTreeMap::new();
    let mut re_sd = BTreeMap::new();
    let mut boundary_labels = Vec::new();
    for (j, block) in design.penalties.iter().enumerate() {
        lambda.insert(block.label.clone(), smooth.lambda[j]);
        if block.is_random_effect {
            re_sd.insert(block.label.clone(), smooth.lambda[j].powf(-0.5));
        }
        if smooth.boundary[j] {
            boundary_labels.push(block.label.clone());
        }
    }

    // separation: large coefficients on unpenalized columns
    let penalized_cols: std::collections::HashSet<usize> = design
        .penalties
        .iter()
        .flat_map(|b| b.cols.clone())
        .collect();
    let separation_flags: Vec<String> = (0..d)
        .filter(|c| !penalized_cols.contains(c) && pirls.gamma[*c].abs() > SEPARATION_THRESHOLD)
        .map(|c| layout.col_names[c].clone())
        .collect();

    let (edf_corrected, fallback) = if design.penalties.is_empty() {
        (pirls.edf_total, false)
    } else {
        match edf_correction(design, &smooth, options) {
            Some(corr) => ((pirls.edf_total + corr).min(d as f64), false),
            None => (pirls.edf_total, true),
        }
    };
    let aic_corrected = -2.0 * pirls.log_pl + 2.0 * edf_corrected;

    let posterior_cov: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| pirls.posterior_cov[(i, j)]).collect())
        .collect();

    Ok(FitResult {
        layout,
        gamma: pirls.gamma.iter().cloned().collect(),
        coefficients,
        lambda,
        re_sd,
        edf_by_term,
        edf_total: pirls.edf_total,
        edf_corrected,
        log_pl: pirls.log_pl,
        aic_corrected,
        aic_correction_fallback: fallback,
        posterior_cov,
        separation_flags,
        convergence: ConvergenceInfo {
            outer_iterations: smooth.outer_iterations,
            irls_iterations: pirls.iterations,
            grad_norm: pirls.grad_norm,
            criterion_value: smooth.criterion_value,
            boundary: boundary_labels,
        },
        criterion: options.criterion,
        n_events,
        m,
        matched,
    })
}

// ---------------------------------------------------------------------------
// Smooth curves
// ---------------------------------------------------------------------------

/// A time-varying effect evaluated on a year grid with pointwise 95% bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothCurve {
    pub term: String,
    pub years: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Evaluate beta(t) for a time-varying term on a grid, with pointwise
/// standard errors from the posterior covariance block.
pub fn evaluate_tv_effect(fit: &FitResult, term: &str, grid: &[f64]) -> Result<SmoothCurve> {
    let layout = fit
        .layout
        .term(term)
        .ok_or_else(|| Error::Spec(format!("no term named '{term}'")))?;
    let TermLayout::TimeVarying { col_start, col_end, basis, .. } = layout else {
        return Err(Error::Spec(format!("term '{term}' is not time-varying")));
    };
    let cols = *col_start..*col_end;
    let cov = fit.cov_block(cols.clone());
    let gamma_term: Vec<f64> = cols.clone().map(|c| fit.gamma[c]).collect();
    let mut warnings = Vec::new();
    let (w0, w1) = basis.window();
    if grid.iter().any(|&t| t < w0 || t > w1) {
        warnings.push(format!(
            "grid extends outside the observation window [{w0}, {w1}]; values there are extrapolated"
        ));
    }
    let mut estimate = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    let mut lo = Vec::with_capacity(grid.len());
    let mut hi = Vec::with_capacity(grid.len());
    for &t in grid {
        let b = basis.eval(t);
        let val = dot(&b, &gamma_term);
        let bv = DVector::from_column_slice(&b);
        let var = (&cov * &bv).dot(&bv).max(0.0);
        let s = var.sqrt();
        estimate.push(val);
        se.push(s);
        lo.push(val - 1.96 * s);
        hi.push(val + 1.96 * s);
    }
    Ok(SmoothCurve {
        term: term.to_string(),
        years: grid.to_vec(),
        estimate,
        se,
        lo,
        hi,
        warnings,
    })
}

/// Write a smooth curve as `year,estimate,se,lo,hi`.
pub fn write_curve_csv(curve: &SmoothCurve, path: &std::path::Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::csv(path.display().to_string(), e))?;
    w.write_record(["year", "estimate", "se", "lo", "hi"])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    for i in 0..curve.years.len() {
        w.write_record([
            format!("{}", curve.years[i]),
            format!("{}", curve.estimate[i]),
            format!("{}", curve.se[i]),
            format!("{}", curve.lo[i]),
            format!("{}", curve.hi[i]),
        ])
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
