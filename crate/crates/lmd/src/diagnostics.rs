//! Numerical checks of the regret bounds.
//!
//! Three checks are provided. The classical regret bound for exact mirror
//! descent, the approximate-MD regret bound whose right-hand side pays for
//! the forward-backward inconsistency through the dual discrepancy, and the
//! relative-smoothness bound with its M_k approximation-error average. Each
//! check evaluates its inequality at every prefix with a relative slack of
//! 1e-7 on the larger side; a genuine violation indicates a bug in the
//! oracle, the norms, or the constants, not a tolerance issue.

use crate::potentials::{
    backward_map, bregman, exact_inverse_oracle, forward_map, MirrorPair, MirrorPotential,
    OracleOptions, PotentialError,
};
use crate::problems::{Problem, ProblemError};
use crate::solvers::Trace;
use crate::tensor::{Norm, Tensor};
use std::fmt;

const REL_SLACK: f64 = 1e-7;
const ABS_SLACK: f64 = 1e-12;

#[derive(Debug)]
pub enum DiagnosticsError {
    Potential(PotentialError),
    Problem(ProblemError),
    /// No closed-form minimizer and no reference point supplied.
    MissingComparator,
    /// The strong-convexity constant of the objective must be positive.
    MuNotPositive { mu: f64 },
    /// The potential's strong-convexity constant must be positive.
    SigmaNotPositive { sigma: f64 },
    ZeroStepSize { step_index: usize },
    /// Relative smoothness requires L > mu >= 0.
    BadRelativeConstants { l: f64, mu: f64 },
    /// Iterate lists passed to a check have inconsistent lengths.
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for DiagnosticsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Potential(e) => write!(f, "{e}"),
            Self::Problem(e) => write!(f, "{e}"),
            Self::MissingComparator => {
                write!(f, "problem has no closed-form minimizer; supply a reference point")
            }
            Self::MuNotPositive { mu } => write!(f, "need mu > 0, got {mu}"),
            Self::SigmaNotPositive { sigma } => write!(f, "need sigma > 0, got {sigma}"),
            Self::ZeroStepSize { step_index } => {
                write!(f, "step {step_index} has zero size; the 1/(2 t mu) term is undefined")
            }
            Self::BadRelativeConstants { l, mu } => {
                write!(f, "need L > mu >= 0, got L = {l}, mu = {mu}")
            }
            Self::LengthMismatch { expected, got } => {
                write!(f, "expected {expected} iterates, got {got}")
            }
        }
    }
}

impl std::error::Error for DiagnosticsError {}

impl From<PotentialError> for DiagnosticsError {
    fn from(e: PotentialError) -> Self {
        Self::Potential(e)
    }
}
impl From<ProblemError> for DiagnosticsError {
    fn from(e: ProblemError) -> Self {
        Self::Problem(e)
    }
}

fn holds_with_slack(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + REL_SLACK * lhs.abs().max(rhs.abs()) + ABS_SLACK
}

/// Per-iteration decomposition of a regret inequality.
///
/// For the approximate check, row k carries t_k (f(x_k) - f(x*)) on the left
/// and the gradient plus discrepancy payments on the right, with the initial
/// Bregman distance folded into the cumulative right side. The classical
/// check reuses the layout with the per-step Bregman drop in the discrepancy
/// column (it may be negative there; the approximate report's terms are all
/// non-negative).
#[derive(Debug, Clone)]
pub struct RegretReport {
    pub sigma: f64,
    pub mu: f64,
    pub initial_bregman: f64,
    pub lhs_terms: Vec<f64>,
    pub grad_terms: Vec<f64>,
    pub discrepancy_terms: Vec<f64>,
    pub cum_lhs: Vec<f64>,
    pub cum_rhs: Vec<f64>,
    pub holds: Vec<bool>,
    pub all_prefixes_hold: bool,
}

impl RegretReport {
    /// CSV rows `k,lhs_term,grad_term,discrepancy_term,cum_lhs,cum_rhs,holds`
    /// starting from a k = 0 row that carries the initial right-hand side, so
    /// cum_rhs[k] - cum_rhs[k-1] = grad_term[k] + discrepancy_term[k].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,lhs_term,grad_term,discrepancy_term,cum_lhs,cum_rhs,holds\n");
        let rhs0 = if self.cum_rhs.is_empty() {
            self.initial_bregman
        } else {
            self.cum_rhs[0] - self.grad_terms[0] - self.discrepancy_terms[0]
        };
        out.push_str(&format!("0,0,0,0,0,{rhs0},true\n"));
        for k in 0..self.lhs_terms.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                k + 1,
                self.lhs_terms[k],
                self.grad_terms[k],
                self.discrepancy_terms[k],
                self.cum_lhs[k],
                self.cum_rhs[k],
                self.holds[k]
            ));
        }
        out
    }
}

fn comparator_for(prob: &Problem, reference: Option<&Tensor>) -> Result<Tensor, DiagnosticsError> {
    if let Some(r) = reference {
        return Ok(r.clone());
    }
    prob.true_minimizer().ok_or(DiagnosticsError::MissingComparator)
}

/// Classical regret check for exact mirror descent: at every prefix s,
/// sum t_k (f(x_k) - f(x*)) <= B(x*, x_1) - B(x*, x_{s+1})
///                             + (2 sigma)^{-1} sum t_k^2 ||g_k||_*^2.
/// `sigma_override` substitutes the certified constant (for falsification
/// probes); `reference` substitutes the minimizer for problems without one.
pub fn classical_regret_check(
    trace: &Trace,
    p: &MirrorPotential,
    prob: &Problem,
    reference: Option<&Tensor>,
    sigma_override: Option<f64>,
) -> Result<RegretReport, DiagnosticsError> {
    let sigma = sigma_override.unwrap_or_else(|| p.sigma());
    if sigma <= 0.0 {
        return Err(DiagnosticsError::SigmaNotPositive { sigma });
    }
    let star = comparator_for(prob, reference)?;
    let f_star = prob.objective(&star)?;
    let dual_norm = p.natural_norm().dual();
    let steps = trace.completed_steps();

    let mut report = RegretReport {
        sigma,
        mu: 0.0,
        initial_bregman: bregman(p, &star, &trace.iterates[0])?,
        lhs_terms: Vec::with_capacity(steps),
        grad_terms: Vec::with_capacity(steps),
        discrepancy_terms: Vec::with_capacity(steps),
        cum_lhs: Vec::with_capacity(steps),
        cum_rhs: Vec::with_capacity(steps),
        holds: Vec::with_capacity(steps),
        all_prefixes_hold: true,
    };
    let mut cum_lhs = 0.0;
    let mut cum_grad = 0.0;
    let mut b_prev = report.initial_bregman;
    for k in 0..steps {
        let t = trace.steps[k];
        let xk = &trace.iterates[k];
        let xk1 = &trace.iterates[k + 1];
        let lhs = t * (prob.objective(xk)? - f_star);
        let g = prob.subgradient(xk)?;
        let grad_term = t * t * dual_norm.eval(&g).powi(2) / (2.0 * sigma);
        let b_next = bregman(p, &star, xk1)?;
        let drop = b_prev - b_next;
        b_prev = b_next;
        cum_lhs += lhs;
        cum_grad += grad_term;
        // cumulative right side telescopes to B(x*,x_1) - B(x*,x_{s+1})
        let cum_rhs = report.initial_bregman - b_next + cum_grad;
        let ok = holds_with_slack(cum_lhs, cum_rhs);
        report.all_prefixes_hold &= ok;
        report.lhs_terms.push(lhs);
        report.grad_terms.push(grad_term);
        report.discrepancy_terms.push(drop);
        report.cum_lhs.push(cum_lhs);
        report.cum_rhs.push(cum_rhs);
        report.holds.push(ok);
    }
    Ok(report)
}

/// Strong-convexity handling for the approximate check: either the problem's
/// own certified constant, or an explicit quadratic augmentation
/// (1/2) mu ||x||^2 added to both the objective and its subgradient.
#[derive(Debug, Clone, Copy)]
pub enum MuSpec {
    FromProblem,
    Augmented { mu: f64 },
}

/// Approximate-MD regret check: at every prefix K, the step-weighted regret
/// sum t_k (f(x~_k) - f(x*)) stays below B(x*, x~_1) plus the per-step sum
/// of (1/sigma) t_k^2 ||g(x~_k)||_*^2 and
/// (1/(2 t_k mu) + 1/sigma) ||grad Psi(x~_{k+1}) - grad Psi(x_{k+1})||_*^2.
///
/// The exact iterate x_{k+1} enters only through its forward image, which
/// equals the dual target grad Psi(x~_k) - t_k g(x~_k) by the optimality of
/// the exact MD step (the subgradient selection at kinks of a piecewise-C1
/// potential). The discrepancy term is therefore evaluated from that
/// identity; the inverse oracle reproduces it whenever the pointwise inverse
/// exists. The bound holds for arbitrary iterate sequences, so it must hold
/// on every admissible run.
pub fn approx_regret_check(
    trace: &Trace,
    pair: &MirrorPair,
    prob: &Problem,
    mu_spec: MuSpec,
    reference: Option<&Tensor>,
) -> Result<RegretReport, DiagnosticsError> {
    let p = &pair.forward;
    let sigma = p.sigma();
    if sigma <= 0.0 {
        return Err(DiagnosticsError::SigmaNotPositive { sigma });
    }
    let primal_norm = p.natural_norm();
    let dual_norm = primal_norm.dual();
    let (mu, aug) = match mu_spec {
        MuSpec::FromProblem => (prob.strong_convexity(primal_norm), 0.0),
        MuSpec::Augmented { mu } => (mu, mu),
    };
    if mu <= 0.0 {
        return Err(DiagnosticsError::MuNotPositive { mu });
    }
    let objective = |x: &Tensor| -> Result<f64, DiagnosticsError> {
        Ok(prob.objective(x)? + 0.5 * aug * x.dot(x).map_err(ProblemError::from)?)
    };
    let subgradient = |x: &Tensor| -> Result<Tensor, DiagnosticsError> {
        let mut g = prob.subgradient(x)?;
        if aug > 0.0 {
            g.axpy(aug, x);
        }
        Ok(g)
    };
    let star = comparator_for(prob, reference)?;
    let f_star = objective(&star)?;
    let steps = trace.completed_steps();

    let mut report = RegretReport {
        sigma,
        mu,
        initial_bregman: bregman(p, &star, &trace.iterates[0])?,
        lhs_terms: Vec::with_capacity(steps),
        grad_terms: Vec::with_capacity(steps),
        discrepancy_terms: Vec::with_capacity(steps),
        cum_lhs: Vec::with_capacity(steps),
        cum_rhs: Vec::with_capacity(steps),
        holds: Vec::with_capacity(steps),
        all_prefixes_hold: true,
    };
    let mut cum_lhs = 0.0;
    let mut cum_rhs = report.initial_bregman;
    for k in 0..steps {
        let t = trace.steps[k];
        if t == 0.0 {
            return Err(DiagnosticsError::ZeroStepSize { step_index: k + 1 });
        }
        let xk = &trace.iterates[k];
        let xk1 = &trace.iterates[k + 1];
        let g = subgradient(xk)?;
        let lhs = t * (objective(xk)? - f_star);
        let grad_term = t * t * dual_norm.eval(&g).powi(2) / sigma;
        let dual_target = forward_map(p, xk)?
            .sub(&g.scale(t))
            .map_err(PotentialError::from)?;
        let disc = forward_map(p, xk1)?
            .sub(&dual_target)
            .map_err(PotentialError::from)?;
        let disc_term = (1.0 / (2.0 * t * mu) + 1.0 / sigma) * dual_norm.eval(&disc).powi(2);
        cum_lhs += lhs;
        cum_rhs += grad_term + disc_term;
        let ok = holds_with_slack(cum_lhs, cum_rhs);
        report.all_prefixes_hold &= ok;
        report.lhs_terms.push(lhs);
        report.grad_terms.push(grad_term);
        report.discrepancy_terms.push(disc_term);
        report.cum_lhs.push(cum_lhs);
        report.cum_rhs.push(cum_rhs);
        report.holds.push(ok);
    }
    Ok(report)
}

/// The true inverse of the forward map, without any projection: closed form
/// for the exact kinds (entropic uses exp(y - 1), the unconstrained inverse)
/// and the numerical oracle for the ICNN.
fn raw_inverse(
    pair: &MirrorPair,
    dual: &Tensor,
    oracle: OracleOptions,
) -> Result<Tensor, DiagnosticsError> {
    match &pair.forward {
        MirrorPotential::Entropic { .. } => Ok(dual.map(|v| (v - 1.0).exp())),
        MirrorPotential::Euclidean { .. }
        | MirrorPotential::Quadratic { .. }
        | MirrorPotential::OneLayer { .. } => Ok(backward_map(
            &crate::potentials::BackwardMap::ExactConjugate,
            &pair.forward,
            dual,
        )?),
        MirrorPotential::Icnn(_) => Ok(exact_inverse_oracle(&pair.forward, dual, oracle)?),
    }
}

/// Relative-smoothness bound report (L, mu relative to the potential).
#[derive(Debug, Clone)]
pub struct RelativeBoundReport {
    pub l: f64,
    pub mu: f64,
    pub initial_bregman: f64,
    /// Per-iteration approximation-error terms
    /// L <grad Psi(x_i) - grad Psi(x~_i), x - x~_i> + <grad f(x_i), x~_i - x_i>.
    pub m_terms: Vec<f64>,
    /// Geometric weights (L/(L-mu))^i.
    pub weights: Vec<f64>,
    /// Weighted running averages M_k.
    pub m_k: Vec<f64>,
    /// mu B / ((1 + mu/(L-mu))^k - 1) + M_k; empty when mu = 0.
    pub strong_bound: Vec<f64>,
    /// (L - mu)/k B + M_k.
    pub weak_bound: Vec<f64>,
    pub min_gap: Vec<f64>,
    pub holds: Vec<bool>,
    pub all_hold: bool,
}

impl RelativeBoundReport {
    /// Recompute M_k directly from its definition (cross-check against the
    /// running-sum values in `m_k`).
    pub fn m_k_from_definition(&self, k: usize) -> f64 {
        let num: f64 = (0..k).map(|i| self.weights[i] * self.m_terms[i]).sum();
        let den: f64 = self.weights[..k].iter().sum();
        num / den
    }
}

/// Evaluate the relative-smoothness bound over iterates generated by single
/// exact MD steps of size 1/L: for every k,
/// min_{1<=i<=k} f(x~_i) - f(x) <= mu B(x, x~_0)/((1+mu/(L-mu))^k - 1) + M_k
///                              <= (L-mu)/k B(x, x~_0) + M_k.
///
/// `tilde` is the full sequence x~_0..x~_n. `exact` carries x_1..x_n; pass
/// `None` in the exact case, which aliases x_i = x~_i and makes every M_k
/// term identically zero by construction.
pub fn relative_bound_check(
    tilde: &[Tensor],
    exact: Option<&[Tensor]>,
    p: &MirrorPotential,
    prob: &Problem,
    l: f64,
    mu: f64,
    comparator: &Tensor,
) -> Result<RelativeBoundReport, DiagnosticsError> {
    if !(l > mu && mu >= 0.0) {
        return Err(DiagnosticsError::BadRelativeConstants { l, mu });
    }
    let n = tilde.len() - 1;
    if let Some(exact) = exact {
        if exact.len() != n {
            return Err(DiagnosticsError::LengthMismatch { expected: n, got: exact.len() });
        }
    }
    let f_x = prob.objective(comparator)?;
    let b0 = bregman(p, comparator, &tilde[0])?;
    let ratio = l / (l - mu);

    let mut report = RelativeBoundReport {
        l,
        mu,
        initial_bregman: b0,
        m_terms: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        m_k: Vec::with_capacity(n),
        strong_bound: Vec::with_capacity(n),
        weak_bound: Vec::with_capacity(n),
        min_gap: Vec::with_capacity(n),
        holds: Vec::with_capacity(n),
        all_hold: true,
    };
    let mut weight = 1.0;
    let mut weight_sum = 0.0;
    let mut weighted_terms = 0.0;
    let mut best = f64::INFINITY;
    for i in 1..=n {
        let x_tilde = &tilde[i];
        let term = match exact {
            None => {
                // aliased references: both differences are exactly zero
                let gpsi = forward_map(p, x_tilde)?;
                let zero_dual = gpsi.sub(&gpsi).map_err(PotentialError::from)?;
                let d = comparator.sub(x_tilde).map_err(PotentialError::from)?;
                l * zero_dual.dot(&d).map_err(PotentialError::from)?
            }
            Some(exact) => {
                let x_i = &exact[i - 1];
                let dual_gap = forward_map(p, x_i)?
                    .sub(&forward_map(p, x_tilde)?)
                    .map_err(PotentialError::from)?;
                let d = comparator.sub(x_tilde).map_err(PotentialError::from)?;
                let drift = x_tilde.sub(x_i).map_err(PotentialError::from)?;
                l * dual_gap.dot(&d).map_err(PotentialError::from)?
                    + prob.subgradient(x_i)?.dot(&drift).map_err(PotentialError::from)?
            }
        };
        weight *= ratio;
        weight_sum += weight;
        weighted_terms += weight * term;
        let m_k = weighted_terms / weight_sum;
        best = best.min(prob.objective(x_tilde)?);
        let gap = best - f_x;
        let weak = (l - mu) / i as f64 * b0 + m_k;
        let mut ok = holds_with_slack(gap, weak);
        if mu > 0.0 {
            let strong = mu * b0 / ((1.0 + mu / (l - mu)).powi(i as i32) - 1.0) + m_k;
            ok &= holds_with_slack(gap, strong);
            report.strong_bound.push(strong);
        }
        report.all_hold &= ok;
        report.m_terms.push(term);
        report.weights.push(weight);
        report.m_k.push(m_k);
        report.weak_bound.push(weak);
        report.min_gap.push(gap);
        report.holds.push(ok);
    }
    Ok(report)
}

/// Generate the exact single-MD-step iterates of the relative bound:
/// x_i = inverse(grad Psi(x~_{i-1}) - (1/L) g(x~_{i-1})).
pub fn relative_exact_iterates(
    pair: &MirrorPair,
    prob: &Problem,
    tilde: &[Tensor],
    l: f64,
    oracle: OracleOptions,
) -> Result<Vec<Tensor>, DiagnosticsError> {
    let mut out = Vec::with_capacity(tilde.len() - 1);
    for x in &tilde[..tilde.len() - 1] {
        let g = prob.subgradient(x)?;
        let dual = forward_map(&pair.forward, x)?
            .sub(&g.scale(1.0 / l))
            .map_err(PotentialError::from)?;
        out.push(raw_inverse(pair, &dual, oracle)?);
    }
    Ok(out)
}

/// Forward-backward inconsistency statistics over a point set.
#[derive(Debug, Clone)]
pub struct FbReport {
    pub per_point: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// ||(backward o forward - identity)(x)|| per point, in the given norm.
pub fn fb_inconsistency(
    pair: &MirrorPair,
    points: &[Tensor],
    norm: Norm,
) -> Result<FbReport, DiagnosticsError> {
    let mut per_point = Vec::with_capacity(points.len());
    for x in points {
        let v = norm.eval(&pair.compose(x)?.sub(x).map_err(PotentialError::from)?);
        per_point.push(v);
    }
    let mean = per_point.iter().sum::<f64>() / per_point.len().max(1) as f64;
    let max = per_point.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(FbReport { per_point, mean, max })
}
