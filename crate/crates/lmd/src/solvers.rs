//! Iteration engines: exact mirror descent, approximate (learned) mirror
//! descent, gradient descent, and an Adam baseline, all producing a [`Trace`].
//!
//! The mirror descent update is x_{k+1} = backward(forward(x_k) - t_k g_k)
//! with g_k a subgradient of the objective at x_k. Exact pairs use the true
//! inverse map; learned pairs substitute the backward network and can
//! optionally track the exact iterate through the inverse oracle for the
//! regret diagnostics.

use crate::potentials::{
    backward_map, exact_inverse_oracle, forward_map, Domain, MirrorPair, MirrorPotential,
    OracleOptions, PotentialError,
};
use crate::problems::{Problem, ProblemError};
use crate::tensor::{Norm, Tensor};
use std::fmt;

/// Any iterate coordinate beyond this magnitude marks the run diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug)]
pub enum SolverError {
    Potential(PotentialError),
    Problem(ProblemError),
    /// md_run needs an exact-conjugate backward map.
    BackwardNotExact,
    /// bregman_project is defined for the entropic potential only.
    ProjectionUnsupported { kind: &'static str },
    NonPositiveInput { index: usize, value: f64 },
    /// The oracle failed to invert the forward map at some step.
    Oracle { step: usize, source: PotentialError },
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Potential(e) => write!(f, "{e}"),
            Self::Problem(e) => write!(f, "{e}"),
            Self::BackwardNotExact => write!(f, "exact mirror descent needs an exact backward map"),
            Self::ProjectionUnsupported { kind } => {
                write!(f, "bregman projection onto the simplex is entropic-only, got {kind}")
            }
            Self::NonPositiveInput { index, value } => {
                write!(f, "projection input coordinate {index} = {value} must be positive")
            }
            Self::Oracle { step, source } => write!(f, "oracle failed at step {step}: {source}"),
        }
    }
}

impl std::error::Error for SolverError {}

impl From<PotentialError> for SolverError {
    fn from(e: PotentialError) -> Self {
        Self::Potential(e)
    }
}
impl From<ProblemError> for SolverError {
    fn from(e: ProblemError) -> Self {
        Self::Problem(e)
    }
}

/// Step-size rule. Step indices are 1-based; learned schedules reuse their
/// last value beyond the trained horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    Fixed { base: f64 },
    Multiplied { base: f64, multiplier: f64 },
    Learned { values: Vec<f64>, clip: (f64, f64) },
}

impl StepSchedule {
    pub fn fixed(base: f64) -> Self {
        assert!(base > 0.0);
        Self::Fixed { base }
    }

    pub fn multiplied(base: f64, multiplier: f64) -> Self {
        assert!(base > 0.0 && multiplier > 0.0);
        Self::Multiplied { base, multiplier }
    }

    pub fn learned(values: Vec<f64>, clip: (f64, f64)) -> Self {
        assert!(!values.is_empty() && clip.0 > 0.0 && clip.0 < clip.1);
        Self::Learned { values, clip }
    }

    /// Realized step size for 1-based step `k`.
    pub fn step(&self, k: usize) -> f64 {
        match self {
            Self::Fixed { base } => *base,
            Self::Multiplied { base, multiplier } => base * multiplier,
            Self::Learned { values, clip } => {
                let idx = (k - 1).min(values.len() - 1);
                values[idx].clamp(clip.0, clip.1)
            }
        }
    }
}

/// Per-iteration record of a solver run.
///
/// `iterates[0]` is the starting point; row `k >= 1` of the CSV describes the
/// state after the k-th update. The forward-backward inconsistency of step k
/// is measured at the point the step was taken from; the dual discrepancy
/// compares the new learned iterate against the exact one in the max norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub iterates: Vec<Tensor>,
    pub objectives: Vec<f64>,
    pub steps: Vec<f64>,
    pub fb_inconsistency: Vec<Option<f64>>,
    pub dual_discrepancy: Vec<Option<f64>>,
    /// Exact iterates from the inverse oracle, when it was enabled.
    pub oracle_iterates: Vec<Option<Tensor>>,
    /// Step index at which divergence was detected.
    pub diverged: Option<usize>,
}

impl Trace {
    fn with_start(x0: Tensor, f0: f64) -> Self {
        Self {
            iterates: vec![x0],
            objectives: vec![f0],
            steps: Vec::new(),
            fb_inconsistency: Vec::new(),
            dual_discrepancy: Vec::new(),
            oracle_iterates: Vec::new(),
            diverged: None,
        }
    }

    pub fn completed_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().unwrap()
    }

    /// Objective after `k` updates (k = 0 is the starting point).
    pub fn objective_at(&self, k: usize) -> Option<f64> {
        self.objectives.get(k).copied()
    }

    /// CSV serialization: `k,objective,step_size,fb_inconsistency,
    /// dual_discrepancy`, one row per iteration, empty field when a column is
    /// disabled. `train_horizon` appends a marker column flagging row k = N.
    pub fn to_csv(&self, train_horizon: Option<usize>) -> String {
        let mut out = String::new();
        out.push_str("k,objective,step_size,fb_inconsistency,dual_discrepancy");
        if train_horizon.is_some() {
            out.push_str(",marker");
        }
        out.push('\n');
        for k in 0..self.objectives.len() {
            let step = if k == 0 { String::new() } else { format!("{}", self.steps[k - 1]) };
            let fb = if k == 0 {
                String::new()
            } else {
                self.fb_inconsistency[k - 1].map_or(String::new(), |v| format!("{v}"))
            };
            let dd = if k == 0 {
                String::new()
            } else {
                self.dual_discrepancy[k - 1].map_or(String::new(), |v| format!("{v}"))
            };
            out.push_str(&format!("{k},{},{step},{fb},{dd}", self.objectives[k]));
            if let Some(n) = train_horizon {
                out.push_str(if k == n { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        if let Some(k) = self.diverged {
            out.push_str(&format!("# diverged_at={k}\n"));
        }
        out
    }
}

fn diverged(x: &Tensor, f: f64) -> bool {
    !f.is_finite() || !x.all_finite() || x.data().iter().any(|v| v.abs() > DIVERGENCE_LIMIT)
}

/// Bregman projection onto the simplex: for the entropic potential the
/// minimizer of B(x, y) over the simplex is y / sum(y).
pub fn bregman_project(p: &MirrorPotential, y: &Tensor) -> Result<Tensor, SolverError> {
    match p {
        MirrorPotential::Entropic { .. } => {
            for (i, &v) in y.data().iter().enumerate() {
                if v <= 0.0 {
                    return Err(SolverError::NonPositiveInput { index: i, value: v });
                }
            }
            let s = y.sum();
            Ok(y.scale(1.0 / s))
        }
        other => Err(SolverError::ProjectionUnsupported { kind: other.kind_name() }),
    }
}

/// Exact mirror descent: x_{k+1} = backward(forward(x_k) - t_k g_k).
/// Simplex-domain problems under the entropic pair get a Bregman projection
/// after each step (a renormalization; the backward map already lands there).
pub fn md_run(
    pair: &MirrorPair,
    prob: &Problem,
    x0: &Tensor,
    sched: &StepSchedule,
    iterations: usize,
) -> Result<Trace, SolverError> {
    if !pair.backward.is_exact() {
        return Err(SolverError::BackwardNotExact);
    }
    let project = matches!(pair.forward, MirrorPotential::Entropic { .. })
        && prob.domain() == Domain::SimplexInterior;
    let mut trace = Trace::with_start(x0.clone(), prob.objective(x0)?);
    let mut x = x0.clone();
    for k in 1..=iterations {
        let t = sched.step(k);
        let g = prob.subgradient(&x)?;
        let dual = forward_map(&pair.forward, &x)?.sub(&g.scale(t)).map_err(PotentialError::from)?;
        let mut next = backward_map(&pair.backward, &pair.forward, &dual)?;
        if project {
            next = bregman_project(&pair.forward, &next)?;
        }
        let f = prob.objective(&next).unwrap_or(f64::NAN);
        if diverged(&next, f) {
            trace.diverged = Some(k);
            break;
        }
        trace.steps.push(t);
        trace.fb_inconsistency.push(None);
        trace.dual_discrepancy.push(None);
        trace.oracle_iterates.push(None);
        trace.iterates.push(next.clone());
        trace.objectives.push(f);
        x = next;
    }
    Ok(trace)
}

/// Whether approximate MD also tracks the exact iterate via the oracle.
#[derive(Debug, Clone, Copy)]
pub enum OracleMode {
    Off,
    On(OracleOptions),
}

/// Approximate mirror descent with a learned (or exact) backward map.
/// Logs the forward-backward inconsistency (L1) at each source point; with
/// the oracle on it also computes the exact iterate and the dual discrepancy
/// in the max norm.
pub fn approx_md_run(
    pair: &MirrorPair,
    prob: &Problem,
    x0: &Tensor,
    sched: &StepSchedule,
    iterations: usize,
    oracle: OracleMode,
) -> Result<Trace, SolverError> {
    let mut trace = Trace::with_start(x0.clone(), prob.objective(x0)?);
    let mut x = x0.clone();
    for k in 1..=iterations {
        let t = sched.step(k);
        let g = prob.subgradient(&x)?;
        let fwd = forward_map(&pair.forward, &x)?;
        let dual = fwd.sub(&g.scale(t)).map_err(PotentialError::from)?;
        let next = backward_map(&pair.backward, &pair.forward, &dual)?;
        let fb = pair
            .compose(&x)?
            .sub(&x)
            .map_err(PotentialError::from)?
            .norm_l1();
        let exact_next = match (&oracle, pair.backward.is_exact()) {
            (OracleMode::Off, _) => None,
            // with an exact backward the learned iterate is the exact iterate
            (OracleMode::On(_), true) => Some(next.clone()),
            (OracleMode::On(opts), false) => Some(
                exact_inverse_oracle(&pair.forward, &dual, *opts)
                    .map_err(|source| SolverError::Oracle { step: k, source })?,
            ),
        };
        let dd = match &exact_next {
            None => None,
            Some(ex) => {
                let a = forward_map(&pair.forward, &next)?;
                let b = forward_map(&pair.forward, ex)?;
                Some(a.sub(&b).map_err(PotentialError::from)?.norm_linf())
            }
        };
        let f = prob.objective(&next).unwrap_or(f64::NAN);
        if diverged(&next, f) {
            trace.diverged = Some(k);
            break;
        }
        trace.steps.push(t);
        trace.fb_inconsistency.push(Some(fb));
        trace.dual_discrepancy.push(dd);
        trace.oracle_iterates.push(exact_next);
        trace.iterates.push(next.clone());
        trace.objectives.push(f);
        x = next;
    }
    Ok(trace)
}

/// Plain (sub)gradient descent: x_{k+1} = x_k - t_k g_k.
pub fn gd_run(
    prob: &Problem,
    x0: &Tensor,
    sched: &StepSchedule,
    iterations: usize,
) -> Result<Trace, SolverError> {
    let mut trace = Trace::with_start(x0.clone(), prob.objective(x0)?);
    let mut x = x0.clone();
    for k in 1..=iterations {
        let t = sched.step(k);
        let g = prob.subgradient(&x)?;
        let next = x.sub(&g.scale(t)).map_err(PotentialError::from)?;
        let f = prob.objective(&next).unwrap_or(f64::NAN);
        if diverged(&next, f) {
            trace.diverged = Some(k);
            break;
        }
        trace.steps.push(t);
        trace.fb_inconsistency.push(None);
        trace.dual_discrepancy.push(None);
        trace.oracle_iterates.push(None);
        trace.iterates.push(next.clone());
        trace.objectives.push(f);
        x = next;
    }
    Ok(trace)
}

/// Adam comparison baseline with the standard (0.9, 0.999) betas and 1e-8
/// epsilon. The trainer's Adam is configured separately.
pub fn adam_run(
    prob: &Problem,
    x0: &Tensor,
    lr: f64,
    iterations: usize,
) -> Result<Trace, SolverError> {
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut trace = Trace::with_start(x0.clone(), prob.objective(x0)?);
    let mut x = x0.clone();
    let mut m = Tensor::zeros(&[x0.len()]);
    let mut v = Tensor::zeros(&[x0.len()]);
    for k in 1..=iterations {
        let g = prob.subgradient(&x)?;
        for i in 0..x.len() {
            let gi = g.data()[i];
            m.data_mut()[i] = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            v.data_mut()[i] = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
        }
        let bc1 = 1.0 - beta1.powi(k as i32);
        let bc2 = 1.0 - beta2.powi(k as i32);
        let mut next = x.clone();
        for i in 0..x.len() {
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            next.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        let f = prob.objective(&next).unwrap_or(f64::NAN);
        if diverged(&next, f) {
            trace.diverged = Some(k);
            break;
        }
        trace.steps.push(lr);
        trace.fb_inconsistency.push(None);
        trace.dual_discrepancy.push(None);
        trace.oracle_iterates.push(None);
        trace.iterates.push(next.clone());
        trace.objectives.push(f);
        x = next;
    }
    Ok(trace)
}

/// Mean/max forward-backward inconsistency over a point set.
pub fn fb_stats(pair: &MirrorPair, points: &[Tensor], norm: Norm) -> Result<(f64, f64), SolverError> {
    let mut mean = 0.0;
    let mut max = 0.0f64;
    for x in points {
        let v = norm.eval(&pair.compose(x)?.sub(x).map_err(PotentialError::from)?);
        mean += v;
        max = max.max(v);
    }
    Ok((mean / points.len().max(1) as f64, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::BackwardMap;
    use crate::problems::{FunctionClass, ProblemKind};
    use crate::rng::{seeded, standard_normal_tensor, uniform_simplex};
    use crate::tensor::Tensor;

    #[test]
    fn euclidean_md_equals_gd_bitwise() {
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 3);
        let (prob, x0) = fc.sample_instance(0);
        let pair = MirrorPair::euclidean(2);
        let sched = StepSchedule::multiplied(1e-2, 2.0);
        let md = md_run(&pair, &prob, &x0, &sched, 40).unwrap();
        let gd = gd_run(&prob, &x0, &sched, 40).unwrap();
        assert_eq!(md, gd);
    }

    #[test]
    fn entropic_md_reaches_kl_target_in_one_unit_step() {
        let mut r = seeded(11);
        let y = uniform_simplex(&mut r, 6);
        let prob = Problem::KlSimplex { y: y.clone() };
        let x0 = uniform_simplex(&mut r, 6);
        let pair = MirrorPair::entropic(6);
        let trace = md_run(&pair, &prob, &x0, &StepSchedule::fixed(1.0), 3).unwrap();
        // dual update cancels 1 + log x0 against the gradient, leaving log y
        assert!(trace.objectives[1] < 1e-12, "objective {}", trace.objectives[1]);
        let x1 = &trace.iterates[1];
        assert!(x1.sub(&y).unwrap().norm_linf() < 1e-12);
    }

    #[test]
    fn entropic_md_iterates_stay_on_simplex() {
        let mut r = seeded(4);
        let y = uniform_simplex(&mut r, 8);
        let prob = Problem::KlSimplex { y };
        let x0 = uniform_simplex(&mut r, 8);
        let pair = MirrorPair::entropic(8);
        let trace = md_run(&pair, &prob, &x0, &StepSchedule::fixed(0.5), 50).unwrap();
        for x in &trace.iterates {
            assert!(x.data().iter().all(|&v| v > 0.0));
            assert!((x.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_md_matches_explicit_update() {
        // with A = W'W the update is x - 2t (x - W^{-1} b)
        let mut r = seeded(6);
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 6);
        let (prob, x0) = fc.sample_instance(1);
        let w = match &prob {
            Problem::Lsq2d { w, .. } => w.clone(),
            _ => unreachable!(),
        };
        let wtw = w.transpose().unwrap().matmul(&w).unwrap();
        let pair = MirrorPair::exact(MirrorPotential::Quadratic { a: wtw }).unwrap();
        let t = 0.07;
        let trace = md_run(&pair, &prob, &x0, &StepSchedule::fixed(t), 5).unwrap();
        let minimizer = prob.true_minimizer().unwrap();
        let mut x = x0.clone();
        for k in 1..=5 {
            let delta = x.sub(&minimizer).unwrap();
            x = x.sub(&delta.scale(2.0 * t)).unwrap();
            assert!(
                trace.iterates[k].sub(&x).unwrap().norm_linf() < 1e-10,
                "mismatch at step {k}"
            );
        }
        let _ = standard_normal_tensor(&mut r, &[2]);
    }

    #[test]
    fn gd_eigen_direction_contracts_nine_times_faster() {
        // f = ||Wx||^2: log-contraction rates along (1,1) and (1,-1) are 18t
        // and 2t; the ratio tends to 9 for small t
        let w = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let prob = Problem::Lsq2d { w, b: Tensor::vector(vec![0.0, 0.0]) };
        let t = 1e-4;
        let sched = StepSchedule::fixed(t);
        let v1 = Tensor::vector(vec![1.0, 1.0]);
        let v2 = Tensor::vector(vec![1.0, -1.0]);
        let t1 = gd_run(&prob, &v1, &sched, 1).unwrap();
        let t2 = gd_run(&prob, &v2, &sched, 1).unwrap();
        let rate1 = -(t1.iterates[1].data()[0] / v1.data()[0]).ln();
        let rate2 = -(t2.iterates[1].data()[0] / v2.data()[0]).ln();
        let ratio = rate1 / rate2;
        assert!((ratio - 9.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn gd_flags_divergence_above_stability_threshold() {
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 5);
        let (prob, x0) = fc.sample_instance(0);
        // stability threshold: t * ||2 W'W||_2 = 18 t < 2
        let stable = gd_run(&prob, &x0, &StepSchedule::fixed(0.1), 100).unwrap();
        assert!(stable.diverged.is_none());
        let unstable = gd_run(&prob, &x0, &StepSchedule::fixed(0.2), 2000).unwrap();
        assert!(unstable.diverged.is_some());
        // prefix preserved
        assert_eq!(unstable.objectives.len(), unstable.iterates.len());
    }

    #[test]
    fn adam_basics() {
        // zero gradient keeps iterates constant
        let prob = Problem::LsqSimplex { y: Tensor::vector(vec![0.5, 0.5]) };
        let x0 = Tensor::vector(vec![0.5, 0.5]);
        let trace = adam_run(&prob, &x0, 5e-2, 5).unwrap();
        for x in &trace.iterates {
            assert_eq!(x, &x0);
        }

        // first step moves by ~ -lr * sign(g) componentwise
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 1);
        let (prob, x0) = fc.sample_instance(0);
        let lr = 5e-2;
        let g = prob.subgradient(&x0).unwrap();
        let trace = adam_run(&prob, &x0, lr, 1).unwrap();
        for i in 0..2 {
            let moved = trace.iterates[1].data()[i] - x0.data()[i];
            let expected = -lr * g.data()[i].signum();
            assert!((moved - expected).abs() < 1e-6, "moved {moved} expected {expected}");
        }

        // monotone decrease on a well-conditioned quadratic
        let prob = Problem::Lsq2d {
            w: Tensor::eye(2),
            b: Tensor::vector(vec![0.0, 0.0]),
        };
        let x0 = Tensor::vector(vec![1.0, -2.0]);
        let trace = adam_run(&prob, &x0, 5e-2, 20).unwrap();
        for k in 1..trace.objectives.len() {
            assert!(trace.objectives[k] <= trace.objectives[k - 1] + 1e-12);
        }
    }

    #[test]
    fn bregman_projection_examples() {
        let p = MirrorPotential::Entropic { dim: 2 };
        let proj = bregman_project(&p, &Tensor::vector(vec![2.0, 2.0])).unwrap();
        assert_eq!(proj.data(), &[0.5, 0.5]);
        let on = Tensor::vector(vec![0.3, 0.7]);
        let again = bregman_project(&p, &on).unwrap();
        assert!(again.sub(&on).unwrap().norm_linf() < 1e-15);

        // projection moves closer in Bregman distance to any simplex point
        let mut r = seeded(14);
        for _ in 0..20 {
            let y = Tensor::vector(crate::rng::uniform_vec(&mut r, 4, 0.1, 3.0));
            let pi = bregman_project(&p, &y).unwrap();
            let xs = uniform_simplex(&mut r, 4);
            let b_pi = crate::potentials::bregman(&p, &xs, &pi).unwrap();
            let b_y = crate::potentials::bregman(&p, &xs, &y).unwrap();
            assert!(b_pi <= b_y + 1e-12);
        }

        let euclid = MirrorPotential::Euclidean { dim: 2 };
        assert!(bregman_project(&euclid, &Tensor::vector(vec![1.0, 1.0])).is_err());
        assert!(bregman_project(&p, &Tensor::vector(vec![-1.0, 1.0])).is_err());
    }

    #[test]
    fn learned_schedule_reuses_last_value() {
        let sched = StepSchedule::learned(vec![0.01, 0.02, 0.03], (1e-3, 1e-1));
        assert_eq!(sched.step(1), 0.01);
        assert_eq!(sched.step(3), 0.03);
        assert_eq!(sched.step(10), 0.03);
        let clipped = StepSchedule::learned(vec![0.5], (1e-3, 1e-1));
        assert_eq!(clipped.step(1), 1e-1);
    }

    #[test]
    fn untrained_backward_network_completes_without_assertion() {
        let mut r = seeded(33);
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 33);
        let (prob, x0) = fc.sample_instance(0);
        let net = crate::potentials::IcnnPotential::init(2, 8, 1e-2, &mut r);
        let mlp = crate::potentials::ScalarMlp::init(2, 8, 1e-2, &mut r);
        // deliberately perturb the backward net away from any inverse
        let mut mlp = mlp;
        mlp.nu *= 3.0;
        let pair = MirrorPair::new(
            MirrorPotential::Icnn(net),
            BackwardMap::GradientOfNetwork(mlp),
            (1e-3, 1e-1),
        )
        .unwrap();
        let trace =
            approx_md_run(&pair, &prob, &x0, &StepSchedule::fixed(1e-2), 10, OracleMode::Off)
                .unwrap();
        // records a (large) inconsistency and completes
        assert_eq!(trace.fb_inconsistency.len(), trace.completed_steps());
        assert!(trace.fb_inconsistency.iter().all(|v| v.is_some()));
    }

    #[test]
    fn dual_discrepancy_recomputable_from_trace() {
        let mut r = seeded(44);
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 44);
        let (prob, x0) = fc.sample_instance(0);
        let net = crate::potentials::IcnnPotential::init(2, 8, 0.05, &mut r);
        let mlp = crate::potentials::ScalarMlp::init(2, 8, 0.05, &mut r);
        let pair = MirrorPair::new(
            MirrorPotential::Icnn(net),
            BackwardMap::GradientOfNetwork(mlp),
            (1e-3, 1e-1),
        )
        .unwrap();
        let trace = approx_md_run(
            &pair,
            &prob,
            &x0,
            &StepSchedule::fixed(1e-2),
            8,
            OracleMode::On(OracleOptions::default()),
        )
        .unwrap();
        for k in 0..trace.completed_steps() {
            let logged = trace.dual_discrepancy[k].unwrap();
            let tilde = forward_map(&pair.forward, &trace.iterates[k + 1]).unwrap();
            let exact =
                forward_map(&pair.forward, trace.oracle_iterates[k].as_ref().unwrap()).unwrap();
            let recomputed = tilde.sub(&exact).unwrap().norm_linf();
            assert_eq!(logged, recomputed);
        }
    }

    #[test]
    fn traces_deterministic() {
        let fc = FunctionClass::new(ProblemKind::KlSimplex, 10);
        let (prob, x0) = fc.sample_instance(2);
        let pair = MirrorPair::entropic(10);
        let sched = StepSchedule::fixed(0.5);
        let a = md_run(&pair, &prob, &x0, &sched, 30).unwrap();
        let b = md_run(&pair, &prob, &x0, &sched, 30).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(Some(10)), b.to_csv(Some(10)));
    }

    #[test]
    fn csv_shape_contract() {
        let fc = FunctionClass::new(ProblemKind::Lsq2d, 2);
        let (prob, x0) = fc.sample_instance(0);
        let trace = gd_run(&prob, &x0, &StepSchedule::fixed(1e-2), 3).unwrap();
        let csv = trace.to_csv(None);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,objective,step_size,fb_inconsistency,dual_discrepancy"
        );
        let row0 = lines.next().unwrap();
        assert!(row0.starts_with("0,"));
        assert!(row0.ends_with(",,,"), "step/fb/dd empty on row 0: {row0}");
        assert_eq!(csv.lines().count(), 5);
    }
}
