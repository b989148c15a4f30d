//! Mirror potentials and their maps.
//!
//! A mirror potential is a convex scalar field: its gradient (the forward
//! map) carries primal points into the dual space, and the inverse gradient
//! (the backward map) carries them back. Four kinds come with closed-form
//! backward maps; the ICNN kind has no closed-form conjugate and pairs with
//! either a learned backward network or the numerical inverse oracle.

use crate::linalg::{self, LinalgError};
use crate::rng;
use crate::tape::{TapeError, TapeGraph};
use crate::tensor::{Norm, Tensor, TensorError};
use rand::rngs::StdRng;
use std::fmt;

const ONE_LAYER_CLIP_EPS: f64 = 1e-6;

#[derive(Debug)]
pub enum PotentialError {
    /// Point lies outside the potential's domain.
    DomainViolation { index: usize, value: f64 },
    WrongKind { expected: &'static str, got: &'static str },
    /// Exact backward map requested for a kind that has none.
    NoExactBackward { kind: &'static str },
    Shape(TensorError),
    Linalg(LinalgError),
    Tape(TapeError),
    OracleDidNotConverge { iters: usize, residual: f64 },
    /// The inverse oracle needs a certified strong-convexity constant.
    OracleUnsupported { kind: &'static str },
    Checkpoint { line: usize, msg: String },
    Io(std::io::Error),
}

impl fmt::Display for PotentialError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DomainViolation { index, value } => {
                write!(f, "coordinate {index} = {value} violates the domain")
            }
            Self::WrongKind { expected, got } => {
                write!(f, "expected {expected} potential, got {got}")
            }
            Self::NoExactBackward { kind } => {
                write!(f, "{kind} potential has no exact backward map")
            }
            Self::Shape(e) => write!(f, "{e}"),
            Self::Linalg(e) => write!(f, "{e}"),
            Self::Tape(e) => write!(f, "{e}"),
            Self::OracleDidNotConverge { iters, residual } => {
                write!(f, "inverse oracle stopped after {iters} iters at residual {residual:e}")
            }
            Self::OracleUnsupported { kind } => {
                write!(f, "inverse oracle needs sigma > 0, unavailable for {kind}")
            }
            Self::Checkpoint { line, msg } => write!(f, "checkpoint line {line}: {msg}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for PotentialError {}

impl From<TensorError> for PotentialError {
    fn from(e: TensorError) -> Self {
        Self::Shape(e)
    }
}
impl From<LinalgError> for PotentialError {
    fn from(e: LinalgError) -> Self {
        Self::Linalg(e)
    }
}
impl From<TapeError> for PotentialError {
    fn from(e: TapeError) -> Self {
        Self::Tape(e)
    }
}
impl From<std::io::Error> for PotentialError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Reals,
    SimplexInterior,
}

/// Fully connected input-convex network with a strong-convexity term.
///
/// Layers follow z_{i+1} = lrelu(W_i^z z_i + W_i^x x + [W_i^q x]^2 + b_i)
/// with the scalar output plus mu * ||x||^2; squaring is elementwise. The
/// per-layer quadratic input skips give the potential piecewise-quadratic
/// pieces, so its gradient can express anisotropic preconditioning rather
/// than only piecewise-constant offsets. Convexity in x holds whenever every
/// W^z entry is non-negative (the other reads of x are convex per
/// coordinate); `clip_icnn_weights` restores that after a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnPotential {
    /// Linear skip weights per layer: shapes [h, d], [h, d], [1, d].
    pub w_x: Vec<Tensor>,
    /// Quadratic skip weights per layer, same shapes as `w_x`.
    pub w_q: Vec<Tensor>,
    /// Inter-layer weights, entrywise >= 0: shapes [h, h], [1, h].
    pub w_z: Vec<Tensor>,
    /// Biases per layer.
    pub b: Vec<Tensor>,
    /// Leaky-ReLU negative slope.
    pub alpha: f64,
    /// Coefficient of the added quadratic term mu * ||x||^2.
    pub mu: f64,
}

impl IcnnPotential {
    /// Two hidden layers of the given width, leaky slope 0.2, weights
    /// clipped non-negative at initialization.
    pub fn init(dim: usize, hidden: usize, mu: f64, rng_seed: &mut StdRng) -> Self {
        let sx0 = 0.1 / (dim as f64).sqrt();
        let sz = 0.1 / (hidden as f64).sqrt();
        let w_x = vec![
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, sx0)).unwrap(),
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, sx0)).unwrap(),
            Tensor::new(vec![1, dim], rng::normal_vec(rng_seed, dim, 0.0, sx0)).unwrap(),
        ];
        let w_z = vec![
            Tensor::new(
                vec![hidden, hidden],
                rng::normal_vec(rng_seed, hidden * hidden, 0.0, sz)
                    .into_iter()
                    .map(f64::abs)
                    .collect(),
            )
            .unwrap(),
            Tensor::new(
                vec![1, hidden],
                rng::normal_vec(rng_seed, hidden, 0.0, sz)
                    .into_iter()
                    .map(f64::abs)
                    .collect(),
            )
            .unwrap(),
        ];
        let b = vec![
            Tensor::vector(rng::normal_vec(rng_seed, hidden, 0.0, 0.01)),
            Tensor::vector(rng::normal_vec(rng_seed, hidden, 0.0, 0.01)),
            Tensor::vector(rng::normal_vec(rng_seed, 1, 0.0, 0.01)),
        ];
        let sq = 0.05 / (dim as f64).sqrt();
        let w_q = vec![
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, sq)).unwrap(),
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, sq)).unwrap(),
            Tensor::new(vec![1, dim], rng::normal_vec(rng_seed, dim, 0.0, sq)).unwrap(),
        ];
        Self { w_x, w_q, w_z, b, alpha: 0.2, mu }
    }

    pub fn dim(&self) -> usize {
        self.w_x[0].cols()
    }

    pub fn layers(&self) -> usize {
        self.w_x.len()
    }

    /// Build the scalar potential value on a tape; returns the root node.
    pub fn value_graph(
        &self,
        tape: &mut TapeGraph,
        x: crate::tape::NodeId,
    ) -> Result<crate::tape::NodeId, TapeError> {
        let mut z = None;
        for i in 0..self.layers() {
            let wx = tape.const_leaf(self.w_x[i].clone());
            let wq = tape.const_leaf(self.w_q[i].clone());
            let bi = tape.const_leaf(self.b[i].clone());
            let lin = tape.matvec(wx, x)?;
            let qx = tape.matvec(wq, x)?;
            let qsq = tape.square(qx)?;
            let mut ai = tape.add(lin, qsq)?;
            if let Some(prev) = z {
                let wz = tape.const_leaf(self.w_z[i - 1].clone());
                let zt = tape.matvec(wz, prev)?;
                ai = tape.add(ai, zt)?;
            }
            let ai = tape.add(ai, bi)?;
            z = Some(tape.leaky_relu(ai, self.alpha)?);
        }
        let chain = tape.reshape(z.expect("at least one layer"), vec![])?;
        let sq = tape.dot(x, x)?;
        let mu = tape.scalar_leaf(self.mu);
        let quad = tape.scalar_mul(mu, sq)?;
        tape.add(chain, quad)
    }
}

/// Unconstrained scalar network whose gradient serves as a learned backward
/// map. Same layer family as the forward net (hidden chain plus per-layer
/// quadratic input skips [U_i y]^2), but with a linear output layer, no
/// weight clipping and no convexity claim.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMlp {
    /// Chain weights: [h, d], [h, h], [1, h].
    pub v: Vec<Tensor>,
    /// Quadratic input skips per layer: [h, d], [h, d], [1, d].
    pub u_q: Vec<Tensor>,
    pub c: Vec<Tensor>,
    pub alpha: f64,
    /// Coefficient of the quadratic term nu * ||y||^2.
    pub nu: f64,
}

impl ScalarMlp {
    /// Width-`hidden` two-hidden-layer net. `nu` starts at 1/(4 mu) so the
    /// composition with a fresh forward ICNN starts near the identity.
    pub fn init(dim: usize, hidden: usize, forward_mu: f64, rng_seed: &mut StdRng) -> Self {
        let s0 = 0.1 / (dim as f64).sqrt();
        let sh = 0.1 / (hidden as f64).sqrt();
        let v = vec![
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, s0)).unwrap(),
            Tensor::new(vec![hidden, hidden], rng::normal_vec(rng_seed, hidden * hidden, 0.0, sh)).unwrap(),
            Tensor::new(vec![1, hidden], rng::normal_vec(rng_seed, hidden, 0.0, sh)).unwrap(),
        ];
        let c = vec![
            Tensor::vector(rng::normal_vec(rng_seed, hidden, 0.0, 0.01)),
            Tensor::vector(rng::normal_vec(rng_seed, hidden, 0.0, 0.01)),
            Tensor::vector(rng::normal_vec(rng_seed, 1, 0.0, 0.01)),
        ];
        let sq = 0.05 / (dim as f64).sqrt();
        let u_q = vec![
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, sq)).unwrap(),
            Tensor::new(vec![hidden, dim], rng::normal_vec(rng_seed, hidden * dim, 0.0, sq)).unwrap(),
            Tensor::new(vec![1, dim], rng::normal_vec(rng_seed, dim, 0.0, sq)).unwrap(),
        ];
        Self { v, u_q, c, alpha: 0.2, nu: 1.0 / (4.0 * forward_mu) }
    }

    pub fn dim(&self) -> usize {
        self.v[0].cols()
    }

    pub fn value_graph(
        &self,
        tape: &mut TapeGraph,
        y: crate::tape::NodeId,
    ) -> Result<crate::tape::NodeId, TapeError> {
        let mut h: Option<crate::tape::NodeId> = None;
        for i in 0..self.v.len() {
            let vi = tape.const_leaf(self.v[i].clone());
            let uq = tape.const_leaf(self.u_q[i].clone());
            let ci = tape.const_leaf(self.c[i].clone());
            let carrier = match h {
                None => y,
                Some(prev) => prev,
            };
            let lin = tape.matvec(vi, carrier)?;
            let qy = tape.matvec(uq, y)?;
            let qsq = tape.square(qy)?;
            let ai = tape.add(lin, qsq)?;
            let ai = tape.add(ai, ci)?;
            if i + 1 == self.v.len() {
                h = Some(ai); // linear output layer
            } else {
                h = Some(tape.leaky_relu(ai, self.alpha)?);
            }
        }
        let chain = tape.reshape(h.expect("at least one layer"), vec![])?;
        let sq = tape.dot(y, y)?;
        let nu = tape.scalar_leaf(self.nu);
        let quad = tape.scalar_mul(nu, sq)?;
        tape.add(chain, quad)
    }

    /// Gradient of the scalar field at `y`, via the tape.
    pub fn gradient(&self, y: &Tensor) -> Result<Tensor, TapeError> {
        let mut tape = TapeGraph::new();
        let yn = tape.leaf(y.clone());
        let root = self.value_graph(&mut tape, yn)?;
        let grads = tape.backward(root)?;
        Ok(grads.grad(yn).clone())
    }
}

/// A convex scalar field with strong-convexity metadata.
#[derive(Debug, Clone, PartialEq)]
pub enum MirrorPotential {
    /// Psi(x) = 1/2 ||x||^2; the mirror map is the identity.
    Euclidean { dim: usize },
    /// Negative entropy on the simplex interior.
    Entropic { dim: usize },
    /// Psi(x) = 1/2 x'Ax with (A + A')/2 positive definite.
    Quadratic { a: Tensor },
    /// Psi(x) = w'g(Ax), g a smooth leaky-ReLU: g(t) = a t + (1-a) log(1+e^t).
    OneLayer { a: Tensor, w: Tensor, alpha: f64 },
    Icnn(IcnnPotential),
}

impl MirrorPotential {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Euclidean { .. } => "euclidean",
            Self::Entropic { .. } => "entropic",
            Self::Quadratic { .. } => "quadratic",
            Self::OneLayer { .. } => "one-layer",
            Self::Icnn(_) => "icnn",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Euclidean { dim } | Self::Entropic { dim } => *dim,
            Self::Quadratic { a } => a.rows(),
            Self::OneLayer { a, .. } => a.rows(),
            Self::Icnn(net) => net.dim(),
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Self::Entropic { .. } => Domain::SimplexInterior,
            _ => Domain::Reals,
        }
    }

    /// The norm under which the strong-convexity certificate below holds.
    pub fn natural_norm(&self) -> Norm {
        match self {
            Self::Entropic { .. } => Norm::L1,
            _ => Norm::L2,
        }
    }

    /// Certified strong-convexity constant with respect to `natural_norm`.
    /// Entropic gets 1 from Pinsker on the simplex; the ICNN value 2 mu is a
    /// conservative floor from the explicit quadratic term alone. The
    /// one-layer kind carries no certificate.
    pub fn sigma(&self) -> f64 {
        match self {
            Self::Euclidean { .. } => 1.0,
            Self::Entropic { .. } => 1.0,
            Self::Quadratic { a } => linalg::sym_min_eigenvalue(&linalg::symmetrize(a)),
            Self::OneLayer { .. } => 0.0,
            Self::Icnn(net) => 2.0 * net.mu,
        }
    }

    /// One-layer kind with A = I + N(0, 0.01) entrywise, w ~ Unif(0, 1/d).
    pub fn one_layer_init(dim: usize, rng_seed: &mut StdRng) -> Self {
        let mut a = Tensor::eye(dim);
        let noise = rng::normal_vec(rng_seed, dim * dim, 0.0, 0.01);
        for (v, n) in a.data_mut().iter_mut().zip(noise) {
            *v += n;
        }
        let w = Tensor::vector(rng::uniform_vec(rng_seed, dim, 0.0, 1.0 / dim as f64));
        Self::OneLayer { a, w, alpha: 0.2 }
    }

    /// Quadratic kind with A = I + diag(N(0, 0.001)).
    pub fn quadratic_init(dim: usize, rng_seed: &mut StdRng) -> Self {
        let mut a = Tensor::eye(dim);
        let noise = rng::normal_vec(rng_seed, dim, 0.0, 0.001);
        for (i, n) in noise.into_iter().enumerate() {
            let v = a.at(i, i) + n;
            a.set(i, i, v);
        }
        Self::Quadratic { a }
    }

    fn check_domain(&self, x: &Tensor) -> Result<(), PotentialError> {
        if let Domain::SimplexInterior = self.domain() {
            for (i, &v) in x.data().iter().enumerate() {
                if v <= 0.0 {
                    return Err(PotentialError::DomainViolation { index: i, value: v });
                }
            }
        }
        Ok(())
    }
}

/// Psi(x).
pub fn potential_value(p: &MirrorPotential, x: &Tensor) -> Result<f64, PotentialError> {
    p.check_domain(x)?;
    match p {
        MirrorPotential::Euclidean { .. } => Ok(0.5 * x.dot(x)?),
        MirrorPotential::Entropic { .. } => {
            Ok(x.data().iter().map(|&v| v * v.ln()).sum())
        }
        MirrorPotential::Quadratic { a } => Ok(0.5 * x.dot(&a.matvec(x)?)?),
        MirrorPotential::OneLayer { a, w, alpha } => {
            let ax = a.matvec(x)?;
            let g = ax.map(|t| alpha * t + (1.0 - alpha) * crate::tape::softplus(t));
            Ok(w.dot(&g)?)
        }
        MirrorPotential::Icnn(net) => {
            let mut tape = TapeGraph::new();
            let xn = tape.leaf(x.clone());
            let root = net.value_graph(&mut tape, xn)?;
            Ok(tape.primal(root).scalar_value())
        }
    }
}

/// The mirror map: gradient of `potential_value` at `x`.
pub fn forward_map(p: &MirrorPotential, x: &Tensor) -> Result<Tensor, PotentialError> {
    p.check_domain(x)?;
    match p {
        MirrorPotential::Euclidean { .. } => Ok(x.clone()),
        MirrorPotential::Entropic { .. } => Ok(x.map(|v| 1.0 + v.ln())),
        MirrorPotential::Quadratic { a } => Ok(linalg::symmetrize(a).matvec(x)?),
        MirrorPotential::OneLayer { a, w, alpha } => {
            // grad = A' (w ⊙ g'(Ax)), g'(t) = a + (1-a) sigmoid(t)
            let ax = a.matvec(x)?;
            let gp = ax.map(|t| alpha + (1.0 - alpha) * crate::tape::sigmoid(t));
            let inner = w.mul(&gp)?;
            Ok(a.matvec_t(&inner)?)
        }
        MirrorPotential::Icnn(net) => {
            let mut tape = TapeGraph::new();
            let xn = tape.leaf(x.clone());
            let root = net.value_graph(&mut tape, xn)?;
            let grads = tape.backward(root)?;
            Ok(grads.grad(xn).clone())
        }
    }
}

/// How the dual point is carried back to the primal space.
#[derive(Debug, Clone, PartialEq)]
pub enum BackwardMap {
    /// The true inverse map, available only for closed-form kinds.
    ExactConjugate,
    /// Gradient of a learned scalar network; no convexity claim.
    GradientOfNetwork(ScalarMlp),
}

impl BackwardMap {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::ExactConjugate => "exact-conjugate",
            Self::GradientOfNetwork(_) => "gradient-of-network",
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Self::ExactConjugate)
    }
}

/// Backward map evaluation: exact kinds invert `forward_map` (up to the
/// one-layer clip); the learned kind evaluates the network gradient.
pub fn backward_map(
    b: &BackwardMap,
    p: &MirrorPotential,
    y: &Tensor,
) -> Result<Tensor, PotentialError> {
    match b {
        BackwardMap::GradientOfNetwork(mlp) => Ok(mlp.gradient(y)?),
        BackwardMap::ExactConjugate => match p {
            MirrorPotential::Euclidean { .. } => Ok(y.clone()),
            MirrorPotential::Entropic { .. } => {
                // softmax with max subtraction; lands on the simplex
                let m = y.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e = y.map(|v| (v - m).exp());
                let s = e.sum();
                Ok(e.scale(1.0 / s))
            }
            MirrorPotential::Quadratic { a } => {
                Ok(linalg::solve_spd(&linalg::symmetrize(a), y)?)
            }
            MirrorPotential::OneLayer { a, w, alpha } => {
                // invert y = A'(w ⊙ g'(Ax)): u = ((A')^{-1} y - a w) / ((1-a) w),
                // clip u into [eps, 1-eps], then x = A^{-1} logit(u)
                let at = a.transpose()?;
                let pre = linalg::solve_lu(&at, y)?;
                let mut u = Vec::with_capacity(y.len());
                for i in 0..y.len() {
                    let raw = (pre.data()[i] - alpha * w.data()[i])
                        / ((1.0 - alpha) * w.data()[i]);
                    u.push(raw.clamp(ONE_LAYER_CLIP_EPS, 1.0 - ONE_LAYER_CLIP_EPS));
                }
                let logit = Tensor::vector(u.iter().map(|&v| (v / (1.0 - v)).ln()).collect());
                Ok(linalg::solve_lu(a, &logit)?)
            }
            MirrorPotential::Icnn(_) => Err(PotentialError::NoExactBackward { kind: "icnn" }),
        },
    }
}

/// Bregman distance B(x, y) = Psi(x) - Psi(y) - <grad Psi(y), x - y>.
pub fn bregman(p: &MirrorPotential, x: &Tensor, y: &Tensor) -> Result<f64, PotentialError> {
    let px = potential_value(p, x)?;
    let py = potential_value(p, y)?;
    let gy = forward_map(p, y)?;
    let diff = x.sub(y)?;
    Ok(px - py - gy.dot(&diff)?)
}

/// Options for the numerical inverse oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Line-search halving factor.
    pub backtrack: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000, backtrack: 0.5 }
    }
}

/// Numerically invert the forward map: find x with grad Psi(x) ~= y by
/// minimizing Psi(x) - <y, x> with a damped quasi-Newton/gradient scheme
/// (spectral Barzilai-Borwein step lengths under an Armijo backtracking
/// safeguard; the entropic kind scales by the iterate to counter its
/// diag(1/x) Hessian). Used by diagnostics; independent of `backward_map`.
pub fn exact_inverse_oracle(
    p: &MirrorPotential,
    y: &Tensor,
    opts: OracleOptions,
) -> Result<Tensor, PotentialError> {
    let dim = p.dim();
    let (mut x, init_scale): (Tensor, f64) = match p {
        MirrorPotential::Entropic { .. } => (Tensor::full(&[dim], 1.0 / dim as f64), 1.0),
        MirrorPotential::Icnn(net) => {
            if net.mu <= 0.0 {
                return Err(PotentialError::OracleUnsupported { kind: "icnn (mu = 0)" });
            }
            (Tensor::zeros(&[dim]), 1.0 / (2.0 * net.mu))
        }
        MirrorPotential::OneLayer { .. } => {
            return Err(PotentialError::OracleUnsupported { kind: "one-layer" })
        }
        _ => (Tensor::zeros(&[dim]), 1.0),
    };
    let entropic = matches!(p, MirrorPotential::Entropic { .. });
    let phi = |x: &Tensor| -> Result<f64, PotentialError> {
        Ok(potential_value(p, x)? - y.dot(x)?)
    };
    let mut fx = phi(&x)?;
    let mut grad = forward_map(p, &x)?.sub(y)?;
    let mut scale = init_scale;
    let mut prev: Option<(Tensor, Tensor)> = None;
    let mut residual = f64::INFINITY;
    // nonmonotone (SPG-style) reference window: spectral steps are allowed
    // to raise the value temporarily as long as they beat the recent max
    let mut recent = std::collections::VecDeque::with_capacity(10);
    recent.push_back(fx);
    for iter in 0..opts.max_iter {
        residual = grad.norm_linf();
        if residual <= opts.tol {
            return Ok(x);
        }
        if let Some((px, pg)) = &prev {
            // BB2 spectral step <dx, dg> / <dg, dg>
            let dx = x.sub(px)?;
            let dg = grad.sub(pg)?;
            let denom = dg.dot(&dg)?;
            if denom > 0.0 {
                let s = dx.dot(&dg)? / denom;
                if s.is_finite() && s > 0.0 {
                    scale = s.clamp(init_scale * 1e-8, init_scale * 1e8);
                }
            }
        }
        let dir = if entropic {
            grad.mul(&x)?.scale(-1.0)
        } else {
            grad.scale(-scale)
        };
        let slope = grad.dot(&dir)?;
        let reference = recent.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut eta = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = x.clone();
            cand.axpy(eta, &dir);
            let in_domain = match p.domain() {
                Domain::SimplexInterior => cand.data().iter().all(|&v| v > 0.0),
                Domain::Reals => true,
            };
            if in_domain {
                let fc = phi(&cand)?;
                if fc <= reference + 1e-4 * eta * slope {
                    prev = Some((x.clone(), grad.clone()));
                    x = cand;
                    fx = fc;
                    grad = forward_map(p, &x)?.sub(y)?;
                    accepted = true;
                    break;
                }
            }
            eta *= opts.backtrack;
        }
        if !accepted {
            return Err(PotentialError::OracleDidNotConverge { iters: iter, residual });
        }
        if recent.len() == 10 {
            recent.pop_front();
        }
        recent.push_back(fx);
    }
    Err(PotentialError::OracleDidNotConverge { iters: opts.max_iter, residual })
}

/// Replace every inter-layer weight entry by max(entry, 0).
pub fn clip_icnn_weights(p: &mut MirrorPotential) -> Result<(), PotentialError> {
    match p {
        MirrorPotential::Icnn(net) => {
            for w in &mut net.w_z {
                for v in w.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Ok(())
        }
        other => Err(PotentialError::WrongKind { expected: "icnn", got: other.kind_name() }),
    }
}

/// A forward potential with its backward map and the step-size clip interval
/// applied to learned schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorPair {
    pub forward: MirrorPotential,
    pub backward: BackwardMap,
    pub step_clip: (f64, f64),
}

impl MirrorPair {
    pub fn new(
        forward: MirrorPotential,
        backward: BackwardMap,
        step_clip: (f64, f64),
    ) -> Result<Self, PotentialError> {
        assert!(step_clip.0 > 0.0 && step_clip.0 < step_clip.1, "need 0 < lo < hi");
        if backward.is_exact() {
            if let MirrorPotential::Icnn(_) = forward {
                return Err(PotentialError::NoExactBackward { kind: "icnn" });
            }
        }
        Ok(Self { forward, backward, step_clip })
    }

    pub fn exact(forward: MirrorPotential) -> Result<Self, PotentialError> {
        Self::new(forward, BackwardMap::ExactConjugate, (1e-3, 1e-1))
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::exact(MirrorPotential::Euclidean { dim }).unwrap()
    }

    pub fn entropic(dim: usize) -> Self {
        Self::exact(MirrorPotential::Entropic { dim }).unwrap()
    }

    /// One application of backward after forward; the identity for exact pairs.
    pub fn compose(&self, x: &Tensor) -> Result<Tensor, PotentialError> {
        let dual = forward_map(&self.forward, x)?;
        backward_map(&self.backward, &self.forward, &dual)
    }
}

// ---------------------------------------------------------------------------
// checkpoint serialization

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    out.push_str("kind=");
    out.push_str(name);
    out.push('\n');
    out.push_str("shape=");
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    out.push_str(&dims.join(" "));
    out.push('\n');
    let vals: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
    out.push_str(&vals.join(" "));
    out.push('\n');
}

/// Serialize a pair (plus an optional learned step schedule) to the
/// plain-text checkpoint format: per tensor a `kind=` line, a `shape=` line,
/// and one whitespace-separated row of decimal reals.
pub fn checkpoint_to_string(pair: &MirrorPair, schedule: Option<&[f64]>) -> String {
    let mut out = String::new();
    out.push_str(&format!("potential={}\n", pair.forward.kind_name()));
    out.push_str(&format!("backward={}\n", pair.backward.kind_name()));
    out.push_str(&format!("dim={}\n", pair.forward.dim()));
    out.push_str(&format!("clip={} {}\n", pair.step_clip.0, pair.step_clip.1));
    match &pair.forward {
        MirrorPotential::Euclidean { .. } | MirrorPotential::Entropic { .. } => {}
        MirrorPotential::Quadratic { a } => write_tensor(&mut out, "forward.a", a),
        MirrorPotential::OneLayer { a, w, alpha } => {
            write_tensor(&mut out, "forward.a", a);
            write_tensor(&mut out, "forward.w", w);
            write_tensor(&mut out, "forward.alpha", &Tensor::scalar(*alpha));
        }
        MirrorPotential::Icnn(net) => {
            for (i, t) in net.w_x.iter().enumerate() {
                write_tensor(&mut out, &format!("forward.w_x.{i}"), t);
            }
            for (i, t) in net.w_q.iter().enumerate() {
                write_tensor(&mut out, &format!("forward.w_q.{i}"), t);
            }
            for (i, t) in net.w_z.iter().enumerate() {
                write_tensor(&mut out, &format!("forward.w_z.{i}"), t);
            }
            for (i, t) in net.b.iter().enumerate() {
                write_tensor(&mut out, &format!("forward.b.{i}"), t);
            }
            write_tensor(&mut out, "forward.alpha", &Tensor::scalar(net.alpha));
            write_tensor(&mut out, "forward.mu", &Tensor::scalar(net.mu));
        }
    }
    if let BackwardMap::GradientOfNetwork(mlp) = &pair.backward {
        for (i, t) in mlp.v.iter().enumerate() {
            write_tensor(&mut out, &format!("backward.v.{i}"), t);
        }
        for (i, t) in mlp.u_q.iter().enumerate() {
            write_tensor(&mut out, &format!("backward.u_q.{i}"), t);
        }
        for (i, t) in mlp.c.iter().enumerate() {
            write_tensor(&mut out, &format!("backward.c.{i}"), t);
        }
        write_tensor(&mut out, "backward.alpha", &Tensor::scalar(mlp.alpha));
        write_tensor(&mut out, "backward.nu", &Tensor::scalar(mlp.nu));
    }
    if let Some(sched) = schedule {
        let vals: Vec<String> = sched.iter().map(|v| format!("{v}")).collect();
        out.push_str("schedule=");
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_checkpoint(
    path: &std::path::Path,
    pair: &MirrorPair,
    schedule: Option<&[f64]>,
) -> Result<(), PotentialError> {
    std::fs::write(path, checkpoint_to_string(pair, schedule))?;
    Ok(())
}

/// Parse the checkpoint format written by `checkpoint_to_string`.
pub fn checkpoint_from_string(text: &str) -> Result<(MirrorPair, Option<Vec<f64>>), PotentialError> {
    let mut potential_kind = None;
    let mut backward_kind = None;
    let mut dim = None;
    let mut clip = (1e-3, 1e-1);
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut schedule = None;

    let err = |line: usize, msg: &str| PotentialError::Checkpoint { line, msg: msg.to_string() };

    let mut lines = text.lines().enumerate().peekable();
    while let Some((ln, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix("potential=") {
            potential_kind = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("backward=") {
            backward_kind = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("dim=") {
            dim = Some(v.parse::<usize>().map_err(|_| err(ln + 1, "bad dim"))?);
        } else if let Some(v) = line.strip_prefix("clip=") {
            let parts: Vec<&str> = v.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(err(ln + 1, "clip needs two values"));
            }
            clip = (
                parts[0].parse().map_err(|_| err(ln + 1, "bad clip lo"))?,
                parts[1].parse().map_err(|_| err(ln + 1, "bad clip hi"))?,
            );
        } else if let Some(v) = line.strip_prefix("schedule=") {
            let vals: Result<Vec<f64>, _> = v.split_whitespace().map(str::parse).collect();
            schedule = Some(vals.map_err(|_| err(ln + 1, "bad schedule value"))?);
        } else if let Some(name) = line.strip_prefix("kind=") {
            let name = name.to_string();
            let (sln, shape_line) = lines.next().ok_or_else(|| err(ln + 1, "missing shape line"))?;
            let shape_str = shape_line
                .trim()
                .strip_prefix("shape=")
                .ok_or_else(|| err(sln + 1, "expected shape= line"))?;
            let shape: Result<Vec<usize>, _> =
                shape_str.split_whitespace().map(str::parse).collect();
            let shape = shape.map_err(|_| err(sln + 1, "bad shape"))?;
            let (dln, data_line) = lines.next().ok_or_else(|| err(sln + 1, "missing data line"))?;
            let data: Result<Vec<f64>, _> =
                data_line.split_whitespace().map(str::parse).collect();
            let data = data.map_err(|_| err(dln + 1, "bad tensor value"))?;
            let t = Tensor::new(shape, data).map_err(|e| err(dln + 1, &e.to_string()))?;
            tensors.push((name, t));
        } else {
            return Err(err(ln + 1, "unrecognized line"));
        }
    }

    let potential_kind = potential_kind.ok_or_else(|| err(0, "missing potential="))?;
    let backward_kind = backward_kind.ok_or_else(|| err(0, "missing backward="))?;
    let dim = dim.ok_or_else(|| err(0, "missing dim="))?;

    let take = |tensors: &[(String, Tensor)], name: &str| -> Result<Tensor, PotentialError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| err(0, &format!("missing tensor {name}")))
    };
    let take_seq = |tensors: &[(String, Tensor)], prefix: &str| -> Vec<Tensor> {
        let mut out = Vec::new();
        for i in 0.. {
            match tensors.iter().find(|(n, _)| *n == format!("{prefix}.{i}")) {
                Some((_, t)) => out.push(t.clone()),
                None => break,
            }
        }
        out
    };

    let forward = match potential_kind.as_str() {
        "euclidean" => MirrorPotential::Euclidean { dim },
        "entropic" => MirrorPotential::Entropic { dim },
        "quadratic" => MirrorPotential::Quadratic { a: take(&tensors, "forward.a")? },
        "one-layer" => MirrorPotential::OneLayer {
            a: take(&tensors, "forward.a")?,
            w: take(&tensors, "forward.w")?,
            alpha: take(&tensors, "forward.alpha")?.scalar_value(),
        },
        "icnn" => MirrorPotential::Icnn(IcnnPotential {
            w_x: take_seq(&tensors, "forward.w_x"),
            w_q: take_seq(&tensors, "forward.w_q"),
            w_z: take_seq(&tensors, "forward.w_z"),
            b: take_seq(&tensors, "forward.b"),
            alpha: take(&tensors, "forward.alpha")?.scalar_value(),
            mu: take(&tensors, "forward.mu")?.scalar_value(),
        }),
        other => return Err(err(0, &format!("unknown potential kind {other}"))),
    };
    let backward = match backward_kind.as_str() {
        "exact-conjugate" => BackwardMap::ExactConjugate,
        "gradient-of-network" => BackwardMap::GradientOfNetwork(ScalarMlp {
            v: take_seq(&tensors, "backward.v"),
            u_q: take_seq(&tensors, "backward.u_q"),
            c: take_seq(&tensors, "backward.c"),
            alpha: take(&tensors, "backward.alpha")?.scalar_value(),
            nu: take(&tensors, "backward.nu")?.scalar_value(),
        }),
        other => return Err(err(0, &format!("unknown backward kind {other}"))),
    };
    Ok((MirrorPair::new(forward, backward, clip)?, schedule))
}

pub fn read_checkpoint(
    path: &std::path::Path,
) -> Result<(MirrorPair, Option<Vec<f64>>), PotentialError> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_string(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn euclidean_value_and_map() {
        let p = MirrorPotential::Euclidean { dim: 2 };
        let x = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(potential_value(&p, &x).unwrap(), 12.5);
        assert_eq!(forward_map(&p, &x).unwrap(), x);
        let y = Tensor::vector(vec![-2.0, 9.0]);
        assert_eq!(backward_map(&BackwardMap::ExactConjugate, &p, &y).unwrap(), y);
    }

    #[test]
    fn entropic_value_map_and_inverse() {
        let p = MirrorPotential::Entropic { dim: 2 };
        let x = Tensor::vector(vec![0.5, 0.5]);
        let v = potential_value(&p, &x).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        let fm = forward_map(&p, &x).unwrap();
        for &g in fm.data() {
            assert!((g - (1.0 - std::f64::consts::LN_2)).abs() < 1e-15);
        }
        // inverse pair at a non-uniform point
        let x = Tensor::vector(vec![0.3, 0.7]);
        let y = forward_map(&p, &x).unwrap();
        let back = backward_map(&BackwardMap::ExactConjugate, &p, &y).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn entropic_rejects_nonpositive() {
        let p = MirrorPotential::Entropic { dim: 2 };
        let x = Tensor::vector(vec![0.0, 1.0]);
        assert!(matches!(
            potential_value(&p, &x),
            Err(PotentialError::DomainViolation { index: 0, .. })
        ));
    }

    #[test]
    fn quadratic_value_and_solve() {
        let a = Tensor::matrix(2, 2, vec![5.0, 4.0, 4.0, 5.0]).unwrap();
        let p = MirrorPotential::Quadratic { a };
        let x = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(potential_value(&p, &x).unwrap(), 2.5);

        let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let p = MirrorPotential::Quadratic { a };
        let y = Tensor::vector(vec![2.0, 4.0]);
        let x = backward_map(&BackwardMap::ExactConjugate, &p, &y).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-14);
        assert!((x.data()[1] - 1.0).abs() < 1e-14);
        // forward composition verifies the solve
        let back = forward_map(&p, &x).unwrap();
        for (u, v) in back.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn icnn_without_skip_weights_reduces_to_quadratic_gradient() {
        let mut rng = seeded(11);
        let mut net = IcnnPotential::init(2, 8, 0.5, &mut rng);
        for w in net.w_x.iter_mut().chain(net.w_q.iter_mut()) {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        let p = MirrorPotential::Icnn(net);
        let x = Tensor::vector(vec![0.37, -1.4]);
        let g = forward_map(&p, &x).unwrap();
        // 2 mu x = x at mu = 0.5
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // finite-difference check of the tape gradient
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (potential_value(&p, &xp).unwrap() - potential_value(&p, &xm).unwrap())
                / (2.0 * h);
            assert!((g.data()[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn bregman_examples() {
        let p = MirrorPotential::Euclidean { dim: 2 };
        let x = Tensor::vector(vec![1.0, 2.0]);
        let y = Tensor::vector(vec![4.0, 6.0]);
        assert!((bregman(&p, &x, &y).unwrap() - 12.5).abs() < 1e-12);
        assert_eq!(bregman(&p, &x, &x).unwrap(), 0.0);

        // Bregman of negative entropy equals KL divergence
        let p = MirrorPotential::Entropic { dim: 2 };
        let x = Tensor::vector(vec![0.2, 0.8]);
        let y = Tensor::vector(vec![0.5, 0.5]);
        let b = bregman(&p, &x, &y).unwrap();
        let kl: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| a * (a / b).ln())
            .sum();
        assert!((b - kl).abs() < 1e-12);
        assert!((b - 0.192744757021758).abs() < 1e-12);
    }

    #[test]
    fn one_layer_inverse_pair() {
        // 1000 random points whose dual image stays away from the clip region
        let mut rng = seeded(5);
        let p = MirrorPotential::one_layer_init(4, &mut rng);
        for _ in 0..1000 {
            let x = crate::rng::standard_normal_tensor(&mut rng, &[4]).scale(0.5);
            let y = forward_map(&p, &x).unwrap();
            let back = backward_map(&BackwardMap::ExactConjugate, &p, &y).unwrap();
            let err = back.sub(&x).unwrap().norm_linf();
            assert!(err < 1e-8, "round trip error {err}");
        }
    }

    #[test]
    fn oracle_euclidean_and_quadratic() {
        let p = MirrorPotential::Euclidean { dim: 2 };
        let y = Tensor::vector(vec![1.0, 1.0]);
        let x = exact_inverse_oracle(&p, &y, OracleOptions::default()).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-10);

        let mut rng = seeded(9);
        let a = Tensor::matrix(2, 2, vec![3.0, 1.0, 1.0, 2.0]).unwrap();
        let p = MirrorPotential::Quadratic { a };
        let y = crate::rng::standard_normal_tensor(&mut rng, &[2]);
        let via_oracle = exact_inverse_oracle(&p, &y, OracleOptions::default()).unwrap();
        let via_solve = backward_map(&BackwardMap::ExactConjugate, &p, &y).unwrap();
        for (u, v) in via_oracle.data().iter().zip(via_solve.data()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_icnn_round_trip() {
        let mut rng = seeded(21);
        let net = IcnnPotential::init(3, 8, 0.1, &mut rng);
        let p = MirrorPotential::Icnn(net);
        let x0 = Tensor::vector(vec![0.4, -0.2, 0.9]);
        let y = forward_map(&p, &x0).unwrap();
        let rec = exact_inverse_oracle(&p, &y, OracleOptions::default()).unwrap();
        for (u, v) in rec.data().iter().zip(x0.data()) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn clip_icnn_weights_examples() {
        let mut rng = seeded(2);
        let mut net = IcnnPotential::init(2, 4, 0.01, &mut rng);
        net.w_z[0].data_mut()[0] = -0.3;
        net.w_z[0].data_mut()[1] = 0.7;
        let mut p = MirrorPotential::Icnn(net);
        clip_icnn_weights(&mut p).unwrap();
        if let MirrorPotential::Icnn(net) = &p {
            assert_eq!(net.w_z[0].data()[0], 0.0);
            assert_eq!(net.w_z[0].data()[1], 0.7);
        } else {
            unreachable!()
        }
        let mut wrong = MirrorPotential::Euclidean { dim: 2 };
        assert!(clip_icnn_weights(&mut wrong).is_err());
    }

    #[test]
    fn icnn_pair_with_exact_backward_rejected() {
        let mut rng = seeded(3);
        let net = IcnnPotential::init(2, 4, 0.01, &mut rng);
        let err = MirrorPair::exact(MirrorPotential::Icnn(net)).unwrap_err();
        assert!(matches!(err, PotentialError::NoExactBackward { .. }));
    }

    #[test]
    fn checkpoint_round_trip_exact_bits() {
        let mut rng = seeded(17);
        let net = IcnnPotential::init(3, 4, 0.01, &mut rng);
        let mlp = ScalarMlp::init(3, 4, 0.01, &mut rng);
        let pair = MirrorPair::new(
            MirrorPotential::Icnn(net),
            BackwardMap::GradientOfNetwork(mlp),
            (1e-3, 1e-1),
        )
        .unwrap();
        let sched = vec![0.01, 0.02, 0.0301234567890123];
        let text = checkpoint_to_string(&pair, Some(&sched));
        let (pair2, sched2) = checkpoint_from_string(&text).unwrap();
        assert_eq!(pair, pair2);
        assert_eq!(sched2.unwrap(), sched);
    }

    #[test]
    fn entropic_backward_lands_on_simplex() {
        let p = MirrorPotential::Entropic { dim: 5 };
        let mut rng = seeded(123);
        for _ in 0..100 {
            let y = crate::rng::standard_normal_tensor(&mut rng, &[5]).scale(3.0);
            let x = backward_map(&BackwardMap::ExactConjugate, &p, &y).unwrap();
            assert!(x.data().iter().all(|&v| v > 0.0));
            assert!((x.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_point_identity_all_kinds() {
        // B(c,a) + B(a,b) - B(c,b) = <grad(b) - grad(a), c - a>
        let mut rng = seeded(31);
        let kinds: Vec<MirrorPotential> = vec![
            MirrorPotential::Euclidean { dim: 3 },
            MirrorPotential::Entropic { dim: 3 },
            MirrorPotential::Quadratic {
                a: Tensor::matrix(3, 3, vec![2.0, 0.3, 0.0, 0.3, 1.5, 0.2, 0.0, 0.2, 1.0]).unwrap(),
            },
            MirrorPotential::one_layer_init(3, &mut rng),
            MirrorPotential::Icnn(IcnnPotential::init(3, 8, 0.05, &mut rng)),
        ];
        for p in kinds {
            for _ in 0..1000 {
                let (a, b, c) = match p.domain() {
                    Domain::SimplexInterior => (
                        rng::uniform_simplex(&mut rng, 3),
                        rng::uniform_simplex(&mut rng, 3),
                        rng::uniform_simplex(&mut rng, 3),
                    ),
                    Domain::Reals => (
                        crate::rng::standard_normal_tensor(&mut rng, &[3]),
                        crate::rng::standard_normal_tensor(&mut rng, &[3]),
                        crate::rng::standard_normal_tensor(&mut rng, &[3]),
                    ),
                };
                let lhs = bregman(&p, &c, &a).unwrap() + bregman(&p, &a, &b).unwrap()
                    - bregman(&p, &c, &b).unwrap();
                let gb = forward_map(&p, &b).unwrap();
                let ga = forward_map(&p, &a).unwrap();
                let rhs = gb.sub(&ga).unwrap().dot(&c.sub(&a).unwrap()).unwrap();
                assert!(
                    (lhs - rhs).abs() < 1e-10,
                    "kind {} identity residual {}",
                    p.kind_name(),
                    (lhs - rhs).abs()
                );
            }
        }
    }

    #[test]
    fn icnn_strong_convexity_floor() {
        let mut rng = seeded(77);
        let mu = 0.03;
        let p = MirrorPotential::Icnn(IcnnPotential::init(4, 8, mu, &mut rng));
        for _ in 0..200 {
            let x = crate::rng::standard_normal_tensor(&mut rng, &[4]);
            let y = crate::rng::standard_normal_tensor(&mut rng, &[4]);
            let b = bregman(&p, &x, &y).unwrap();
            let d = x.sub(&y).unwrap();
            assert!(b >= mu * d.dot(&d).unwrap() - 1e-9);
        }
    }
}
